#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "zymflow/errors.hpp"
#include "zymflow/rng.hpp"
#include "zymflow/vec3.hpp"

namespace zymflow {

// Input coordinates are Angstrom; everything in memory is model units so that
// pocket extents are O(1) and match the unit-variance translation prior.
inline constexpr double kCoordScale = 0.1;  // model units per Angstrom

inline constexpr int kNumAminoAcids = 20;
inline constexpr int kAminoMask = kNumAminoAcids;  // mask state, 0-based last
inline constexpr const char* kAminoLetters = "ACDEFGHIKLMNPQRSTVWY";

inline int amino_index_from_letter(char letter) {
  for (int i = 0; i < kNumAminoAcids; ++i)
    if (kAminoLetters[i] == letter) return i;
  return -1;
}

inline char amino_letter_from_index(int idx) {
  if (idx >= 0 && idx < kNumAminoAcids) return kAminoLetters[idx];
  return 'X';
}

// ---------------------------------------------------------------------------
// Rotations

struct Rotation {
  Mat3 m;

  static Rotation identity() { return Rotation{Mat3::identity()}; }

  // Max deviation from orthonormality / unit determinant.
  double orthonormality_error() const {
    const Mat3 g = m.transposed() * m - Mat3::identity();
    return g.frobenius_norm();
  }
  bool is_valid(double tol = 1e-6) const {
    return orthonormality_error() <= tol && std::abs(m.det() - 1.0) <= tol;
  }

  Rotation operator*(const Rotation& o) const { return Rotation{m * o.m}; }
  Vec3 operator*(const Vec3& v) const { return m * v; }
  Rotation transposed() const { return Rotation{m.transposed()}; }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 k = Mat3::zero();
  k(0, 1) = -v.z; k(0, 2) = v.y;
  k(1, 0) = v.z;  k(1, 2) = -v.x;
  k(2, 0) = -v.y; k(2, 1) = v.x;
  return k;
}

// Rodrigues formula; |v| = 0 returns the identity.
inline Rotation so3_exp(const Vec3& v) {
  const double theta2 = v.norm2();
  double a, b;  // sin(t)/t and (1-cos(t))/t^2
  if (theta2 < 1e-8) {
    a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
    b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 k = skew(v);
  return Rotation{Mat3::identity() + k * a + (k * k) * b};
}

// Axis-angle with angle in [0, pi]. Near pi the axis is recovered from the
// symmetric part with a largest-diagonal pivot.
inline Vec3 so3_log(const Rotation& r) {
  if (!r.is_valid(1e-6))
    throw InvalidRotationError("so3_log: input is not a rotation matrix");
  const Mat3& m = r.m;
  const double c = std::fmin(1.0, std::fmax(-1.0, (m.trace() - 1.0) * 0.5));
  const double theta = std::acos(c);
  // Half the vee of the antisymmetric part; equals sin(theta) * axis.
  const Vec3 s{(m(2, 1) - m(1, 2)) * 0.5,
               (m(0, 2) - m(2, 0)) * 0.5,
               (m(1, 0) - m(0, 1)) * 0.5};

  if (theta < 1e-6) {
    const double t2 = theta * theta;
    return s * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0);
  }
  if (theta > M_PI - 1e-3) {
    // uu^T = (sym(m) - c*I) / (1 - c)
    const Mat3 sym = (m + m.transposed()) * 0.5;
    Mat3 uut = Mat3::zero();
    for (int i = 0; i < 9; ++i)
      uut.m[i] = (sym.m[i] - (i % 4 == 0 ? c : 0.0)) / (1.0 - c);
    int piv = 0;
    for (int i = 1; i < 3; ++i)
      if (uut(i, i) > uut(piv, piv)) piv = i;
    Vec3 u;
    u[piv] = std::sqrt(std::fmax(uut(piv, piv), 0.0));
    for (int j = 0; j < 3; ++j)
      if (j != piv) u[j] = uut(piv, j) / u[piv];
    u = u.normalized();
    if (s.norm() > 1e-9) {
      if (u.dot(s) < 0.0) u = -u;
    } else {
      // Exactly-pi rotations have sign-ambiguous axes; canonicalize so the
      // largest-magnitude component is positive.
      int big = 0;
      for (int i = 1; i < 3; ++i)
        if (std::abs(u[i]) > std::abs(u[big])) big = i;
      if (u[big] < 0.0) u = -u;
    }
    return u * theta;
  }
  return s * (theta / std::sin(theta));
}

// r_t = r0 * exp(t * log(r0^T r1)); the geodesic from r0 to r1.
inline Rotation geodesic_interpolate(const Rotation& r0, const Rotation& r1,
                                     double t) {
  const Vec3 v = so3_log(Rotation{r0.m.transposed() * r1.m});
  return Rotation{r0.m * so3_exp(v * t).m};
}

inline Vec3 translation_interpolate(const Vec3& x0, const Vec3& x1, double t) {
  return x0 * (1.0 - t) + x1 * t;
}

inline double geodesic_distance(const Rotation& a, const Rotation& b) {
  return so3_log(Rotation{a.m.transposed() * b.m}).norm();
}

// ---------------------------------------------------------------------------
// Quaternions (w, x, y, z)

struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  Quat normalized() const {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    return {w / n, x / n, y / n, z / n};
  }
  // Canonical representative with w >= 0 (q and -q are the same rotation).
  Quat canonical() const {
    Quat q = normalized();
    if (q.w < 0.0) { q.w = -q.w; q.x = -q.x; q.y = -q.y; q.z = -q.z; }
    return q;
  }
};

inline Mat3 quat_to_matrix(const Quat& qin) {
  const Quat q = qin.normalized();
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 m;
  m.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
  return m;
}

// Shepperd's method: pick the largest of (w,x,y,z) as pivot.
inline Quat matrix_to_quat(const Mat3& m) {
  const double tr = m.trace();
  Quat q;
  if (tr > m(0, 0) && tr > m(1, 1) && tr > m(2, 2)) {
    const double s = std::sqrt(tr + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (m(2, 1) - m(1, 2)) / s;
    q.y = (m(0, 2) - m(2, 0)) / s;
    q.z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    const double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    q.w = (m(2, 1) - m(1, 2)) / s;
    q.x = 0.25 * s;
    q.y = (m(0, 1) + m(1, 0)) / s;
    q.z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    const double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    q.w = (m(0, 2) - m(2, 0)) / s;
    q.x = (m(0, 1) + m(1, 0)) / s;
    q.y = 0.25 * s;
    q.z = (m(1, 2) + m(2, 1)) / s;
  } else {
    const double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    q.w = (m(1, 0) - m(0, 1)) / s;
    q.x = (m(0, 2) + m(2, 0)) / s;
    q.y = (m(1, 2) + m(2, 1)) / s;
    q.z = 0.25 * s;
  }
  return q.canonical();
}

// Re-orthonormalize a drifting rotation by passing through a unit quaternion.
inline Rotation renormalize(const Rotation& r) {
  return Rotation{quat_to_matrix(matrix_to_quat(r.m))};
}

// Haar-uniform rotation from a normalized 4-component Gaussian.
inline Rotation uniform_rotation(Rng& rng) {
  Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  return Rotation{quat_to_matrix(q.normalized())};
}

// ---------------------------------------------------------------------------
// Residue frames

struct ResidueFrame {
  Vec3 x;                 // CA position, model units
  Rotation r;             // local frame
  int aa = kAminoMask;    // 0..19 or kAminoMask
};

struct Pocket {
  std::vector<ResidueFrame> residues;
  int size() const { return static_cast<int>(residues.size()); }
};

// Translation from N(0, I), rotation Haar-uniform, amino acid masked.
inline ResidueFrame sample_frame_prior(Rng& rng) {
  ResidueFrame f;
  f.x = {rng.normal(), rng.normal(), rng.normal()};
  f.r = uniform_rotation(rng);
  f.aa = kAminoMask;
  return f;
}

// Idealized backbone template (N, CA, C, O) in the local frame, Angstrom.
// Standard peptide geometry with CA at the origin and C on +x.
inline const std::array<Vec3, 4>& backbone_template_angstrom() {
  static const std::array<Vec3, 4> tmpl = {
      Vec3{-0.525, 1.363, 0.000},   // N
      Vec3{0.000, 0.000, 0.000},    // CA
      Vec3{1.526, 0.000, 0.000},    // C
      Vec3{2.153, -1.062, 0.000},   // O
  };
  return tmpl;
}

inline std::array<Vec3, 4> backbone_template_model_units() {
  std::array<Vec3, 4> t = backbone_template_angstrom();
  for (auto& a : t) a *= kCoordScale;
  return t;
}

// Rigid placement of the idealized N/CA/C/O template; CA maps exactly to f.x.
inline std::array<Vec3, 4> backbone_atoms_from_frame(const ResidueFrame& f) {
  const auto tmpl = backbone_template_model_units();
  std::array<Vec3, 4> out;
  for (int k = 0; k < 4; ++k) out[k] = f.r * tmpl[k] + f.x;
  return out;
}

// Frame from backbone atoms: Gram-Schmidt on (C-CA, N-CA) with CA as origin.
inline ResidueFrame frame_from_backbone(const Vec3& n, const Vec3& ca,
                                        const Vec3& c, int aa = kAminoMask) {
  const Vec3 e1 = (c - ca).normalized();
  Vec3 u = n - ca;
  u = u - e1 * u.dot(e1);
  const Vec3 e2 = u.normalized();
  const Vec3 e3 = e1.cross(e2);
  ResidueFrame f;
  f.r = Rotation{Mat3::from_cols(e1, e2, e3)};
  f.x = ca;
  f.aa = aa;
  return f;
}

// 7-value frame record: unit quaternion (w >= 0) then translation.
inline std::array<double, 7> frame_to_record(const ResidueFrame& f) {
  const Quat q = matrix_to_quat(f.r.m);
  return {q.w, q.x, q.y, q.z, f.x.x, f.x.y, f.x.z};
}

inline ResidueFrame frame_from_record(const std::array<double, 7>& rec,
                                      int aa = kAminoMask) {
  ResidueFrame f;
  f.r = Rotation{quat_to_matrix(Quat{rec[0], rec[1], rec[2], rec[3]})};
  f.x = {rec[4], rec[5], rec[6]};
  f.aa = aa;
  return f;
}

}  // namespace zymflow
