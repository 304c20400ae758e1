#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <vector>

#include "zymflow/errors.hpp"
#include "zymflow/so3.hpp"
#include "zymflow/vec3.hpp"

namespace zymflow {

// ---------------------------------------------------------------------------
// Cyclic Jacobi eigensolver for small symmetric matrices (N <= 4).

template <int N>
inline void jacobi_eigen(std::array<std::array<double, N>, N> a,
                         std::array<double, N>& eigenvalues,
                         std::array<std::array<double, N>, N>& eigenvectors) {
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) eigenvectors[i][j] = i == j ? 1.0 : 0.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < N; ++p)
      for (int q = p + 1; q < N; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (int p = 0; p < N; ++p)
      for (int q = p + 1; q < N; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < N; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (int k = 0; k < N; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (int k = 0; k < N; ++k) {
          const double vkp = eigenvectors[k][p], vkq = eigenvectors[k][q];
          eigenvectors[k][p] = c * vkp - s * vkq;
          eigenvectors[k][q] = s * vkp + c * vkq;
        }
      }
  }
  for (int i = 0; i < N; ++i) eigenvalues[i] = a[i][i];
}

// ---------------------------------------------------------------------------
// Kabsch superposition: the proper rotation and translation minimizing
// sum ||R p_i + t - q_i||^2, solved through the quaternion eigenproblem
// (equivalent to the SVD construction with reflection correction).

struct KabschResult {
  Rotation rotation;
  Vec3 translation;
  double rmsd = 0.0;
};

inline KabschResult kabsch_align(const std::vector<Vec3>& p,
                                 const std::vector<Vec3>& q) {
  const int n = static_cast<int>(p.size());
  if (n < 3 || q.size() != p.size())
    throw DegenerateGeometryError("kabsch: need >= 3 paired points");
  Vec3 pc{0, 0, 0}, qc{0, 0, 0};
  for (int i = 0; i < n; ++i) { pc += p[i]; qc += q[i]; }
  pc = pc / n;
  qc = qc / n;

  // Cross-covariance S_ab = sum (p_i - pc)_a (q_i - qc)_b.
  Mat3 s = Mat3::zero();
  for (int i = 0; i < n; ++i) {
    const Vec3 a = p[i] - pc, b = q[i] - qc;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) s(r, c) += a[r] * b[c];
  }

  // Rank from the eigenvalues of S^T S; rank < 2 leaves the rotation
  // underdetermined (collinear point sets).
  {
    const Mat3 sts = s.transposed() * s;
    std::array<std::array<double, 3>, 3> m{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m[r][c] = sts(r, c);
    std::array<double, 3> ev{};
    std::array<std::array<double, 3>, 3> vec{};
    jacobi_eigen<3>(m, ev, vec);
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    const double sigma1 = std::sqrt(std::max(ev[0], 0.0));
    const double sigma2 = std::sqrt(std::max(ev[1], 0.0));
    if (sigma2 <= 1e-9 * std::max(1.0, sigma1))
      throw DegenerateGeometryError("kabsch: rank-deficient covariance");
  }

  const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2);
  const double syx = s(1, 0), syy = s(1, 1), syz = s(1, 2);
  const double szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
  std::array<std::array<double, 4>, 4> nmat = {{
      {sxx + syy + szz, syz - szy, szx - sxz, sxy - syx},
      {syz - szy, sxx - syy - szz, sxy + syx, szx + sxz},
      {szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy},
      {sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz},
  }};
  std::array<double, 4> ev{};
  std::array<std::array<double, 4>, 4> vec{};
  jacobi_eigen<4>(nmat, ev, vec);
  int best = 0;
  for (int k = 1; k < 4; ++k)
    if (ev[k] > ev[best]) best = k;
  const Quat quat{vec[0][best], vec[1][best], vec[2][best], vec[3][best]};

  KabschResult out;
  out.rotation = Rotation{quat_to_matrix(quat.normalized())};
  out.translation = qc - out.rotation * pc;
  double ss = 0.0;
  for (int i = 0; i < n; ++i)
    ss += (out.rotation * p[i] + out.translation - q[i]).norm2();
  out.rmsd = std::sqrt(ss / n);
  return out;
}

// ---------------------------------------------------------------------------
// TM-score with positional correspondence after Kabsch superposition;
// d0 = 1.24 (N-15)^(1/3) - 1.8 requires N >= 16 (Angstrom throughout).

inline double tm_d0(int n) {
  if (n < 16) throw NumericError("tm_score: need at least 16 residues");
  return 1.24 * std::cbrt(static_cast<double>(n - 15)) - 1.8;
}

inline double tm_score(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
  if (p.size() != q.size()) throw ShapeError("tm_score: length mismatch");
  const int n = static_cast<int>(p.size());
  const double d0 = tm_d0(n);
  const KabschResult k = kabsch_align(p, q);
  double tm = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = (k.rotation * p[i] + k.translation - q[i]).norm();
    tm += 1.0 / (1.0 + (d / d0) * (d / d0));
  }
  return tm / n;
}

// ---------------------------------------------------------------------------
// Amino-acid recovery: fraction of positions with matching categories.

inline double aar(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("aar: length mismatch");
  if (pred.empty()) throw ShapeError("aar: empty input");
  int match = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == truth[i]) ++match;
  return static_cast<double>(match) / pred.size();
}

// ---------------------------------------------------------------------------
// EC metrics: exact-match accuracy plus macro one-vs-rest precision/recall/F1
// over the classes present in the union of truth and predictions; classes
// with an undefined ratio contribute 0.

struct EcMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline EcMetrics ec_metrics(const std::vector<int>& pred,
                            const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("ec_metrics: length mismatch");
  if (pred.empty()) throw ShapeError("ec_metrics: empty input");
  EcMetrics out;
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == truth[i]) ++correct;
  out.accuracy = static_cast<double>(correct) / pred.size();

  std::set<int> classes(truth.begin(), truth.end());
  classes.insert(pred.begin(), pred.end());
  double p_sum = 0, r_sum = 0, f_sum = 0;
  for (int c : classes) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c && truth[i] == c) ++tp;
      else if (pred[i] == c) ++fp;
      else if (truth[i] == c) ++fn;
    }
    const double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    p_sum += prec;
    r_sum += rec;
    f_sum += f1;
  }
  const double k = static_cast<double>(classes.size());
  out.precision = p_sum / k;
  out.recall = r_sum / k;
  out.f1 = f_sum / k;
  return out;
}

// ---------------------------------------------------------------------------
// Per-reaction aggregation: best value, mean of the best k, and median per
// group, then means over groups. Groups smaller than k use the whole group.

struct TopkAggregate {
  double top1 = 0.0;
  double topk = 0.0;
  double median = 0.0;
  int clipped_groups = 0;  // groups with fewer than k samples
};

inline TopkAggregate aggregate_topk(const std::vector<std::vector<double>>& groups,
                                    int k, bool lower_is_better) {
  if (groups.empty()) throw ShapeError("aggregate_topk: no groups");
  TopkAggregate out;
  for (const auto& g : groups) {
    if (g.empty()) throw ShapeError("aggregate_topk: empty group");
    std::vector<double> sorted = g;
    std::sort(sorted.begin(), sorted.end());
    if (!lower_is_better) std::reverse(sorted.begin(), sorted.end());
    const int kk = std::min<int>(k, static_cast<int>(sorted.size()));
    if (kk < k) ++out.clipped_groups;
    out.top1 += sorted.front();
    double mean_k = 0.0;
    for (int i = 0; i < kk; ++i) mean_k += sorted[i];
    out.topk += mean_k / kk;
    const std::size_t n = sorted.size();
    out.median += n % 2 == 1 ? sorted[n / 2]
                             : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  }
  out.top1 /= groups.size();
  out.topk /= groups.size();
  out.median /= groups.size();
  return out;
}

}  // namespace zymflow
