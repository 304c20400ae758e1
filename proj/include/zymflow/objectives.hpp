#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "zymflow/errors.hpp"
#include "zymflow/network.hpp"
#include "zymflow/state.hpp"
#include "zymflow/tensor.hpp"

namespace zymflow {

enum class Stage { kBackbone, kLigand, kEnzyme };

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kBackbone: return "backbone";
    case Stage::kLigand: return "ligand";
    case Stage::kEnzyme: return "enzyme";
  }
  return "?";
}
inline Stage stage_from_name(const std::string& s) {
  if (s == "backbone") return Stage::kBackbone;
  if (s == "ligand") return Stage::kLigand;
  if (s == "enzyme") return Stage::kEnzyme;
  throw ConfigError("unknown stage: " + s);
}

struct LossWeights {
  double trans = 1.0, rot = 1.0, aa = 1.0, ec = 1.0, coevo = 1.0;
  double inter = 1.0, dist = 1.0, kd = 1.0;
  bool enzyme_keep_geometry = true;  // keep inter/dist active when fine-tuning
};

// Component values for one loss evaluation; inactive components are absent,
// not zero, and total is exactly the weighted sum of the active ones.
struct LossBreakdown {
  std::optional<double> trans, rot, aa, ec, coevo, inter, dist, kd;
  double total = 0.0;
  LossWeights weights;
};

// Clean-datum targets for one training example.
struct TrainingTargets {
  std::vector<ResidueFrame> frames;  // clean pocket frames with amino acids
  int ec = 0;                        // 0..6
  CoEvoMatrix coevo;                 // clean tokens
  std::optional<double> affinity;    // standardized label
};

inline constexpr double kSurfaceRho = 2.0;    // Angstrom^2 scale
inline constexpr double kSurfaceGamma = 6.0;
inline constexpr double kDistGateModelUnits = 0.8;  // 8 Angstrom

// ---------------------------------------------------------------------------
// Flow-matching losses (sums over generated residues)

struct FlowLosses {
  ad::Tensor trans;
  ad::Tensor rot;
};

inline FlowLosses flow_matching_losses(const Network& net, const Prediction& pred,
                                       const FlowState& state,
                                       const TrainingTargets& target) {
  const int n = state.n_res();
  if (static_cast<int>(target.frames.size()) != n)
    throw ShapeError("flow losses: target length mismatch");
  const VectorFields vf = net.compute_vector_fields(pred, state);
  const double denom = std::max(1.0 - state.t, net.config().divisor_clamp);

  std::vector<double> trans_target(static_cast<std::size_t>(n) * 3);
  std::vector<double> rot_target(static_cast<std::size_t>(n) * 3);
  std::vector<double> mask(n);
  for (int i = 0; i < n; ++i) {
    mask[i] = state.res_mask[i] * state.flow_mask[i];
    const Vec3 dx = target.frames[i].x - state.x0[i];
    const Vec3 dr =
        so3_log(Rotation{state.frames[i].r.m.transposed() * target.frames[i].r.m}) /
        denom;
    for (int d = 0; d < 3; ++d) {
      trans_target[i * 3 + d] = dx[d];
      rot_target[i * 3 + d] = dr[d];
    }
  }
  const ad::Tensor mask_col = ad::Tensor::constant({n, 1}, mask);
  FlowLosses out;
  out.trans = ad::sum_all(ad::mul(
      ad::square(ad::sub(vf.trans, ad::Tensor::constant({n, 3}, trans_target))),
      mask_col));
  out.rot = ad::sum_all(ad::mul(
      ad::square(ad::sub(vf.rot, ad::Tensor::constant({n, 3}, rot_target))),
      mask_col));
  return out;
}

// ---------------------------------------------------------------------------
// Discrete cross-entropies (masked means; softmax over real states only)

struct DiscreteLosses {
  ad::Tensor aa;
  ad::Tensor ec;
  ad::Tensor coevo;
};

inline DiscreteLosses discrete_losses(const Prediction& pred,
                                      const FlowState& state,
                                      const TrainingTargets& target) {
  const int n = state.n_res();
  std::vector<int> aa_targets(n);
  std::vector<double> mask(n);
  double count = 0.0;
  for (int i = 0; i < n; ++i) {
    const int aa1 = target.frames[i].aa;
    if (aa1 < 0 || aa1 >= kNumAminoAcids)
      throw InvalidStateError("discrete losses: amino-acid target is mask/invalid");
    aa_targets[i] = aa1;
    mask[i] = state.res_mask[i] * state.flow_mask[i];
    count += mask[i];
  }
  DiscreteLosses out;
  {
    ad::Tensor logp = ad::log_softmax_last(pred.aa_logits);
    ad::Tensor nll = ad::neg(ad::take_per_row(logp, aa_targets));
    out.aa = ad::scale(ad::sum_all(ad::mul(nll, ad::Tensor::constant({n, 1}, mask))),
                       1.0 / std::max(count, 1.0));
  }
  {
    if (target.ec < 0 || target.ec >= 7)
      throw InvalidStateError("discrete losses: EC target is mask/invalid");
    ad::Tensor logp = ad::log_softmax_last(ad::reshape(pred.ec_logits, {1, 7}));
    out.ec = ad::neg(ad::reshape(ad::take_per_row(logp, {target.ec}), {1}));
  }
  {
    const CoEvoMatrix& u = target.coevo;
    const int cells = u.n_msa * u.n_token;
    if (pred.coevo_logits.dim(0) != u.n_msa ||
        pred.coevo_logits.dim(1) != u.n_token)
      throw ShapeError("discrete losses: co-evolution grid mismatch");
    std::vector<int> targets(cells);
    double ccount = 0.0;
    for (int c = 0; c < cells; ++c) {
      if (u.cell_mask[c] > 0 && (u.tokens[c] < 0 || u.tokens[c] >= kCoevoVocabSize))
        throw InvalidStateError("discrete losses: co-evolution target is mask/invalid");
      targets[c] = u.cell_mask[c] > 0 ? u.tokens[c] : 0;
      ccount += u.cell_mask[c];
    }
    ad::Tensor logp = ad::log_softmax_last(
        ad::reshape(pred.coevo_logits, {cells, kCoevoVocabSize}));
    ad::Tensor nll = ad::neg(ad::take_per_row(logp, targets));
    out.coevo = ad::scale(
        ad::sum_all(ad::mul(nll, ad::Tensor::constant({cells, 1}, u.cell_mask))),
        1.0 / std::max(ccount, 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ligand-geometry losses. The smoothed surface S(a) = -rho log sum_j
// exp(-|a-a_j|^2/rho) is evaluated in Angstrom, where gamma=6 and rho=2 live.

inline double surface_value(const Vec3& point, const std::vector<Vec3>& ligand,
                            double rho = kSurfaceRho) {
  if (ligand.empty()) throw ShapeError("surface_value: no ligand atoms");
  // Stable log-sum-exp: factor out the smallest squared distance.
  double m = 1e300;
  for (const Vec3& a : ligand) m = std::min(m, (point - a).norm2());
  double acc = 0.0;
  for (const Vec3& a : ligand) acc += std::exp(-((point - a).norm2() - m) / rho);
  return m - rho * std::log(acc);
}

// Squared distances between predicted backbone atoms and ligand atoms,
// both given in model units, returned in Angstrom^2: [n_res, 4, n_lig].
inline ad::Tensor pocket_ligand_sq_dists_angstrom(const ad::Tensor& atoms,
                                                  const Molecule3D& ligand) {
  const int n = atoms.dim(0);
  const int l = ligand.size();
  std::vector<double> lig(static_cast<std::size_t>(l) * 3);
  for (int a = 0; a < l; ++a)
    for (int d = 0; d < 3; ++d) lig[a * 3 + d] = ligand.coords[a][d] / kCoordScale;
  ad::Tensor atoms_ang = ad::scale(atoms, 1.0 / kCoordScale);
  ad::Tensor pa = ad::reshape(atoms_ang, {n, 4, 1, 3});
  ad::Tensor la = ad::reshape(ad::Tensor::constant({l, 3}, std::move(lig)),
                              {1, 1, l, 3});
  return ad::sum_axis(ad::square(ad::sub(pa, la)), 3, false);  // [n,4,l]
}

// Hinge penalty sum_i sum_atoms max(0, gamma - S(atom)) over unmasked
// residues; ligand surface evaluated in Angstrom.
inline ad::Tensor interaction_loss(const ad::Tensor& atoms_hat,
                                   const Molecule3D& ligand,
                                   const std::vector<double>& residue_mask,
                                   double rho = kSurfaceRho,
                                   double gamma = kSurfaceGamma) {
  const int n = atoms_hat.dim(0);
  const int l = ligand.size();
  ad::Tensor d2 = pocket_ligand_sq_dists_angstrom(atoms_hat, ligand);  // [n,4,l]
  // Mask ligand atoms out of the logsumexp with a large negative shift.
  std::vector<double> lig_bias(l);
  for (int a = 0; a < l; ++a) lig_bias[a] = ligand.atom_mask[a] > 0 ? 0.0 : -1e30;
  ad::Tensor shifted = ad::add(ad::scale(d2, -1.0 / rho),
                               ad::Tensor::constant({1, 1, l}, std::move(lig_bias)));
  ad::Tensor surface = ad::scale(ad::logsumexp_last(shifted), -rho);  // [n,4,1]
  ad::Tensor hinge = ad::relu(ad::add_scalar(ad::neg(surface), gamma));
  return ad::sum_all(ad::mul(ad::reshape(hinge, {n, 4}),
                             ad::Tensor::constant({n, 1}, residue_mask)));
}

// Gated squared error over atom-ligand distances whose true value is below
// the threshold, normalized by the gate count; an empty gate gives 0.
inline ad::Tensor distance_loss(const ad::Tensor& d_true, const ad::Tensor& d_pred,
                                double threshold = kDistGateModelUnits) {
  if (d_true.shape() != d_pred.shape())
    throw ShapeError("distance_loss: shape mismatch");
  std::vector<double> gate(d_true.size());
  double count = 0.0;
  for (std::size_t i = 0; i < gate.size(); ++i) {
    gate[i] = d_true.values()[i] < threshold ? 1.0 : 0.0;
    count += gate[i];
  }
  if (count == 0.0) return ad::Tensor::scalar(0.0);
  ad::Tensor gated = ad::mul(ad::square(ad::sub(d_true, d_pred)),
                             ad::Tensor::constant(d_true.shape(), std::move(gate)));
  return ad::scale(ad::sum_all(gated), 1.0 / count);
}

// Distances (model units) between predicted atoms and ligand atoms: [n,4,l].
inline ad::Tensor pocket_ligand_distances(const ad::Tensor& atoms,
                                          const Molecule3D& ligand) {
  const int n = atoms.dim(0);
  const int l = ligand.size();
  std::vector<double> lig(static_cast<std::size_t>(l) * 3);
  for (int a = 0; a < l; ++a)
    for (int d = 0; d < 3; ++d) lig[a * 3 + d] = ligand.coords[a][d];
  ad::Tensor pa = ad::reshape(atoms, {n, 4, 1, 3});
  ad::Tensor la = ad::reshape(ad::Tensor::constant({l, 3}, std::move(lig)),
                              {1, 1, l, 3});
  ad::Tensor d2 = ad::sum_axis(ad::square(ad::sub(pa, la)), 3, false);
  return ad::sqrt(ad::add_scalar(d2, 1e-12));
}

// True atom-ligand distances from clean frames, as a constant [n,4,l].
inline ad::Tensor true_pocket_ligand_distances(const std::vector<ResidueFrame>& frames,
                                               const Molecule3D& ligand) {
  const int n = static_cast<int>(frames.size());
  const int l = ligand.size();
  std::vector<double> out(static_cast<std::size_t>(n) * 4 * l);
  for (int i = 0; i < n; ++i) {
    const auto atoms = backbone_atoms_from_frame(frames[i]);
    for (int k = 0; k < 4; ++k)
      for (int a = 0; a < l; ++a)
        out[(static_cast<std::size_t>(i) * 4 + k) * l + a] =
            (atoms[k] - ligand.coords[a]).norm();
  }
  return ad::Tensor::constant({n, 4, l}, std::move(out));
}

// ---------------------------------------------------------------------------
// Stage-aware total loss

struct TotalLoss {
  ad::Tensor total;
  LossBreakdown breakdown;
};

inline TotalLoss total_loss(const Network& net, const Prediction& pred,
                            const FlowState& state, const TrainingTargets& target,
                            const Molecule3D& substrate, Stage stage,
                            const LossWeights& weights) {
  TotalLoss out;
  out.breakdown.weights = weights;
  ad::Tensor acc = ad::Tensor::scalar(0.0);

  const FlowLosses fl = flow_matching_losses(net, pred, state, target);
  const DiscreteLosses dl = discrete_losses(pred, state, target);

  auto use = [&acc](const ad::Tensor& term, double w, std::optional<double>& slot) {
    slot = term.item();
    acc = ad::add(acc, ad::scale(term, w));
  };

  use(fl.trans, weights.trans, out.breakdown.trans);
  use(fl.rot, weights.rot, out.breakdown.rot);
  use(dl.aa, weights.aa, out.breakdown.aa);

  const bool geometry = stage == Stage::kLigand ||
                        (stage == Stage::kEnzyme && weights.enzyme_keep_geometry);
  if (geometry) {
    ad::Tensor inter = interaction_loss(pred.atoms, substrate, state.res_mask);
    use(inter, weights.inter, out.breakdown.inter);
    ad::Tensor dist =
        distance_loss(true_pocket_ligand_distances(target.frames, substrate),
                      pocket_ligand_distances(pred.atoms, substrate));
    use(dist, weights.dist, out.breakdown.dist);
  }
  if (stage == Stage::kLigand) {
    if (!target.affinity.has_value())
      throw ConfigError("ligand stage requires an affinity label");
    ad::Tensor kd = ad::square(
        ad::sub(pred.affinity, ad::Tensor::scalar(*target.affinity)));
    use(kd, weights.kd, out.breakdown.kd);
  }
  if (stage == Stage::kEnzyme) {
    use(dl.ec, weights.ec, out.breakdown.ec);
    use(dl.coevo, weights.coevo, out.breakdown.coevo);
  }

  out.total = acc;
  out.breakdown.total = acc.item();
  return out;
}

}  // namespace zymflow
