#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "zymflow/discrete.hpp"
#include "zymflow/errors.hpp"
#include "zymflow/network.hpp"
#include "zymflow/objectives.hpp"
#include "zymflow/pipeline.hpp"
#include "zymflow/rng.hpp"
#include "zymflow/state.hpp"

namespace zymflow {

// ---------------------------------------------------------------------------
// Joint corruption of one clean record at time t. Draw order per residue is
// translation prior (3 normals) then rotation prior (4 normals); then one
// uniform per amino acid, one for the EC class, one per real co-evolution
// cell.

inline FlowState corrupt_sample(const EnzymeReactionRecord& datum, double t,
                                Rng& rng) {
  if (t < 0.0 || t > 1.0) throw DomainError("corrupt_sample: t outside [0,1]");
  const int n = datum.pocket.size();
  FlowState state;
  state.t = t;
  const DiscreteSpace aa_space = DiscreteSpace::amino_acids();
  const DiscreteSpace ec_space = DiscreteSpace::ec_classes();
  const DiscreteSpace tok_space = DiscreteSpace::coevo_tokens();
  for (int i = 0; i < n; ++i) {
    const ResidueFrame& clean = datum.pocket.residues[i];
    const Vec3 x0{rng.normal(), rng.normal(), rng.normal()};
    const Rotation r0 = uniform_rotation(rng);
    ResidueFrame f;
    f.x = translation_interpolate(x0, clean.x, t);
    f.r = t >= 1.0 ? clean.r : geodesic_interpolate(r0, clean.r, t);
    f.aa = kAminoMask;
    state.frames.push_back(f);
    state.x0.push_back(x0);
    state.r0.push_back(r0);
    state.res_mask.push_back(1.0);
    state.flow_mask.push_back(1.0);
  }
  for (int i = 0; i < n; ++i)
    state.aatypes.push_back(
        corrupt_discrete(datum.pocket.residues[i].aa, t, aa_space, rng));
  state.ec = corrupt_discrete(datum.ec, t, ec_space, rng);
  state.coevo = datum.coevo;
  for (std::size_t c = 0; c < state.coevo.tokens.size(); ++c)
    if (state.coevo.cell_mask[c] > 0)
      state.coevo.tokens[c] =
          corrupt_discrete(datum.coevo.tokens[c], t, tok_space, rng);
  return state;
}

inline TrainingTargets targets_from_record(const EnzymeReactionRecord& r,
                                           std::optional<double> standardized_kd) {
  TrainingTargets t;
  t.frames = r.pocket.residues;
  t.ec = r.ec;
  t.coevo = r.coevo;
  t.affinity = standardized_kd;
  return t;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  Stage stage = Stage::kEnzyme;
  int steps = 2000;
  int batch_size = 1;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  LossWeights weights;
  double t_max = 0.98;  // the 1/(1-t) target diverges at t -> 1
};

struct TrainStepLog {
  int step = 0;
  LossBreakdown loss;
};

// Mean and scale used to standardize affinity labels before the squared loss.
struct AffinityStandardization {
  double mean = 0.0;
  double scale = 1.0;
  double apply(double y) const { return (y - mean) / scale; }
};

inline AffinityStandardization affinity_standardization(
    const std::vector<EnzymeReactionRecord>& records) {
  AffinityStandardization st;
  double sum = 0.0, sum2 = 0.0, count = 0.0;
  for (const auto& r : records)
    if (r.affinity) {
      sum += *r.affinity;
      sum2 += *r.affinity * *r.affinity;
      count += 1.0;
    }
  if (count > 0) {
    st.mean = sum / count;
    const double var = std::max(sum2 / count - st.mean * st.mean, 0.0);
    st.scale = std::max(std::sqrt(var), 1e-6);
  }
  return st;
}

inline void validate_stage_dataset(Stage stage,
                                   const std::vector<EnzymeReactionRecord>& records) {
  if (records.empty()) throw ConfigError("training dataset is empty");
  if (stage == Stage::kLigand)
    for (const auto& r : records)
      if (!r.affinity)
        throw ConfigError("ligand stage requires affinity labels for every record");
  if (stage == Stage::kEnzyme)
    for (const auto& r : records) {
      if (r.coevo.n_msa <= 0 || r.coevo.n_token <= 0)
        throw ConfigError("enzyme stage requires co-evolution grids");
      if (r.product.size() < 1)
        throw ConfigError("enzyme stage requires product molecules");
    }
}

// Minimizes the stage loss with bias-corrected Adam, one deterministic
// round-robin record (or batch) per step. On a non-finite loss the parameters
// are restored to the last finite step and the run aborts.
inline std::vector<TrainStepLog> train_stage(Network& net, const TrainConfig& cfg,
                                             const std::vector<EnzymeReactionRecord>& records) {
  validate_stage_dataset(cfg.stage, records);
  const AffinityStandardization kd_std = affinity_standardization(records);
  nn::Adam opt(cfg.lr);
  Rng t_rng = Rng(cfg.seed).split(1);
  Rng corrupt_root = Rng(cfg.seed).split(2);
  std::vector<TrainStepLog> log;
  auto last_good = net.params().snapshot();

  for (int step = 0; step < cfg.steps; ++step) {
    net.params().zero_grad();
    ad::Tensor batch_total = ad::Tensor::scalar(0.0);
    LossBreakdown bd;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx =
          (static_cast<std::size_t>(step) * cfg.batch_size + b) % records.size();
      const EnzymeReactionRecord& rec = records[idx];
      const double t = t_rng.uniform(0.0, cfg.t_max);
      Rng crng = corrupt_root.split(static_cast<std::uint64_t>(step) * cfg.batch_size + b);
      const FlowState state = corrupt_sample(rec, t, crng);
      const Prediction pred = net.forward(state, rec.substrate, rec.product);
      const TrainingTargets targets = targets_from_record(
          rec, rec.affinity ? std::optional<double>(kd_std.apply(*rec.affinity))
                            : std::nullopt);
      TotalLoss tl = total_loss(net, pred, state, targets, rec.substrate,
                                cfg.stage, cfg.weights);
      batch_total = ad::add(batch_total, tl.total);
      bd = tl.breakdown;  // last item of the batch, representative at B=1
    }
    batch_total = ad::scale(batch_total, 1.0 / cfg.batch_size);
    const double total_value = batch_total.item();
    if (!std::isfinite(total_value)) {
      net.params().restore(last_good);
      throw NumericError("train_stage: non-finite loss at step " +
                         std::to_string(step) + "; restored last good parameters");
    }
    last_good = net.params().snapshot();
    batch_total.backward();
    opt.step(net.params());
    bd.total = total_value;
    log.push_back({step, bd});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Gradient checking: analytic gradients of the stage loss against central
// finite differences on a sampled subset of entries per parameter tensor.
// The reported relative error is |a - fd| / max(|a|, |fd|, 1e-3), so
// near-zero gradients are compared at an absolute floor of 1e-7.

struct GradCheckRow {
  std::string name;
  int entries_checked = 0;
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
};

struct GradCheckOptions {
  int entries_per_tensor = 6;
  double step = 1e-4;
  double t = 0.5;
  std::uint64_t seed = 99;
};

inline double gradcheck_rel_err(double analytic, double fd) {
  const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-3});
  return std::abs(analytic - fd) / denom;
}

inline std::vector<GradCheckRow> gradcheck(Network& net,
                                           const EnzymeReactionRecord& datum,
                                           Stage stage,
                                           const GradCheckOptions& opts = {}) {
  const LossWeights weights;
  Rng crng = Rng(opts.seed).split(1);
  const FlowState state = corrupt_sample(datum, opts.t, crng);
  const TrainingTargets targets = targets_from_record(
      datum, datum.affinity ? std::optional<double>(*datum.affinity) : std::nullopt);

  auto eval_loss = [&]() {
    const Prediction pred = net.forward(state, datum.substrate, datum.product);
    return total_loss(net, pred, state, targets, datum.substrate, stage, weights);
  };

  net.params().zero_grad();
  TotalLoss tl = eval_loss();
  tl.total.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : net.params().items())
    analytic.push_back(t.grad().empty() ? std::vector<double>(t.size(), 0.0)
                                        : t.grad());

  std::vector<GradCheckRow> report;
  Rng pick(opts.seed);
  for (std::size_t k = 0; k < net.params().items().size(); ++k) {
    auto& [name, tensor] = net.params().items()[k];
    GradCheckRow row;
    row.name = name;
    const std::int64_t size = tensor.size();
    const int n_check = static_cast<int>(
        std::min<std::int64_t>(size, opts.entries_per_tensor));
    auto& vals = tensor.mutable_values();
    for (int e = 0; e < n_check; ++e) {
      const std::int64_t i =
          n_check == size ? e : static_cast<std::int64_t>(pick.uniform() * size);
      const double keep = vals[i];
      double up, down;
      {
        ad::NoGradGuard guard;
        vals[i] = keep + opts.step;
        up = eval_loss().total.item();
        vals[i] = keep - opts.step;
        down = eval_loss().total.item();
        vals[i] = keep;
      }
      const double fd = (up - down) / (2.0 * opts.step);
      const double a = analytic[k][i];
      const double err = gradcheck_rel_err(a, fd);
      if (err >= row.max_rel_err) {
        row.max_rel_err = err;
        row.worst_analytic = a;
        row.worst_fd = fd;
      }
      ++row.entries_checked;
    }
    report.push_back(row);
  }
  std::stable_sort(report.begin(), report.end(),
                   [](const GradCheckRow& a, const GradCheckRow& b) {
                     return a.max_rel_err > b.max_rel_err;
                   });
  return report;
}

inline std::vector<std::string> gradcheck_failures(
    const std::vector<GradCheckRow>& report, double tol = 1e-4) {
  std::vector<std::string> failed;
  for (const auto& row : report)
    if (row.max_rel_err >= tol) failed.push_back(row.name);
  return failed;
}

// ---------------------------------------------------------------------------
// Conditional Euler sampler

struct SampleOptions {
  int steps = 50;  // T
  std::uint64_t seed = 0;
  int n_msa = 8;
  int n_token = 128;
  bool record_trajectory = false;
  // Optional injected priors, given in the substrate's (output) frame.
  std::optional<std::vector<Vec3>> init_trans;
  std::optional<std::vector<Rotation>> init_rot;
};

struct SampleResult {
  Pocket pocket;  // model units, substrate frame
  int ec = 0;     // 0..6
  CoEvoMatrix coevo;
  // Prior draws in the substrate frame, reusable for replay.
  std::vector<Vec3> prior_trans;
  std::vector<Rotation> prior_rot;
  std::vector<Pocket> trajectory;  // filled when requested
};

inline SampleResult sample(const Network& net, const Molecule3D& substrate,
                           const Molecule2D& product, int n_res,
                           const SampleOptions& opts) {
  if (opts.steps < 2) throw ConfigError("sample: need at least 2 Euler steps");
  if (n_res < 1) throw ConfigError("sample: n_res must be positive");
  ad::NoGradGuard guard;

  const Vec3 centroid = substrate.centroid();
  Molecule3D sub = substrate;
  for (auto& c : sub.coords) c -= centroid;

  Rng rng(opts.seed);
  const DiscreteSpace aa_space = DiscreteSpace::amino_acids();
  const DiscreteSpace ec_space = DiscreteSpace::ec_classes();
  const DiscreteSpace tok_space = DiscreteSpace::coevo_tokens();

  FlowState state;
  state.t = 0.0;
  SampleResult result;
  for (int i = 0; i < n_res; ++i) {
    ResidueFrame f = sample_frame_prior(rng);
    if (opts.init_trans) f.x = (*opts.init_trans)[i] - centroid;
    if (opts.init_rot) f.r = (*opts.init_rot)[i];
    result.prior_trans.push_back(f.x + centroid);
    result.prior_rot.push_back(f.r);
    state.frames.push_back(f);
    state.res_mask.push_back(1.0);
    state.flow_mask.push_back(1.0);
    state.aatypes.push_back(aa_space.mask_index());
  }
  state.ec = ec_space.mask_index();
  state.coevo.n_msa = opts.n_msa;
  state.coevo.n_token = opts.n_token;
  state.coevo.tokens.assign(static_cast<std::size_t>(opts.n_msa) * opts.n_token,
                            tok_space.mask_index());
  state.coevo.row_mask.assign(opts.n_msa, 1.0);
  state.coevo.cell_mask.assign(state.coevo.tokens.size(), 1.0);

  const double dt = 1.0 / opts.steps;
  for (int k = 0; k < opts.steps; ++k) {
    state.t = static_cast<double>(k) / opts.steps;
    Prediction pred;
    VectorFields vf;
    try {
      pred = net.forward(state, sub, product);
      vf = net.compute_vector_fields(pred, state);
    } catch (const NumericError& e) {
      throw SamplingError("sampling failed at step " + std::to_string(k) + ": " +
                          e.what());
    }

    const bool last = k + 1 == opts.steps;
    for (int i = 0; i < n_res; ++i) {
      for (int d = 0; d < 3; ++d)
        state.frames[i].x[d] += dt * vf.trans.values()[i * 3 + d];
      const Vec3 w{vf.rot.values()[i * 3], vf.rot.values()[i * 3 + 1],
                   vf.rot.values()[i * 3 + 2]};
      state.frames[i].r =
          renormalize(Rotation{state.frames[i].r.m * so3_exp(w * dt).m});
    }
    if (last) {
      // Remaining masks resolve to the argmax of the predicted logits; the
      // exact jump probability is 1 here and argmax avoids float residue.
      for (int i = 0; i < n_res; ++i)
        if (aa_space.is_mask(state.aatypes[i])) {
          const auto p = pred.aa_distribution(i);
          state.aatypes[i] = static_cast<int>(
              std::max_element(p.begin(), p.end()) - p.begin());
        }
      if (ec_space.is_mask(state.ec)) {
        const auto p = pred.ec_distribution();
        state.ec = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      }
      for (int m = 0; m < opts.n_msa; ++m)
        for (int tok = 0; tok < opts.n_token; ++tok)
          if (tok_space.is_mask(state.coevo.at(m, tok))) {
            const auto p = pred.coevo_distribution(m, tok);
            state.coevo.at(m, tok) = static_cast<int>(
                std::max_element(p.begin(), p.end()) - p.begin());
          }
    } else {
      for (int i = 0; i < n_res; ++i)
        state.aatypes[i] = euler_discrete_step(
            state.aatypes[i], pred.aa_distribution(i), state.t, dt, aa_space, rng);
      state.ec = euler_discrete_step(state.ec, pred.ec_distribution(), state.t,
                                     dt, ec_space, rng);
      for (int m = 0; m < opts.n_msa; ++m)
        for (int tok = 0; tok < opts.n_token; ++tok)
          state.coevo.at(m, tok) =
              euler_discrete_step(state.coevo.at(m, tok),
                                  pred.coevo_distribution(m, tok), state.t, dt,
                                  tok_space, rng);
    }
    if (opts.record_trajectory) {
      Pocket snap;
      for (int i = 0; i < n_res; ++i) {
        ResidueFrame f = state.frames[i];
        f.x += centroid;
        f.aa = state.aatypes[i];
        snap.residues.push_back(f);
      }
      result.trajectory.push_back(snap);
    }
  }

  for (int i = 0; i < n_res; ++i) {
    ResidueFrame f = state.frames[i];
    f.x += centroid;
    f.aa = state.aatypes[i];
    result.pocket.residues.push_back(f);
  }
  result.ec = state.ec;
  result.coevo = state.coevo;
  return result;
}

}  // namespace zymflow
