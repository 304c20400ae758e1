#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "zymflow/coevo.hpp"
#include "zymflow/errors.hpp"
#include "zymflow/hash.hpp"
#include "zymflow/mol.hpp"
#include "zymflow/nn.hpp"
#include "zymflow/so3.hpp"
#include "zymflow/state.hpp"
#include "zymflow/tensor.hpp"

namespace zymflow {

// ---------------------------------------------------------------------------
// Feature primitives

// Sinusoidal embedding of t * max_positions with log-spaced frequencies,
// sin block then cos block; odd dims get one trailing zero.
inline std::vector<double> timestep_embedding(double t, int dim,
                                              int max_positions = 10000) {
  const int half = dim / 2;
  std::vector<double> out(dim, 0.0);
  const double scaled = t * max_positions;
  for (int k = 0; k < half; ++k) {
    const double freq =
        half > 1 ? std::exp(-k * std::log(static_cast<double>(max_positions)) /
                            (half - 1))
                 : 1.0;
    out[k] = std::sin(scaled * freq);
    out[half + k] = std::cos(scaled * freq);
  }
  return out;
}

// Positional embedding of arbitrary (possibly negative) indices, sin block
// then cos block: sin(i * pi / max_len^(2k/dim)).
inline std::vector<double> index_embedding(const std::vector<double>& indices,
                                           int dim, int max_len = 2056) {
  const int half = dim / 2;
  const int n = static_cast<int>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(n) * dim, 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < half; ++k) {
      const double denom =
          std::pow(static_cast<double>(max_len), 2.0 * k / dim);
      const double arg = indices[i] * M_PI / denom;
      out[i * dim + k] = std::sin(arg);
      out[i * dim + half + k] = std::cos(arg);
    }
  return out;
}

// One-hot distance bins: lowers linearly spaced on [min_bin, max_bin], the
// final upper edge effectively infinite; feature fires iff lower < d < upper.
inline std::vector<double> distogram(const std::vector<Vec3>& positions,
                                     double min_bin, double max_bin,
                                     int num_bins) {
  if (num_bins < 2) throw ConfigError("distogram: need at least 2 bins");
  const int n = static_cast<int>(positions.size());
  std::vector<double> lower(num_bins);
  for (int b = 0; b < num_bins; ++b)
    lower[b] = min_bin + (max_bin - min_bin) * b / (num_bins - 1);
  std::vector<double> out(static_cast<std::size_t>(n) * n * num_bins, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double d = (positions[i] - positions[j]).norm();
      for (int b = 0; b < num_bins; ++b) {
        const double upper = b + 1 < num_bins ? lower[b + 1] : 1e8;
        if (d > lower[b] && d < upper) {
          out[(static_cast<std::size_t>(i) * n + j) * num_bins + b] = 1.0;
          break;
        }
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable rotation kernels on [N,3,3] tensors

// Rodrigues map of per-row axis-angle vectors.
inline ad::Tensor so3_exp_tensor(const ad::Tensor& v) {
  const int n = v.dim(0);
  ad::Tensor s = ad::sum_axis(ad::square(v), 1, true);  // [n,1]
  ad::Tensor a = ad::reshape(ad::sinc_theta2(s), {n, 1, 1});
  ad::Tensor b = ad::reshape(ad::versine_theta2(s), {n, 1, 1});
  ad::Tensor x = ad::gather_cols(v, {0});
  ad::Tensor y = ad::gather_cols(v, {1});
  ad::Tensor z = ad::gather_cols(v, {2});
  ad::Tensor zero = ad::Tensor::zeros({n, 1});
  ad::Tensor k9 = ad::concat(
      {zero, ad::neg(z), y, z, zero, ad::neg(x), ad::neg(y), x, zero}, 1);
  ad::Tensor k = ad::reshape(k9, {n, 3, 3});
  ad::Tensor k2 = ad::matmul(k, k);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  ad::Tensor id = ad::Tensor::constant({1, 3, 3}, std::move(eye));
  return ad::add(id, ad::add(ad::mul(a, k), ad::mul(b, k2)));
}

// Axis-angle of per-row rotation matrices; valid away from the angle-pi cut.
inline ad::Tensor so3_log_tensor(const ad::Tensor& r) {
  const int n = r.dim(0);
  ad::Tensor r9 = ad::reshape(r, {n, 9});
  ad::Tensor trace = ad::add(ad::add(ad::gather_cols(r9, {0}), ad::gather_cols(r9, {4})),
                             ad::gather_cols(r9, {8}));
  ad::Tensor c = ad::scale(ad::add_scalar(trace, -1.0), 0.5);   // cos(theta)
  ad::Tensor vee = ad::sub(ad::gather_cols(r9, {7, 2, 3}),
                           ad::gather_cols(r9, {5, 6, 1}));     // (R - R^T)^vee
  return ad::mul(ad::rot_log_coeff(c), vee);
}

// ---------------------------------------------------------------------------
// Configuration

struct NetworkConfig {
  int c_s = 64;                // node width
  int c_z = 32;                // edge width
  int feat_dim = 16;           // edge pair/relpos projection width
  int c_pos_emb = 24;
  int c_timestep_emb = 16;
  int num_bins = 22;           // distogram bins
  double dist_min_bin = 1e-3;  // Angstrom
  double dist_max_bin = 20.0;  // Angstrom
  int index_max_len = 2056;
  int timestep_max_positions = 2056;

  int ipa_blocks = 3;
  int ipa_heads = 4;
  int ipa_c_hidden = 16;
  int ipa_q_points = 4;
  int ipa_v_points = 4;

  int n_aa = 20;
  int n_ec = 7;
  int n_coevo = 64;
  int ec_embed = 16;

  Mol3DConfig mol3;
  Mol2DConfig mol2;
  CoEvoFormerConfig coevo;

  double divisor_clamp = 0.05;  // floor on (1 - t) in vector fields

  std::string canonical_text() const {
    std::ostringstream s;
    s << "c_s=" << c_s << "\nc_z=" << c_z << "\nfeat_dim=" << feat_dim
      << "\nc_pos_emb=" << c_pos_emb << "\nc_timestep_emb=" << c_timestep_emb
      << "\nnum_bins=" << num_bins << "\ndist_min_bin=" << dist_min_bin
      << "\ndist_max_bin=" << dist_max_bin << "\nindex_max_len=" << index_max_len
      << "\ntimestep_max_positions=" << timestep_max_positions
      << "\nipa_blocks=" << ipa_blocks << "\nipa_heads=" << ipa_heads
      << "\nipa_c_hidden=" << ipa_c_hidden << "\nipa_q_points=" << ipa_q_points
      << "\nipa_v_points=" << ipa_v_points << "\nn_aa=" << n_aa
      << "\nn_ec=" << n_ec << "\nn_coevo=" << n_coevo << "\nec_embed=" << ec_embed
      << "\nmol3.node=" << mol3.node << "\nmol3.edge=" << mol3.edge
      << "\nmol3.rbf=" << mol3.rbf.d_min << "," << mol3.rbf.d_max << ","
      << mol3.rbf.num_rbf << "\nmol2.node=" << mol2.node
      << "\nmol2.edge=" << mol2.edge << "\nmol2.rounds=" << mol2.rounds
      << "\ncoevo.depth=" << coevo.depth << "\ncoevo.heads=" << coevo.heads
      << "\ncoevo.ff=" << coevo.ff << "\ncoevo.layers=" << coevo.encoder_layers
      << "\ndivisor_clamp=" << divisor_clamp << "\n";
    return s.str();
  }
  std::uint64_t hash() const { return fnv1a(canonical_text()); }
};

// Network output at time t: predicted clean frames, logits for every discrete
// factor, affinity, and the backbone atoms implied by the predicted frames.
struct Prediction {
  ad::Tensor rot;           // [N,3,3]
  ad::Tensor trans;         // [N,3]
  ad::Tensor aa_logits;     // [N,20]
  ad::Tensor ec_logits;     // [7]
  ad::Tensor coevo_logits;  // [n_msa, n_token, 64]
  ad::Tensor affinity;      // [1]
  ad::Tensor atoms;         // [N,4,3]

  Rotation rot_value(int i) const {
    Mat3 m;
    for (int k = 0; k < 9; ++k) m.m[k] = rot.values()[i * 9 + k];
    return Rotation{m};
  }
  Vec3 trans_value(int i) const {
    return {trans.values()[i * 3 + 0], trans.values()[i * 3 + 1],
            trans.values()[i * 3 + 2]};
  }
  // Softmax over real states of one residue's amino-acid logits.
  std::vector<double> aa_distribution(int i) const {
    const int k = aa_logits.dim(1);
    std::vector<double> p(k);
    double mx = -1e300;
    for (int s = 0; s < k; ++s) mx = std::max(mx, aa_logits.values()[i * k + s]);
    double z = 0.0;
    for (int s = 0; s < k; ++s) {
      p[s] = std::exp(aa_logits.values()[i * k + s] - mx);
      z += p[s];
    }
    for (auto& v : p) v /= z;
    return p;
  }
  std::vector<double> ec_distribution() const {
    std::vector<double> p(ec_logits.values());
    double mx = -1e300;
    for (double v : p) mx = std::max(mx, v);
    double z = 0.0;
    for (auto& v : p) { v = std::exp(v - mx); z += v; }
    for (auto& v : p) v /= z;
    return p;
  }
  std::vector<double> coevo_distribution(int m, int n) const {
    const int k = coevo_logits.dim(2);
    const int base = (m * coevo_logits.dim(1) + n) * k;
    std::vector<double> p(k);
    double mx = -1e300;
    for (int s = 0; s < k; ++s) mx = std::max(mx, coevo_logits.values()[base + s]);
    double z = 0.0;
    for (int s = 0; s < k; ++s) {
      p[s] = std::exp(coevo_logits.values()[base + s] - mx);
      z += p[s];
    }
    for (auto& v : p) v /= z;
    return p;
  }
};

// Per-residue tangent vectors transporting the state toward the prediction.
struct VectorFields {
  ad::Tensor trans;  // [N,3]
  ad::Tensor rot;    // [N,3], coefficients in the tangent at r_t
};

// ---------------------------------------------------------------------------
// The conditional vector-field network

class Network {
 public:
  Network(const NetworkConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), ps_(seed) {
    const int c_s = cfg.c_s, c_z = cfg.c_z;

    // Node feature embedder.
    node_in_dim_ = cfg.c_pos_emb + 1 + 3 * cfg.c_timestep_emb + c_s + cfg.n_aa;
    aatype_lut_ = ps_.create("node.aatype_lut", {cfg.n_aa + 1, c_s},
                             nn::Init::kXavierUniform);
    node_mlp_ = nn::Mlp3(ps_, "node.mlp", node_in_dim_, c_s, c_s);

    // Amino-acid fusion.
    aa_fuse_lut_ = ps_.create("aafuse.lut", {cfg.n_aa + 1, c_s},
                              nn::Init::kXavierUniform);
    aa_fuse_lin_ = nn::Linear(ps_, "aafuse.lin", c_s, c_s);
    aa_fuse_ln_ = nn::LayerNorm(ps_, "aafuse.ln", c_s);
    node_fusion_ = nn::Mlp3(ps_, "aafuse.fusion", 2 * c_s, c_s, c_s);

    // Edge feature embedder.
    edge_pair_lin_ = nn::Linear(ps_, "edge.pair_lin", c_s, cfg.feat_dim);
    edge_relpos_lin_ = nn::Linear(ps_, "edge.relpos_lin", cfg.feat_dim, cfg.feat_dim);
    edge_in_dim_ = 3 * cfg.feat_dim + 2 * cfg.num_bins + 2;
    edge_mlp_ = nn::Mlp3(ps_, "edge.mlp", edge_in_dim_, c_z, c_z);

    // Conditioning encoders and fusions.
    mol3_ = Mol3DEncoder(ps_, "mol3", cfg.mol3);
    bb_lig_fusion_ = nn::CrossAttention(ps_, "fuse.substrate", c_s, cfg.mol3.node, c_s);
    mol2_ = Mol2DEncoder(ps_, "mol2", cfg.mol2);
    bb_product_fusion_ = nn::CrossAttention(ps_, "fuse.product", c_s, cfg.mol2.node, c_s);

    // Joint pocket/ligand distance features folded into the edges.
    dist_rbf_mlp_ = nn::Mlp3(ps_, "edge.dist_rbf", cfg.mol3.rbf.num_rbf, c_z, c_z);
    dist_cross_lin_ = nn::Linear(ps_, "edge.dist_cross", 2 * c_z, c_z);

    // IPA trunk.
    for (int b = 0; b < cfg.ipa_blocks; ++b)
      blocks_.push_back(IpaBlock(ps_, "trunk.block" + std::to_string(b), cfg));

    // Heads.
    aa_head_ = nn::Mlp3(ps_, "head.aa", c_s, c_s, cfg.n_aa, /*layer_norm=*/false);
    coevo_former_ = CoEvoFormer(ps_, "coevo", cfg.coevo);
    coevo_fusion_ = nn::CrossAttention(ps_, "fuse.coevo", cfg.coevo.depth, c_s, c_s);
    coevo_cell_lin_ = nn::Linear(ps_, "head.coevo_cell", cfg.coevo.depth, c_s);
    coevo_head_ = nn::Mlp3(ps_, "head.coevo", c_s, c_s, cfg.n_coevo, false);
    ec_lut_ = ps_.create("ec.lut", {cfg.n_ec + 1, cfg.ec_embed}, nn::Init::kXavierUniform);
    ec_lin_ = nn::Linear(ps_, "ec.lin", cfg.ec_embed, cfg.ec_embed);
    ec_ln_ = nn::LayerNorm(ps_, "ec.ln", cfg.ec_embed);
    ec_fusion_ = nn::CrossAttention(ps_, "fuse.ec", cfg.ec_embed, c_s, c_s);
    ec_head_ = nn::Mlp3(ps_, "head.ec", c_s, c_s, cfg.n_ec, false);
    kd_head_ = nn::Mlp3(ps_, "head.kd", c_s + cfg.mol3.node, c_s, 1, false);
  }

  const NetworkConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  Prediction forward(const FlowState& state, const Molecule3D& substrate,
                     const Molecule2D& product,
                     const SelfConditioning* sc = nullptr) const {
    const int n = state.n_res();
    if (n < 1) throw ShapeError("forward: empty state");
    if (static_cast<int>(state.aatypes.size()) != n ||
        static_cast<int>(state.res_mask.size()) != n ||
        static_cast<int>(state.flow_mask.size()) != n)
      throw ShapeError("forward: inconsistent state field lengths");
    if (sc && (static_cast<int>(sc->ca.size()) != n ||
               static_cast<int>(sc->aa_probs.size()) != n))
      throw ShapeError("forward: self-conditioning length mismatch");
    const int c_s = cfg_.c_s, c_z = cfg_.c_z;

    const ad::Tensor res_mask_col = ad::Tensor::constant({n, 1}, state.res_mask);
    std::vector<double> edge_mask(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        edge_mask[i * n + j] = state.res_mask[i] * state.res_mask[j];
    const ad::Tensor edge_mask_t = ad::Tensor::constant({n, n, 1}, edge_mask);

    // (a) Node features: index embedding, flow mask, time embeddings,
    // current amino-acid embedding, self-conditioned amino-acid channel.
    ad::Tensor node = node_features(state, sc, n);
    check_finite(node, "node_features");
    node = ad::mul(node, res_mask_col);

    // Amino-acid fusion.
    ad::Tensor aa_embed = aa_fuse_ln_(aa_fuse_lin_(
        ad::silu(ad::embedding(aa_fuse_lut_, state.aatypes))));
    aa_embed = ad::mul(aa_embed, res_mask_col);
    node = ad::mul(node_fusion_(ad::concat({aa_embed, node}, 1)), res_mask_col);

    // (b) Edge features.
    ad::Tensor edges = edge_features(state, sc, node, n);
    check_finite(edges, "edge_features");
    edges = ad::mul(edges, edge_mask_t);

    // (c) Substrate fusion via cross attention.
    ad::Tensor lig = mol3_.encode(substrate);
    node = ad::add(node, bb_lig_fusion_(node, lig, &state.res_mask,
                                        &substrate.atom_mask));
    check_finite(node, "substrate_fusion");

    // (d) Product fusion; the 2D encoder pools to a single vector.
    ad::Tensor prod = ad::reshape(mol2_.encode(product), {1, cfg_.mol2.node});
    const std::vector<double> one{1.0};
    node = ad::add(node, bb_product_fusion_(node, prod, &state.res_mask, &one));
    check_finite(node, "product_fusion");

    // (e) Joint pocket/substrate distance RBF features added to the edges.
    edges = ad::add(edges, dist_edge_features(state, substrate, n));
    edges = ad::mul(edges, edge_mask_t);
    check_finite(edges, "distance_fusion");

    // (f) IPA trunk with per-block frame updates. Masked residues keep their
    // input frames untouched.
    ad::Tensor rot = rotations_tensor(state);
    ad::Tensor trans = translations_tensor(state);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      node = blocks_[b].run(node, edges, rot, trans, state.res_mask, res_mask_col);
      check_finite(node, "ipa_block_" + std::to_string(b));
    }
    node = ad::mul(node, res_mask_col);

    // (g) Heads.
    Prediction pred;
    pred.rot = rot;
    pred.trans = trans;
    pred.aa_logits = ad::mul(aa_head_(node), res_mask_col);
    pred.atoms = atoms_from_frames(rot, trans, n);

    {  // EC head: embed the current EC state, cross-attend over the pocket.
      ad::Tensor ec_embed = ec_ln_(ec_lin_(
          ad::silu(ad::embedding(ec_lut_, std::vector<int>{state.ec}))));
      ad::Tensor ec_rep = ec_fusion_(ec_embed, node, &one, &state.res_mask);
      pred.ec_logits = ad::reshape(ec_head_(ec_rep), {cfg_.n_ec});
    }

    {  // Co-evolution head: encode, pool over depth, cross-attend with the
      // pocket, then score each cell.
      const CoEvoMatrix& u = state.coevo;
      ad::Tensor cells = coevo_former_.encode(u);  // [m, tok, depth]
      std::vector<double> col_counts(u.n_token, 0.0);
      std::vector<double> col_mask(u.n_token, 0.0);
      for (int tok = 0; tok < u.n_token; ++tok) {
        for (int m = 0; m < u.n_msa; ++m) col_counts[tok] += u.mask_at(m, tok);
        col_mask[tok] = col_counts[tok] > 0 ? 1.0 : 0.0;
        col_counts[tok] = 1.0 / (col_counts[tok] + 1e-10);
      }
      ad::Tensor pooled = ad::mul(ad::sum_axis(cells, 0, false),
                                  ad::Tensor::constant({u.n_token, 1}, col_counts));
      ad::Tensor ctx = coevo_fusion_(pooled, node, &col_mask, &state.res_mask);
      ad::Tensor cell_feats = coevo_cell_lin_(ad::reshape(cells, {-1, cfg_.coevo.depth}));
      ad::Tensor combined =
          ad::add(ad::reshape(cell_feats, {u.n_msa, u.n_token, c_s}),
                  ad::reshape(ctx, {1, u.n_token, c_s}));
      ad::Tensor logits = coevo_head_(combined);
      pred.coevo_logits = ad::mul(
          logits, ad::Tensor::constant({u.n_msa, u.n_token, 1}, u.cell_mask));
    }

    {  // Affinity head: pooled pocket and ligand features.
      double res_count = 0.0, lig_count = 0.0;
      for (double m : state.res_mask) res_count += m;
      for (double m : substrate.atom_mask) lig_count += m;
      ad::Tensor bb_pool =
          ad::scale(ad::sum_axis(ad::mul(node, res_mask_col), 0, false),
                    1.0 / std::max(res_count, 1.0));
      ad::Tensor lig_pool = ad::scale(ad::sum_axis(lig, 0, false),
                                      1.0 / std::max(lig_count, 1.0));
      ad::Tensor both = ad::concat({bb_pool, lig_pool}, 0);
      pred.affinity = ad::reshape(kd_head_(ad::reshape(both, {1, c_s + cfg_.mol3.node})), {1});
    }
    check_finite(pred.aa_logits, "heads");
    check_finite(pred.coevo_logits, "heads");
    return pred;
  }

  // Translation field (x1_hat - x_t)/(1-t) and rotation field
  // log_{r_t}(r1_hat)/(1-t), with the divisor floored at the configured clamp.
  VectorFields compute_vector_fields(const Prediction& pred,
                                     const FlowState& state) const {
    if (state.t >= 1.0)
      throw DomainError("compute_vector_fields: t must be < 1");
    const int n = state.n_res();
    const double denom = std::max(1.0 - state.t, cfg_.divisor_clamp);
    VectorFields vf;
    vf.trans = ad::scale(ad::sub(pred.trans, translations_tensor(state)), 1.0 / denom);
    ad::Tensor rel = ad::matmul(rot_transpose_tensor(state), pred.rot);
    vf.rot = ad::scale(so3_log_tensor(rel), 1.0 / denom);
    return vf;
  }

  std::uint64_t config_hash() const { return cfg_.hash(); }

 private:
  struct IpaBlock {
    nn::Linear wq, wk, wv;          // scalar projections
    nn::Linear wq_pts, wk_pts, wv_pts;
    nn::Linear edge_bias;
    ad::Tensor head_weights_raw;    // [heads], softplus -> gamma
    nn::Linear out_proj;
    nn::LayerNorm ln_attn;
    nn::Mlp3 transition;
    nn::LayerNorm ln_transition;
    nn::Linear frame_update;        // -> [rotvec(3), trans(3)]
    int heads, c_hidden, q_pts, v_pts, c_s, c_z;

    IpaBlock(nn::ParamStore& ps, const std::string& p, const NetworkConfig& cfg)
        : wq(ps, p + ".wq", cfg.c_s, cfg.ipa_heads * cfg.ipa_c_hidden, false),
          wk(ps, p + ".wk", cfg.c_s, cfg.ipa_heads * cfg.ipa_c_hidden, false),
          wv(ps, p + ".wv", cfg.c_s, cfg.ipa_heads * cfg.ipa_c_hidden, false),
          wq_pts(ps, p + ".wq_pts", cfg.c_s, cfg.ipa_heads * cfg.ipa_q_points * 3, false),
          wk_pts(ps, p + ".wk_pts", cfg.c_s, cfg.ipa_heads * cfg.ipa_q_points * 3, false),
          wv_pts(ps, p + ".wv_pts", cfg.c_s, cfg.ipa_heads * cfg.ipa_v_points * 3, false),
          edge_bias(ps, p + ".edge_bias", cfg.c_z, cfg.ipa_heads, false),
          head_weights_raw(ps.create(p + ".head_weights", {cfg.ipa_heads}, nn::Init::kZeros)),
          out_proj(ps, p + ".out",
                   cfg.ipa_heads * (cfg.ipa_c_hidden + cfg.c_z + 4 * cfg.ipa_v_points),
                   cfg.c_s),
          ln_attn(ps, p + ".ln_attn", cfg.c_s),
          transition(ps, p + ".transition", cfg.c_s, cfg.c_s, cfg.c_s, false),
          ln_transition(ps, p + ".ln_transition", cfg.c_s),
          frame_update(ps, p + ".frame_update", cfg.c_s, 6),
          heads(cfg.ipa_heads), c_hidden(cfg.ipa_c_hidden),
          q_pts(cfg.ipa_q_points), v_pts(cfg.ipa_v_points),
          c_s(cfg.c_s), c_z(cfg.c_z) {}

    // Local points -> global frame: out[i, :, p] = R_i * pts[i, :, p] + x_i.
    static ad::Tensor to_global(const ad::Tensor& pts, const ad::Tensor& rot,
                                const ad::Tensor& trans, int n, int np) {
      ad::Tensor local = ad::permute3(ad::reshape(pts, {n, np, 3}), 0, 2, 1);
      ad::Tensor global = ad::matmul(rot, local);  // [n, 3, np]
      return ad::add(global, ad::reshape(trans, {n, 3, 1}));
    }

    ad::Tensor run(const ad::Tensor& node, const ad::Tensor& edges,
                   ad::Tensor& rot, ad::Tensor& trans,
                   const std::vector<double>& res_mask,
                   const ad::Tensor& res_mask_col) const {
      const int n = node.dim(0);
      const int h = heads, c = c_hidden, pq = q_pts, pv = v_pts;
      const double w_l = std::sqrt(1.0 / 3.0);
      const double w_c = std::sqrt(2.0 / (9.0 * pq));

      auto heads_first = [&](const ad::Tensor& t, int width) {
        // [n, h*width] -> [h, n, width]
        return ad::permute3(ad::reshape(t, {n, h, width}), 1, 0, 2);
      };
      ad::Tensor q = heads_first(wq(node), c);
      ad::Tensor k = heads_first(wk(node), c);
      ad::Tensor v = heads_first(wv(node), c);

      // Scalar logits.
      ad::Tensor logits = ad::scale(ad::matmul(q, ad::transpose_last(k)),
                                    w_l / std::sqrt(static_cast<double>(c)));

      // Edge bias.
      ad::Tensor bias = edge_bias(edges);                       // [n,n,h]
      logits = ad::add(logits, ad::scale(ad::permute3(bias, 2, 0, 1), w_l));

      // Point distances: || T_i o q_ip - T_j o k_jp ||^2 summed over points.
      ad::Tensor qg = to_global(wq_pts(node), rot, trans, n, h * pq);  // [n,3,h*pq]
      ad::Tensor kg = to_global(wk_pts(node), rot, trans, n, h * pq);
      // Expand to [n, n, 3, h*pq] differences via broadcasting.
      ad::Tensor qg4 = ad::reshape(qg, {n, 1, 3, h * pq});
      ad::Tensor kg4 = ad::reshape(kg, {1, n, 3, h * pq});
      ad::Tensor d2 = ad::sum_axis(ad::square(ad::sub(qg4, kg4)), 2, false);  // [n,n,h*pq]
      d2 = ad::sum_axis(ad::reshape(d2, {n * n, h, pq}), 2, false);           // [n*n,h]
      ad::Tensor gamma = ad::softplus(head_weights_raw);                      // [h]
      ad::Tensor point_term = ad::mul(ad::reshape(d2, {n, n, h}),
                                      ad::reshape(gamma, {1, 1, h}));
      logits = ad::sub(logits, ad::scale(ad::permute3(point_term, 2, 0, 1),
                                         w_l * w_c * 0.5));

      // Mask invalid residues out of the attention.
      logits = ad::add(logits, ad::reshape(nn::attention_mask_bias(res_mask, res_mask),
                                           {1, n, n}));
      ad::Tensor attn = ad::softmax_last(logits);  // [h, n, n]

      // Scalar values.
      ad::Tensor o_scalar = ad::reshape(ad::permute3(ad::matmul(attn, v), 1, 0, 2),
                                        {n, h * c});
      // Edge values: sum_j a_ij z_ij.
      ad::Tensor o_pair = ad::reshape(
          ad::matmul(ad::permute3(attn, 1, 0, 2), edges), {n, h * c_z});
      // Point values aggregated in the global frame, then mapped back into
      // the local frame of the query residue.
      ad::Tensor vg = to_global(wv_pts(node), rot, trans, n, h * pv);  // [n,3,h*pv]
      ad::Tensor vg_h = ad::reshape(ad::permute3(vg, 0, 2, 1), {n, h, pv * 3});
      ad::Tensor vg_flat = ad::permute3(vg_h, 1, 0, 2);  // [h, n, pv*3]
      ad::Tensor og = ad::matmul(attn, vg_flat);          // [h, n, pv*3]
      og = ad::permute3(og, 1, 0, 2);                     // [n, h, pv*3]
      og = ad::permute3(ad::reshape(og, {n, h * pv, 3}), 0, 2, 1);  // [n,3,h*pv]
      ad::Tensor local = ad::matmul(ad::transpose_last(rot),
                                    ad::sub(og, ad::reshape(trans, {n, 3, 1})));
      ad::Tensor o_pt = ad::reshape(ad::permute3(local, 0, 2, 1), {n, h * pv * 3});
      ad::Tensor o_norm = ad::sqrt(ad::add_scalar(
          ad::sum_axis(ad::reshape(ad::square(o_pt), {n, h * pv, 3}), 2, false), 1e-8));
      o_norm = ad::reshape(o_norm, {n, h * pv});

      ad::Tensor fused = out_proj(ad::concat({o_scalar, o_pair, o_pt, o_norm}, 1));
      ad::Tensor s = ln_attn(ad::add(node, fused));
      s = ln_transition(ad::add(s, transition(s)));

      // Frame update in the running local frame; masked rows stay put.
      ad::Tensor upd = ad::mul(frame_update(s), res_mask_col);
      ad::Tensor rotvec = ad::slice(upd, 1, 0, 3);
      ad::Tensor delta = ad::slice(upd, 1, 3, 3);
      ad::Tensor shift = ad::reshape(
          ad::matmul(rot, ad::reshape(delta, {n, 3, 1})), {n, 3});
      trans = ad::add(trans, shift);
      rot = ad::matmul(rot, so3_exp_tensor(rotvec));
      return s;
    }
  };

  ad::Tensor node_features(const FlowState& state, const SelfConditioning* sc,
                           int n) const {
    std::vector<double> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::vector<double> pos_emb =
        index_embedding(idx, cfg_.c_pos_emb, cfg_.index_max_len);
    const std::vector<double> t_emb = timestep_embedding(
        state.t, cfg_.c_timestep_emb, cfg_.timestep_max_positions);

    std::vector<double> feats;
    feats.reserve(static_cast<std::size_t>(n) * node_in_dim_);
    std::vector<double> sc_zero(cfg_.n_aa, 0.0);
    for (int i = 0; i < n; ++i) {
      const double rm = state.res_mask[i];
      for (int kk = 0; kk < cfg_.c_pos_emb; ++kk)
        feats.push_back(pos_emb[i * cfg_.c_pos_emb + kk] * rm);
      feats.push_back(state.flow_mask[i]);
      for (int rep = 0; rep < 3; ++rep)
        for (double v : t_emb) feats.push_back(v * rm);
      const std::vector<double>& sc_aa =
          sc ? sc->aa_probs[i] : sc_zero;
      for (double v : sc_aa) feats.push_back(v);
    }
    // Interleave the constant features with the learned aa embedding by
    // concatenation along the feature axis.
    const int const_dim = node_in_dim_ - cfg_.c_s;
    ad::Tensor const_feats = ad::Tensor::constant({n, const_dim}, std::move(feats));
    ad::Tensor aa_emb = ad::embedding(aatype_lut_, state.aatypes);
    return node_mlp_(ad::concat({const_feats, aa_emb}, 1));
  }

  ad::Tensor edge_features(const FlowState& state, const SelfConditioning* sc,
                           const ad::Tensor& node, int n) const {
    ad::Tensor p = edge_pair_lin_(node);  // [n, feat]
    ad::Tensor pi = ad::add(ad::reshape(p, {n, 1, cfg_.feat_dim}),
                            ad::Tensor::zeros({1, n, 1}));
    ad::Tensor pj = ad::add(ad::reshape(p, {1, n, cfg_.feat_dim}),
                            ad::Tensor::zeros({n, 1, 1}));

    std::vector<double> offsets(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) offsets[i * n + j] = i - j;
    ad::Tensor relpos = edge_relpos_lin_(ad::reshape(
        ad::Tensor::constant(
            {n * n, cfg_.feat_dim},
            index_embedding(offsets, cfg_.feat_dim, cfg_.index_max_len)),
        {n, n, cfg_.feat_dim}));

    // Distograms of the current and self-conditioned CA positions (Angstrom).
    std::vector<Vec3> ca(n), sc_ca(n, Vec3{0, 0, 0});
    for (int i = 0; i < n; ++i) ca[i] = state.frames[i].x / kCoordScale;
    if (sc)
      for (int i = 0; i < n; ++i) sc_ca[i] = sc->ca[i] / kCoordScale;
    ad::Tensor dist_now = ad::Tensor::constant(
        {n, n, cfg_.num_bins},
        distogram(ca, cfg_.dist_min_bin, cfg_.dist_max_bin, cfg_.num_bins));
    ad::Tensor dist_sc = ad::Tensor::constant(
        {n, n, cfg_.num_bins},
        distogram(sc_ca, cfg_.dist_min_bin, cfg_.dist_max_bin, cfg_.num_bins));

    std::vector<double> fm(static_cast<std::size_t>(n) * n * 2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        fm[(i * n + j) * 2] = state.flow_mask[i];
        fm[(i * n + j) * 2 + 1] = state.flow_mask[j];
      }
    ad::Tensor flow_pair = ad::Tensor::constant({n, n, 2}, std::move(fm));

    return edge_mlp_(ad::concat({pi, pj, relpos, dist_now, dist_sc, flow_pair}, 2));
  }

  // Joint (pocket + ligand) distance RBF grid embedded and folded back into
  // the pocket edges: the pocket-pocket block directly, the pocket-ligand
  // block pooled per residue and mixed in pairwise.
  ad::Tensor dist_edge_features(const FlowState& state, const Molecule3D& lig,
                                int n) const {
    const int l = lig.size();
    const int total = n + l;
    const int k_rbf = cfg_.mol3.rbf.num_rbf;
    std::vector<Vec3> pos(total);
    std::vector<double> mask(total);
    for (int i = 0; i < n; ++i) {
      pos[i] = state.frames[i].x;
      mask[i] = state.res_mask[i];
    }
    for (int a = 0; a < l; ++a) {
      pos[n + a] = lig.coords[a];
      mask[n + a] = lig.atom_mask[a];
    }
    std::vector<double> grid(static_cast<std::size_t>(total) * total * k_rbf, 0.0);
    for (int i = 0; i < total; ++i)
      for (int j = 0; j < total; ++j) {
        if (mask[i] <= 0 || mask[j] <= 0) continue;
        const auto phi = rbf_featurize((pos[i] - pos[j]).norm(), cfg_.mol3.rbf.d_min,
                                       cfg_.mol3.rbf.d_max, k_rbf);
        std::copy(phi.begin(), phi.end(),
                  grid.begin() + (static_cast<std::size_t>(i) * total + j) * k_rbf);
      }
    ad::Tensor joint = dist_rbf_mlp_(
        ad::Tensor::constant({total, total, k_rbf}, std::move(grid)));  // [t,t,c_z]

    ad::Tensor bb_block = ad::slice(ad::slice(joint, 0, 0, n), 1, 0, n);
    ad::Tensor cross = ad::slice(ad::slice(joint, 0, 0, n), 1, n, l);  // [n,l,c_z]
    double lig_count = 0.0;
    for (double m : lig.atom_mask) lig_count += m;
    ad::Tensor ctx = ad::scale(ad::sum_axis(cross, 1, false),
                               1.0 / std::max(lig_count, 1.0));  // [n,c_z]
    ad::Tensor ci = ad::add(ad::reshape(ctx, {n, 1, cfg_.c_z}),
                            ad::Tensor::zeros({1, n, 1}));
    ad::Tensor cj = ad::add(ad::reshape(ctx, {1, n, cfg_.c_z}),
                            ad::Tensor::zeros({n, 1, 1}));
    return ad::add(bb_block, dist_cross_lin_(ad::concat({ci, cj}, 2)));
  }

  static ad::Tensor atoms_from_frames(const ad::Tensor& rot, const ad::Tensor& trans,
                                      int n) {
    const auto tmpl = backbone_template_model_units();
    std::vector<double> tdata(12);
    for (int k = 0; k < 4; ++k)
      for (int d = 0; d < 3; ++d) tdata[d * 4 + k] = tmpl[k][d];
    ad::Tensor t = ad::Tensor::constant({3, 4}, std::move(tdata));
    ad::Tensor placed = ad::matmul(rot, t);  // [n,3,4]
    placed = ad::add(placed, ad::reshape(trans, {n, 3, 1}));
    return ad::permute3(placed, 0, 2, 1);  // [n,4,3]
  }

  static ad::Tensor rotations_tensor(const FlowState& state) {
    const int n = state.n_res();
    std::vector<double> data(static_cast<std::size_t>(n) * 9);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < 9; ++k) data[i * 9 + k] = state.frames[i].r.m.m[k];
    return ad::Tensor::constant({n, 3, 3}, std::move(data));
  }
  static ad::Tensor rot_transpose_tensor(const FlowState& state) {
    const int n = state.n_res();
    std::vector<double> data(static_cast<std::size_t>(n) * 9);
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          data[i * 9 + r * 3 + c] = state.frames[i].r.m(c, r);
    return ad::Tensor::constant({n, 3, 3}, std::move(data));
  }
  static ad::Tensor translations_tensor(const FlowState& state) {
    const int n = state.n_res();
    std::vector<double> data(static_cast<std::size_t>(n) * 3);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) data[i * 3 + d] = state.frames[i].x[d];
    return ad::Tensor::constant({n, 3}, std::move(data));
  }

  static void check_finite(const ad::Tensor& t, const std::string& stage) {
    for (double v : t.values())
      if (!std::isfinite(v))
        throw NumericError("forward/" + stage + ": non-finite values");
  }

  NetworkConfig cfg_;
  nn::ParamStore ps_;
  int node_in_dim_ = 0, edge_in_dim_ = 0;

  ad::Tensor aatype_lut_, aa_fuse_lut_, ec_lut_;
  nn::Mlp3 node_mlp_, node_fusion_, edge_mlp_, dist_rbf_mlp_;
  nn::Linear aa_fuse_lin_, edge_pair_lin_, edge_relpos_lin_, dist_cross_lin_;
  nn::LayerNorm aa_fuse_ln_, ec_ln_;
  nn::Linear ec_lin_;
  Mol3DEncoder mol3_;
  Mol2DEncoder mol2_;
  CoEvoFormer coevo_former_;
  nn::CrossAttention bb_lig_fusion_, bb_product_fusion_, coevo_fusion_, ec_fusion_;
  std::vector<IpaBlock> blocks_;
  nn::Mlp3 aa_head_, coevo_head_, ec_head_, kd_head_;
  nn::Linear coevo_cell_lin_;
};

}  // namespace zymflow
