#pragma once

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "zymflow/errors.hpp"
#include "zymflow/nn.hpp"
#include "zymflow/so3.hpp"
#include "zymflow/tensor.hpp"
#include "zymflow/vec3.hpp"

namespace zymflow {

// ---------------------------------------------------------------------------
// Element vocabulary: fixed table of common organic/bio elements plus an
// "other" bucket; unknown elements fold into "other" with a warning.

inline const std::vector<std::string>& element_table() {
  static const std::vector<std::string> table = {
      "H", "C", "N", "O", "S", "P", "F", "Cl",
      "Br", "I", "B", "Se", "Na", "Mg", "Zn", "Fe"};
  return table;
}
inline constexpr int kOtherElement = 16;
inline int num_element_types() { return kOtherElement + 1; }

inline int element_index(const std::string& element, bool warn = true) {
  const auto& table = element_table();
  for (std::size_t i = 0; i < table.size(); ++i)
    if (table[i] == element) return static_cast<int>(i);
  if (warn)
    std::cerr << "warning: element '" << element
              << "' not in the fixed table, using the 'other' bucket\n";
  return kOtherElement;
}

// ---------------------------------------------------------------------------
// Molecule containers

struct Bond {
  int i = 0, j = 0;
  int order = 1;  // 1,2,3 covalent, 4 aromatic, anything else -> other
};

inline constexpr int kNumBondTypes = 5;
inline int bond_type_index(int order) {
  return (order >= 1 && order <= 4) ? order : 0;
}

struct Molecule3D {
  std::vector<int> atom_types;
  std::vector<Vec3> coords;  // model units
  std::vector<double> atom_mask;
  int size() const { return static_cast<int>(atom_types.size()); }
  Vec3 centroid() const {
    Vec3 c{0, 0, 0};
    double n = 0;
    for (int a = 0; a < size(); ++a)
      if (atom_mask[a] > 0) { c += coords[a]; n += 1; }
    return n > 0 ? c / n : c;
  }
};

struct Molecule2D {
  std::vector<int> atom_types;
  std::vector<Bond> bonds;  // symmetric: both directions present
  std::vector<double> atom_mask;
  int size() const { return static_cast<int>(atom_types.size()); }
};

// Text molecule file: atom count, `element x y z` rows in Angstrom, then an
// optional BONDS section of `i j order` rows (0-based).
struct MoleculeFile {
  std::vector<std::string> elements;
  std::vector<Vec3> coords_angstrom;
  std::vector<Bond> bonds;  // as listed, one direction
};

inline MoleculeFile parse_molecule(std::istream& in, const std::string& what) {
  MoleculeFile mol;
  int count = -1;
  if (!(in >> count) || count < 1)
    throw IoError("molecule file " + what + ": invalid atom count");
  for (int a = 0; a < count; ++a) {
    std::string el;
    double x, y, z;
    if (!(in >> el >> x >> y >> z))
      throw IoError("molecule file " + what + ": truncated atom record");
    mol.elements.push_back(el);
    mol.coords_angstrom.push_back({x, y, z});
  }
  std::string tag;
  if (in >> tag) {
    if (tag != "BONDS")
      throw IoError("molecule file " + what + ": expected BONDS, got " + tag);
    Bond b;
    while (in >> b.i >> b.j >> b.order) {
      if (b.i < 0 || b.j < 0 || b.i >= count || b.j >= count || b.i == b.j)
        throw IoError("molecule file " + what + ": bond indices out of range");
      mol.bonds.push_back(b);
    }
  }
  return mol;
}

inline MoleculeFile load_molecule_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open molecule file: " + path);
  return parse_molecule(in, path);
}

inline Molecule3D to_molecule_3d(const MoleculeFile& mf) {
  Molecule3D m;
  for (std::size_t a = 0; a < mf.elements.size(); ++a) {
    m.atom_types.push_back(element_index(mf.elements[a]));
    m.coords.push_back(mf.coords_angstrom[a] * kCoordScale);
    m.atom_mask.push_back(1.0);
  }
  return m;
}

inline Molecule2D to_molecule_2d(const MoleculeFile& mf) {
  Molecule2D m;
  for (const auto& el : mf.elements) {
    m.atom_types.push_back(element_index(el));
    m.atom_mask.push_back(1.0);
  }
  for (const Bond& b : mf.bonds) {
    m.bonds.push_back(b);
    m.bonds.push_back({b.j, b.i, b.order});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Radial basis features: phi_k(d) = exp(-((d - mu_k)/sigma)^2) with mu
// linearly spaced on [d_min, d_max] and sigma = (d_max - d_min)/K.

inline std::vector<double> rbf_featurize(double d, double d_min, double d_max,
                                         int num_rbf) {
  if (num_rbf < 2) throw ConfigError("rbf_featurize: need at least 2 centers");
  if (!(d_min < d_max)) throw ConfigError("rbf_featurize: d_min must be < d_max");
  const double sigma = (d_max - d_min) / num_rbf;
  std::vector<double> out(num_rbf);
  for (int k = 0; k < num_rbf; ++k) {
    const double mu = d_min + (d_max - d_min) * k / (num_rbf - 1);
    const double z = (d - mu) / sigma;
    out[k] = std::exp(-z * z);
  }
  return out;
}

struct RbfConfig {
  double d_min = 0.0;
  double d_max = 2.0;  // model units (20 Angstrom)
  int num_rbf = 16;
};

// ---------------------------------------------------------------------------
// 3D encoder: distance-RBF message passing; only distances enter, so the
// embeddings are invariant to rigid motion and equivariant to permutation.

struct Mol3DConfig {
  int node = 32;
  int edge = 16;
  RbfConfig rbf;
};

class Mol3DEncoder {
 public:
  Mol3DEncoder() = default;
  Mol3DEncoder(nn::ParamStore& ps, const std::string& prefix, const Mol3DConfig& cfg)
      : cfg_(cfg) {
    lut_ = ps.create(prefix + ".lut", {num_element_types(), cfg.node},
                     nn::Init::kXavierUniform);
    embed_lin_ = nn::Linear(ps, prefix + ".embed_lin", cfg.node, cfg.node);
    embed_ln_ = nn::LayerNorm(ps, prefix + ".embed_ln", cfg.node);
    edge_mlp_ = nn::Mlp3(ps, prefix + ".edge", cfg.rbf.num_rbf + 2 * cfg.node,
                         cfg.edge, cfg.edge);
    agg_mlp_ = nn::Mlp3(ps, prefix + ".agg", cfg.node + cfg.edge, cfg.node,
                        cfg.node);
  }

  const Mol3DConfig& config() const { return cfg_; }

  // Per-atom embeddings [N, node]; masked atoms give zero rows.
  ad::Tensor encode(const Molecule3D& mol) const {
    const int n = mol.size();
    if (n < 1) throw ShapeError("mol3d: empty molecule");
    const int d = cfg_.node, k_rbf = cfg_.rbf.num_rbf;

    ad::Tensor node = embed_ln_(embed_lin_(ad::silu(ad::embedding(lut_, mol.atom_types))));

    // Pairwise distance RBF grid and masks (constants).
    std::vector<double> rbf_grid(static_cast<std::size_t>(n) * n * k_rbf, 0.0);
    std::vector<double> pair_mask(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> counts(n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j || mol.atom_mask[i] <= 0 || mol.atom_mask[j] <= 0) continue;
        pair_mask[i * n + j] = 1.0;
        counts[i] += 1.0;
        const auto phi = rbf_featurize((mol.coords[i] - mol.coords[j]).norm(),
                                       cfg_.rbf.d_min, cfg_.rbf.d_max, k_rbf);
        std::copy(phi.begin(), phi.end(),
                  rbf_grid.begin() + (static_cast<std::size_t>(i) * n + j) * k_rbf);
      }

    // Edge features: endpoint embeddings tiled against each other + RBF.
    ad::Tensor hi = ad::add(ad::reshape(node, {n, 1, d}),
                            ad::Tensor::zeros({1, n, 1}));
    ad::Tensor hj = ad::add(ad::reshape(node, {1, n, d}),
                            ad::Tensor::zeros({n, 1, 1}));
    ad::Tensor edges = ad::concat(
        {hi, hj, ad::Tensor::constant({n, n, k_rbf}, std::move(rbf_grid))}, 2);
    edges = edge_mlp_(edges);  // [n, n, edge]
    edges = ad::mul(edges, ad::Tensor::constant({n, n, 1}, std::move(pair_mask)));

    // Masked mean over incoming edges, residual update, zero masked rows.
    for (auto& c : counts) c = 1.0 / (c + 1e-10);
    ad::Tensor agg = ad::mul(ad::sum_axis(edges, 1, false),
                             ad::Tensor::constant({n, 1}, std::move(counts)));
    node = ad::add(node, agg_mlp_(ad::concat({node, agg}, 1)));
    return ad::mul(node, ad::Tensor::constant({n, 1}, mol.atom_mask));
  }

 private:
  Mol3DConfig cfg_;
  ad::Tensor lut_;
  nn::Linear embed_lin_;
  nn::LayerNorm embed_ln_;
  nn::Mlp3 edge_mlp_, agg_mlp_;
};

// ---------------------------------------------------------------------------
// 2D encoder: attention-weighted neighbor aggregation with gated residual
// updates, then an attention-pooled readout to a single vector.

struct Mol2DConfig {
  int node = 32;
  int edge = 16;
  int rounds = 2;
};

class Mol2DEncoder {
 public:
  Mol2DEncoder() = default;
  Mol2DEncoder(nn::ParamStore& ps, const std::string& prefix, const Mol2DConfig& cfg)
      : cfg_(cfg) {
    node_lut_ = ps.create(prefix + ".node_lut", {num_element_types(), cfg.node},
                          nn::Init::kXavierUniform);
    node_lin_ = nn::Linear(ps, prefix + ".node_lin", cfg.node, cfg.node);
    node_ln_ = nn::LayerNorm(ps, prefix + ".node_ln", cfg.node);
    edge_lut_ = ps.create(prefix + ".edge_lut", {kNumBondTypes, cfg.edge},
                          nn::Init::kXavierUniform);
    edge_lin_ = nn::Linear(ps, prefix + ".edge_lin", cfg.edge, cfg.edge);
    edge_ln_ = nn::LayerNorm(ps, prefix + ".edge_ln", cfg.edge);
    for (int r = 0; r < cfg.rounds; ++r) {
      const std::string p = prefix + ".round" + std::to_string(r);
      rounds_.push_back(Round{
          nn::Mlp2(ps, p + ".score", 2 * cfg.node + cfg.edge, cfg.node, 1),
          nn::Linear(ps, p + ".msg", cfg.node + cfg.edge, cfg.node),
          nn::Linear(ps, p + ".gate", 2 * cfg.node, cfg.node),
          nn::Linear(ps, p + ".update", cfg.node, cfg.node)});
    }
    readout_score_ = nn::Mlp2(ps, prefix + ".readout_score", cfg.node, cfg.node, 1);
    readout_lin_ = nn::Linear(ps, prefix + ".readout", cfg.node, cfg.node);
  }

  const Mol2DConfig& config() const { return cfg_; }

  // Pooled graph embedding [node].
  ad::Tensor encode(const Molecule2D& mol) const {
    const int n = mol.size();
    if (n < 1) throw ShapeError("mol2d: empty molecule");
    const int e = static_cast<int>(mol.bonds.size());
    std::vector<int> src(e), tgt(e), etype(e);
    for (int b = 0; b < e; ++b) {
      const Bond& bond = mol.bonds[b];
      if (bond.i < 0 || bond.j < 0 || bond.i >= n || bond.j >= n)
        throw GraphError("mol2d: bond endpoint out of range");
      if (mol.atom_mask[bond.i] <= 0 || mol.atom_mask[bond.j] <= 0)
        throw GraphError("mol2d: bond references a masked atom");
      src[b] = bond.i;
      tgt[b] = bond.j;
      etype[b] = bond_type_index(bond.order);
    }

    ad::Tensor h = node_ln_(node_lin_(ad::silu(ad::embedding(node_lut_, mol.atom_types))));

    if (e > 0) {
      const ad::Tensor eemb =
          edge_ln_(edge_lin_(ad::silu(ad::embedding(edge_lut_, etype))));
      // Incidence matrix accumulating edge messages at their target atom.
      std::vector<double> inc(static_cast<std::size_t>(n) * e, 0.0);
      for (int b = 0; b < e; ++b) inc[tgt[b] * e + b] = 1.0;
      const ad::Tensor inc_t = ad::Tensor::constant({n, e}, std::move(inc));

      for (const auto& round : rounds_) {
        const ad::Tensor hs = ad::embedding(h, src);
        const ad::Tensor ht = ad::embedding(h, tgt);
        ad::Tensor logits = round.score(ad::concat({hs, ht, eemb}, 1));  // [e,1]
        double mx = logits.values()[0];
        for (double v : logits.values()) mx = std::max(mx, v);
        // Softmax over the edges incident to each target; the global shift
        // is common within every group so it cancels.
        ad::Tensor ex = ad::exp(ad::add_scalar(logits, -mx));
        ad::Tensor denom = ad::matmul(inc_t, ex);            // [n,1]
        ad::Tensor alpha = ad::div(ex, ad::embedding(denom, tgt));
        ad::Tensor msg = ad::mul(alpha, round.msg(ad::concat({hs, eemb}, 1)));
        ad::Tensor agg = ad::matmul(inc_t, msg);             // [n,node]
        ad::Tensor gate = ad::sigmoid(round.gate(ad::concat({h, agg}, 1)));
        h = ad::add(h, ad::mul(gate, ad::tanh(round.update(agg))));
      }
    }

    // Attention-pooled readout over unmasked atoms.
    std::vector<double> bias(n);
    for (int a = 0; a < n; ++a) bias[a] = mol.atom_mask[a] > 0 ? 0.0 : -1e9;
    ad::Tensor scores = ad::add(readout_score_(h), ad::Tensor::constant({n, 1}, std::move(bias)));
    ad::Tensor alpha = ad::softmax_last(ad::transpose_last(scores));  // [1,n]
    return ad::reshape(readout_lin_(ad::matmul(alpha, h)), {cfg_.node});
  }

 private:
  struct Round {
    nn::Mlp2 score;
    nn::Linear msg, gate, update;
  };

  Mol2DConfig cfg_;
  ad::Tensor node_lut_, edge_lut_;
  nn::Linear node_lin_, edge_lin_;
  nn::LayerNorm node_ln_, edge_ln_;
  std::vector<Round> rounds_;
  nn::Mlp2 readout_score_;
  nn::Linear readout_lin_;
};

}  // namespace zymflow
