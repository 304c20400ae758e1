#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "zymflow/errors.hpp"
#include "zymflow/rng.hpp"
#include "zymflow/tensor.hpp"

namespace zymflow::nn {

using ad::Shape;
using ad::Tensor;

enum class Init { kXavierUniform, kZeros, kOnes };

// Named parameter registry. Parameters are created in a fixed order with a
// store-owned RNG, so initialization is a pure function of the seed.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed), seed_(seed) {}

  Tensor create(const std::string& name, Shape shape, Init init) {
    if (index_.count(name))
      throw ConfigError("parameter registered twice: " + name);
    std::vector<double> data(ad::numel(shape));
    switch (init) {
      case Init::kXavierUniform: {
        // fan_in/fan_out of the trailing two dims; 1-d tensors use size.
        double fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : shape[0];
        double fan_out = shape.back();
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : data) v = rng_.uniform(-limit, limit);
        break;
      }
      case Init::kZeros:
        break;
      case Init::kOnes:
        for (auto& v : data) v = 1.0;
        break;
    }
    Tensor t = Tensor::param(std::move(shape), std::move(data));
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
  }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return items_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return items_[it->second].second;
  }

  std::size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

  std::int64_t total_values() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(items_.size());
    for (const auto& [name, t] : items_) out.push_back(t.values());
    return out;
  }
  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != items_.size())
      throw ConfigError("snapshot does not match parameter count");
    for (std::size_t i = 0; i < snap.size(); ++i)
      items_[i].second.mutable_values() = snap[i];
  }

  std::uint64_t seed() const { return seed_; }

 private:
  Rng rng_;
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out] or undefined
  int in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& prefix, int in_dim, int out_dim,
         bool bias = true)
      : in(in_dim), out(out_dim) {
    w = ps.create(prefix + ".w", {in_dim, out_dim}, Init::kXavierUniform);
    if (bias) b = ps.create(prefix + ".b", {out_dim}, Init::kZeros);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y;
    if (x.ndim() == 2) {
      y = ad::matmul(x, w);
    } else if (x.ndim() == 3) {
      Tensor flat = ad::reshape(x, {-1, in});
      y = ad::reshape(ad::matmul(flat, w), {x.dim(0), x.dim(1), out});
    } else if (x.ndim() == 1) {
      y = ad::reshape(ad::matmul(ad::reshape(x, {1, in}), w), {out});
    } else {
      Tensor flat = ad::reshape(x, {-1, in});
      Shape s = x.shape();
      s.back() = out;
      y = ad::reshape(ad::matmul(flat, w), std::move(s));
    }
    return b.defined() ? ad::add(y, b) : y;
  }
};

// Normalizes the last axis; matches the transformer-reference convention of
// an unbiased std with epsilon added to the deviation, not the variance.
struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-6;
  int dim = 0;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& prefix, int d)
      : dim(d) {
    gamma = ps.create(prefix + ".gamma", {d}, Init::kOnes);
    beta = ps.create(prefix + ".beta", {d}, Init::kZeros);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor m = ad::mean_axis(x, -1, true);
    Tensor centered = ad::sub(x, m);
    Tensor var = ad::scale(ad::sum_axis(ad::square(centered), -1, true),
                           1.0 / std::max(1, dim - 1));
    // The variance floor keeps the sqrt backward bounded on near-constant
    // rows (the forward shift is far below every test tolerance).
    Tensor denom = ad::add_scalar(ad::sqrt(ad::add_scalar(var, 1e-24)), eps);
    return ad::add(ad::mul(ad::div(centered, denom), gamma), beta);
  }
};

// Three linear layers with SiLU between them, optionally LayerNorm on top:
// the embedder block used throughout the network.
struct Mlp3 {
  Linear l1, l2, l3;
  LayerNorm ln;
  bool use_ln = true;

  Mlp3() = default;
  Mlp3(ParamStore& ps, const std::string& prefix, int in, int hidden, int out,
       bool layer_norm = true)
      : l1(ps, prefix + ".l1", in, hidden),
        l2(ps, prefix + ".l2", hidden, hidden),
        l3(ps, prefix + ".l3", hidden, out),
        use_ln(layer_norm) {
    if (layer_norm) ln = LayerNorm(ps, prefix + ".ln", out);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = l3(ad::silu(l2(ad::silu(l1(x)))));
    return use_ln ? ln(y) : y;
  }
};

struct Mlp2 {
  Linear l1, l2;

  Mlp2() = default;
  Mlp2(ParamStore& ps, const std::string& prefix, int in, int hidden, int out)
      : l1(ps, prefix + ".l1", in, hidden), l2(ps, prefix + ".l2", hidden, out) {}

  Tensor operator()(const Tensor& x) const { return l2(ad::silu(l1(x))); }
};

inline Tensor attention_mask_bias(const std::vector<double>& mask_q,
                                  const std::vector<double>& mask_k) {
  const int n = static_cast<int>(mask_q.size());
  const int m = static_cast<int>(mask_k.size());
  std::vector<double> bias(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      bias[i * m + j] = (mask_q[i] > 0.0 && mask_k[j] > 0.0) ? 0.0 : -1e9;
  return Tensor::constant({n, m}, std::move(bias));
}

// Multi-head attention, projections without bias. Query and key/value inputs
// may live in different feature spaces of the same width.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1, dk = 0, d = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& prefix, int num_heads,
                     int embed_dim)
      : wq(ps, prefix + ".wq", embed_dim, embed_dim, false),
        wk(ps, prefix + ".wk", embed_dim, embed_dim, false),
        wv(ps, prefix + ".wv", embed_dim, embed_dim, false),
        wo(ps, prefix + ".wo", embed_dim, embed_dim, false),
        heads(num_heads),
        dk(embed_dim / num_heads),
        d(embed_dim) {
    if (embed_dim % num_heads != 0)
      throw ConfigError("attention width must divide into heads");
  }

  // x: [n, d] queries, kv: [m, d] keys/values.
  Tensor operator()(const Tensor& x, const Tensor& kv,
                    const std::vector<double>* mask_q = nullptr,
                    const std::vector<double>* mask_k = nullptr) const {
    const int n = x.dim(0), m = kv.dim(0);
    Tensor q = ad::permute3(ad::reshape(wq(x), {n, heads, dk}), 1, 0, 2);
    Tensor k = ad::permute3(ad::reshape(wk(kv), {m, heads, dk}), 1, 0, 2);
    Tensor v = ad::permute3(ad::reshape(wv(kv), {m, heads, dk}), 1, 0, 2);
    Tensor scores = ad::scale(ad::matmul(q, ad::transpose_last(k)),
                              1.0 / std::sqrt(static_cast<double>(dk)));
    if (mask_q && mask_k) {
      Tensor bias = ad::reshape(attention_mask_bias(*mask_q, *mask_k), {1, n, m});
      scores = ad::add(scores, bias);
    }
    Tensor attn = ad::softmax_last(scores);
    Tensor out = ad::matmul(attn, v);                        // [h, n, dk]
    out = ad::reshape(ad::permute3(out, 1, 0, 2), {n, d});   // [n, h*dk]
    return wo(out);
  }

  // Batched self/cross attention: x [B, n, d], kv [B, m, d], optional
  // additive mask bias [B, n, m] (0 where attended, -1e9 where excluded).
  Tensor batched(const Tensor& x, const Tensor& kv,
                 const Tensor* mask_bias = nullptr) const {
    const int b = x.dim(0), n = x.dim(1), m = kv.dim(1);
    auto split_heads = [&](const Tensor& t, int seq) {
      return ad::reshape(
          ad::permute(ad::reshape(t, {b, seq, heads, dk}), {0, 2, 1, 3}),
          {b * heads, seq, dk});
    };
    Tensor q = split_heads(wq(x), n);
    Tensor k = split_heads(wk(kv), m);
    Tensor v = split_heads(wv(kv), m);
    Tensor scores = ad::scale(ad::matmul(q, ad::transpose_last(k)),
                              1.0 / std::sqrt(static_cast<double>(dk)));
    if (mask_bias) {
      scores = ad::reshape(scores, {b, heads, n, m});
      scores = ad::add(scores, ad::reshape(*mask_bias, {b, 1, n, m}));
      scores = ad::reshape(scores, {b * heads, n, m});
    }
    Tensor out = ad::matmul(ad::softmax_last(scores), v);  // [b*h, n, dk]
    out = ad::reshape(
        ad::permute(ad::reshape(out, {b, heads, n, dk}), {0, 2, 1, 3}),
        {b, n, d});
    return wo(out);
  }
};

// Single-head cross attention with biased projections and scale sqrt(d_out);
// the fusion block between pocket features and conditioning features.
struct CrossAttention {
  Linear wq, wk, wv;
  int out_dim = 0;

  CrossAttention() = default;
  CrossAttention(ParamStore& ps, const std::string& prefix, int query_dim,
                 int key_dim, int output_dim)
      : wq(ps, prefix + ".wq", query_dim, output_dim),
        wk(ps, prefix + ".wk", key_dim, output_dim),
        wv(ps, prefix + ".wv", key_dim, output_dim),
        out_dim(output_dim) {}

  Tensor operator()(const Tensor& query_input, const Tensor& key_input,
                    const std::vector<double>* mask_q = nullptr,
                    const std::vector<double>* mask_k = nullptr) const {
    Tensor q = wq(query_input);
    Tensor k = wk(key_input);
    Tensor v = wv(key_input);
    Tensor scores = ad::scale(ad::matmul(q, ad::transpose_last(k)),
                              1.0 / std::sqrt(static_cast<double>(out_dim)));
    if (mask_q && mask_k)
      scores = ad::add(scores, attention_mask_bias(*mask_q, *mask_k));
    return ad::matmul(ad::softmax_last(scores), v);
  }
};

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& ps) {
    if (m_.empty()) {
      for (const auto& [name, t] : ps.items()) {
        m_.emplace_back(t.size(), 0.0);
        v_.emplace_back(t.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < ps.items().size(); ++k) {
      Tensor& p = ps.items()[k].second;
      auto& vals = p.mutable_values();
      const auto& g = p.grad();
      if (g.empty()) continue;  // never touched by the loss
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        vals[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary container of (name, shape, f64 values)
// entries plus the config hash of the network that produced them.

inline constexpr std::uint32_t kCheckpointMagic = 0x5a59464cu;  // "ZYFL"
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParamStore& ps, const std::string& path,
                            std::uint64_t config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  put_u32(kCheckpointMagic);
  put_u32(kCheckpointVersion);
  put_u64(config_hash);
  put_u64(ps.size());
  for (const auto& [name, t] : ps.items()) {
    put_u32(static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * 8));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

// Loads values into an existing store; names and shapes must match exactly.
inline std::uint64_t load_checkpoint(ParamStore& ps, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  auto get_u32 = [&]() { std::uint32_t v = 0; in.read(reinterpret_cast<char*>(&v), 4); return v; };
  auto get_u64 = [&]() { std::uint64_t v = 0; in.read(reinterpret_cast<char*>(&v), 8); return v; };
  if (get_u32() != kCheckpointMagic) throw IoError("not a checkpoint file: " + path);
  if (get_u32() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  const std::uint64_t config_hash = get_u64();
  const std::uint64_t count = get_u64();
  if (count != ps.size())
    throw ConfigError("checkpoint parameter count does not match network");
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = get_u32();
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t ndim = get_u32();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get_u32());
    Tensor& t = ps.at(name);
    if (t.shape() != shape)
      throw ConfigError("checkpoint shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(t.mutable_values().data()),
            static_cast<std::streamsize>(t.size() * 8));
    if (!in) throw IoError("truncated checkpoint: " + path);
  }
  return config_hash;
}

}  // namespace zymflow::nn
