#pragma once

// Small reverse-mode automatic differentiation engine on dense double
// tensors. Ops build a DAG of nodes; Tensor is a value-semantic handle.
// backward() runs the chain rule in reverse topological order and then
// releases the graph iteratively (no recursive destructor chains).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "zymflow/errors.hpp"

namespace zymflow::ad {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Global tape switch; sampling and finite-difference evaluation run with the
// tape off so no graph is built.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool saved;
  NoGradGuard() : saved(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = saved; }
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<double> data) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor: data size does not match shape " +
                       shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }
  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node>();
    n->value.assign(numel(shape), 0.0);
    n->shape = std::move(shape);
    return Tensor(n);
  }
  static Tensor full(Shape shape, double v) {
    auto n = std::make_shared<Node>();
    n->value.assign(numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(n);
  }
  static Tensor scalar(double v) { return constant({1}, {v}); }
  static Tensor param(Shape shape, std::vector<double> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return numel(node_->shape); }
  int dim(int i) const { return node_->shape[i]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor is not scalar");
    return node_->value[0];
  }

  // Constant copy sharing no graph history.
  Tensor detach() const { return constant(node_->shape, node_->value); }

  std::shared_ptr<Node> node() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::vector<Node*> marked;
  // Use a per-node visit flag stored in an external set keyed by pointer.
  // For graphs of a few thousand nodes a sorted vector is fast enough.
  std::vector<Node*> visited;
  auto is_visited = [&](Node* n) {
    return std::binary_search(visited.begin(), visited.end(), n);
  };
  auto mark = [&](Node* n) {
    visited.insert(std::upper_bound(visited.begin(), visited.end(), n), n);
  };
  stack.push_back({root, 0});
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx == 0 && is_visited(n)) {
      stack.pop_back();
      continue;
    }
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (!is_visited(p)) stack.push_back({p, 0});
    } else {
      mark(n);
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward: root must be scalar");
  Node* root = node_.get();
  auto order = detail::topo_order(root);
  for (Node* n : order) n->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn();
  }
  // Release the tape so deep graphs never unwind recursively and memory is
  // returned immediately. Leaf gradients stay in place for the optimizer.
  for (Node* n : order) {
    n->backward_fn = nullptr;
    n->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// Op helpers

namespace detail {

inline bool taping(const std::vector<std::shared_ptr<Node>>& parents) {
  if (!grad_enabled_flag()) return false;
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<std::shared_ptr<Node>> parents,
                          std::function<void()> (*make_backward)(Node*) = nullptr) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (taping(parents)) {
    n->requires_grad = true;
    n->parents = std::move(parents);
  }
  (void)make_backward;
  return Tensor(n);
}

// Broadcast two shapes, numpy-style right alignment.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    const int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("broadcast: incompatible shapes " + shape_str(a) +
                       " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Effective strides of `in` when broadcast to `out` (0 on expanded dims).
inline std::vector<std::int64_t> broadcast_strides(const Shape& in,
                                                   const Shape& out) {
  auto st = strides_of(in);
  std::vector<std::int64_t> eff(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    eff[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
  return eff;
}

// Iterate an output shape, calling f(out_linear, a_linear, b_linear).
template <typename F>
inline void for_each_broadcast(const Shape& out, const Shape& a,
                               const Shape& b, F&& f) {
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const int nd = static_cast<int>(out.size());
  const std::int64_t total = numel(out);
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t lin = 0; lin < total; ++lin) {
    f(lin, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise ops with broadcasting

namespace detail {

template <typename FwdF, typename BwdA, typename BwdB>
inline Tensor binary_op(const Tensor& a, const Tensor& b, FwdF fwd, BwdA da,
                        BwdB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(numel(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                         out[o] = fwd(av[ia], bv[ib]);
                       });
  }
  Tensor res = make_result(out_shape, std::move(out), {a.node(), b.node()});
  if (res.requires_grad()) {
    auto an = a.node(), bn = b.node(), rn = res.node();
    Node* rp = rn.get();
    rn->backward_fn = [an, bn, rp, da, db]() {
      const auto& g = rp->grad;
      const auto& av2 = an->value;
      const auto& bv2 = bn->value;
      const bool same = an->shape == bn->shape && an->shape == rp->shape;
      if (an->requires_grad) {
        an->ensure_grad();
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i)
            an->grad[i] += g[i] * da(av2[i], bv2[i]);
        } else {
          for_each_broadcast(rp->shape, an->shape, bn->shape,
                             [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                               an->grad[ia] += g[o] * da(av2[ia], bv2[ib]);
                             });
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i)
            bn->grad[i] += g[i] * db(av2[i], bv2[i]);
        } else {
          for_each_broadcast(rp->shape, an->shape, bn->shape,
                             [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                               bn->grad[ib] += g[o] * db(av2[ia], bv2[ib]);
                             });
        }
      }
    };
  }
  return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Unary elementwise ops

namespace detail {

template <typename FwdF, typename GradF>
inline Tensor unary_op(const Tensor& a, FwdF fwd, GradF grad_fn) {
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Tensor res = make_result(a.shape(), std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, grad_fn]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const auto& g = rp->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        an->grad[i] += g[i] * grad_fn(an->value[i], rp->value[i]);
    };
  }
  return res;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return -x; },
                          [](double, double) { return -1.0; });
}
inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return s * x; },
                          [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x + s; },
                          [](double, double) { return 1.0; });
}
inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}
inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x * x; },
                          [](double x, double) { return 2.0 * x; });
}
inline Tensor sin(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sin(x); },
                          [](double x, double) { return std::cos(x); });
}
inline Tensor cos(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::cos(x); },
                          [](double x, double) { return -std::sin(x); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor silu(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// sin(sqrt(s))/sqrt(s) as a function of s = theta^2; series near 0.
inline Tensor sinc_theta2(const Tensor& s) {
  return detail::unary_op(
      s,
      [](double x) {
        if (x < 1e-8) return 1.0 - x / 6.0 + x * x / 120.0;
        const double t = std::sqrt(x);
        return std::sin(t) / t;
      },
      [](double x, double y) {
        if (x < 1e-8) return -1.0 / 6.0 + x / 60.0;
        return (std::cos(std::sqrt(x)) - y) / (2.0 * x);
      });
}

// (1 - cos(sqrt(s)))/s as a function of s = theta^2; series near 0.
inline Tensor versine_theta2(const Tensor& s) {
  return detail::unary_op(
      s,
      [](double x) {
        if (x < 1e-8) return 0.5 - x / 24.0 + x * x / 720.0;
        return (1.0 - std::cos(std::sqrt(x))) / x;
      },
      [](double x, double) {
        if (x < 1e-8) return -1.0 / 24.0 + x / 360.0;
        const double t = std::sqrt(x);
        return (t * std::sin(t) / 2.0 - (1.0 - std::cos(t))) / (x * x);
      });
}

// acos(c) / (2*sqrt(1-c^2)): the rotation-log coefficient as a function of
// the cosine of the angle. Smooth at c=1 (series); clamped just above -1,
// where the log map has its cut locus.
inline Tensor rot_log_coeff(const Tensor& c) {
  return detail::unary_op(
      c,
      [](double x) {
        x = std::fmin(1.0, std::fmax(-1.0 + 1e-9, x));
        const double u = 1.0 - x;
        if (u < 1e-4) return 0.5 + u / 6.0 + u * u / 15.0;
        const double theta = std::acos(x);
        return theta / (2.0 * std::sqrt(1.0 - x * x));
      },
      [](double x, double) {
        x = std::fmin(1.0, std::fmax(-1.0 + 1e-9, x));
        const double u = 1.0 - x;
        if (u < 1e-4) return -(1.0 / 6.0 + 2.0 * u / 15.0);
        const double s2 = 1.0 - x * x;
        const double s = std::sqrt(s2);
        const double theta = std::acos(x);
        return (x * theta / s - 1.0) / (2.0 * s2);
      });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  // One dim may be -1.
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) infer = static_cast<int>(i);
    else known *= shape[i];
  }
  if (infer >= 0) shape[infer] = static_cast<int>(a.size() / known);
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor res = detail::make_result(shape, a.values(), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < rp->grad.size(); ++i)
        an->grad[i] += rp->grad[i];
    };
  }
  return res;
}

// Permute the axes of a 3-d tensor.
inline Tensor permute3(const Tensor& a, int p0, int p1, int p2) {
  if (a.ndim() != 3) throw ShapeError("permute3: tensor must be 3-d");
  const Shape& s = a.shape();
  const Shape out_shape{s[p0], s[p1], s[p2]};
  const auto st = strides_of(s);
  std::vector<double> out(a.size());
  const auto& av = a.values();
  std::int64_t o = 0;
  for (int i = 0; i < out_shape[0]; ++i)
    for (int j = 0; j < out_shape[1]; ++j)
      for (int k = 0; k < out_shape[2]; ++k)
        out[o++] = av[i * st[p0] + j * st[p1] + k * st[p2]];
  Tensor res = detail::make_result(out_shape, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    const Shape os = out_shape;
    res.node()->backward_fn = [an, rp, st, p0, p1, p2, os]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      std::int64_t o2 = 0;
      for (int i = 0; i < os[0]; ++i)
        for (int j = 0; j < os[1]; ++j)
          for (int k = 0; k < os[2]; ++k)
            an->grad[i * st[p0] + j * st[p1] + k * st[p2]] += rp->grad[o2++];
    };
  }
  return res;
}

// General axis permutation.
inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int nd = a.ndim();
  if (static_cast<int>(perm.size()) != nd)
    throw ShapeError("permute: wrong axis count");
  Shape out_shape(nd);
  const auto in_st = strides_of(a.shape());
  std::vector<std::int64_t> eff(nd);
  for (int i = 0; i < nd; ++i) {
    out_shape[i] = a.dim(perm[i]);
    eff[i] = in_st[perm[i]];
  }
  const std::int64_t total = a.size();
  std::vector<double> out(total);
  const auto& av = a.values();
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t src = 0;
  for (std::int64_t lin = 0; lin < total; ++lin) {
    out[lin] = av[src];
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      src += eff[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      src -= eff[d] * out_shape[d];
    }
  }
  Tensor res = detail::make_result(out_shape, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    const Shape os = out_shape;
    res.node()->backward_fn = [an, rp, eff, os, nd, total]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      std::vector<std::int64_t> idx2(nd, 0);
      std::int64_t src = 0;
      for (std::int64_t lin = 0; lin < total; ++lin) {
        an->grad[src] += rp->grad[lin];
        for (int d = nd - 1; d >= 0; --d) {
          ++idx2[d];
          src += eff[d];
          if (idx2[d] < os[d]) break;
          idx2[d] = 0;
          src -= eff[d] * os[d];
        }
      }
    };
  }
  return res;
}

// Swap the last two axes of a 2-d or 3-d tensor.
inline Tensor transpose_last(const Tensor& a) {
  if (a.ndim() == 2) {
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    Tensor res = detail::make_result({n, m}, std::move(out), {a.node()});
    if (res.requires_grad()) {
      auto an = a.node();
      Node* rp = res.node().get();
      res.node()->backward_fn = [an, rp, m, n]() {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) an->grad[i * n + j] += rp->grad[j * m + i];
      };
    }
    return res;
  }
  if (a.ndim() == 3) return permute3(a, 0, 2, 1);
  throw ShapeError("transpose_last: tensor must be 2-d or 3-d");
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && p.dim(d) != parts[0].dim(d))
        throw ShapeError("concat: shape mismatch off-axis");
    out_shape[axis] += p.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[d];

  std::vector<double> out(numel(out_shape));
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::int64_t> offs;  // per-part offset along axis, in elements
  std::int64_t off = 0;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    offs.push_back(off);
    const std::int64_t blk = p.dim(axis) * inner;
    const auto& pv = p.values();
    for (std::int64_t ou = 0; ou < outer; ++ou)
      std::copy(pv.begin() + ou * blk, pv.begin() + (ou + 1) * blk,
                out.begin() + ou * out_shape[axis] * inner + off * inner);
    off += p.dim(axis);
  }
  Tensor res = detail::make_result(out_shape, std::move(out), parents);
  if (res.requires_grad()) {
    auto rn = res.node();
    Node* rp = rn.get();
    std::vector<std::shared_ptr<Node>> ps = rn->parents;
    const std::int64_t axis_total = out_shape[axis];
    rn->backward_fn = [rp, ps, offs, outer, inner, axis_total, axis]() {
      for (std::size_t k = 0; k < ps.size(); ++k) {
        Node* p = ps[k].get();
        if (!p->requires_grad) continue;
        p->ensure_grad();
        const std::int64_t blk = p->shape[axis] * inner;
        for (std::int64_t ou = 0; ou < outer; ++ou) {
          const double* src =
              rp->grad.data() + ou * axis_total * inner + offs[k] * inner;
          double* dst = p->grad.data() + ou * blk;
          for (std::int64_t i = 0; i < blk; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return res;
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (start < 0 || start + len > a.dim(axis))
    throw ShapeError("slice: range out of bounds");
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < nd; ++d) inner *= a.dim(d);
  std::vector<double> out(numel(out_shape));
  const auto& av = a.values();
  const std::int64_t in_axis = a.dim(axis);
  for (std::int64_t ou = 0; ou < outer; ++ou)
    std::copy(av.begin() + (ou * in_axis + start) * inner,
              av.begin() + (ou * in_axis + start + len) * inner,
              out.begin() + ou * len * inner);
  Tensor res = detail::make_result(out_shape, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, outer, inner, in_axis, start, len]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t ou = 0; ou < outer; ++ou) {
        const double* src = rp->grad.data() + ou * len * inner;
        double* dst = an->grad.data() + (ou * in_axis + start) * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return res;
}

// Gather columns of a 2-d tensor: out[i, k] = a[i, idx[k]].
inline Tensor gather_cols(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2) throw ShapeError("gather_cols: tensor must be 2-d");
  const int n = a.dim(0), m = a.dim(1), k = static_cast<int>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  const auto& av = a.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[i * k + j] = av[i * m + idx[j]];
  Tensor res = detail::make_result({n, k}, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, idx, n, m, k]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j)
          an->grad[i * m + idx[j]] += rp->grad[i * k + j];
    };
  }
  return res;
}

// Embedding lookup: out[i, :] = table[indices[i], :].
inline Tensor embedding(const Tensor& table, const std::vector<int>& indices) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-d");
  const int v = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(n) * d);
  const auto& tv = table.values();
  for (int i = 0; i < n; ++i) {
    if (indices[i] < 0 || indices[i] >= v)
      throw ShapeError("embedding: index out of range");
    std::copy(tv.begin() + indices[i] * d, tv.begin() + (indices[i] + 1) * d,
              out.begin() + i * d);
  }
  Tensor res = detail::make_result({n, d}, std::move(out), {table.node()});
  if (res.requires_grad()) {
    auto tn = table.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [tn, rp, indices, d]() {
      if (!tn->requires_grad) return;
      tn->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (int j = 0; j < d; ++j)
          tn->grad[indices[i] * d + j] += rp->grad[i * d + j];
    };
  }
  return res;
}

// Per-row pick of one column: out[i] = a[i, idx[i]], shape [n, 1].
inline Tensor take_per_row(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2) throw ShapeError("take_per_row: tensor must be 2-d");
  const int n = a.dim(0), m = a.dim(1);
  if (static_cast<int>(idx.size()) != n)
    throw ShapeError("take_per_row: index count mismatch");
  std::vector<double> out(n);
  const auto& av = a.values();
  for (int i = 0; i < n; ++i) out[i] = av[i * m + idx[i]];
  Tensor res = detail::make_result({n, 1}, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, idx, m]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        an->grad[i * m + idx[i]] += rp->grad[i];
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor res = detail::make_result({1}, {s}, {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const double g = rp->grad[0];
      for (auto& gi : an->grad) gi += g;
    };
  }
  return res;
}

inline Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < nd; ++d) inner *= a.dim(d);
  const std::int64_t n_axis = a.dim(axis);
  Shape out_shape;
  for (int d = 0; d < nd; ++d) {
    if (d == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.dim(d));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  const auto& av = a.values();
  for (std::int64_t ou = 0; ou < outer; ++ou)
    for (std::int64_t k = 0; k < n_axis; ++k) {
      const double* src = av.data() + (ou * n_axis + k) * inner;
      double* dst = out.data() + ou * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Tensor res = detail::make_result(out_shape, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, outer, inner, n_axis]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t ou = 0; ou < outer; ++ou)
        for (std::int64_t k = 0; k < n_axis; ++k) {
          double* dst = an->grad.data() + (ou * n_axis + k) * inner;
          const double* src = rp->grad.data() + ou * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return res;
}

inline Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false) {
  const int n = a.dim(axis < 0 ? axis + a.ndim() : axis);
  return scale(sum_axis(a, axis, keepdim), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Matrix products

// 2-d matmul [m,k] x [k,n] or batched [B,m,k] x [B,k,n]; a 2-d operand on
// either side of a batched one is shared across the batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool a3 = a.ndim() == 3, b3 = b.ndim() == 3;
  if (a.ndim() == 2 && b.ndim() == 2) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
      throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double av_ip = av[i * k + p];
        if (av_ip == 0.0) continue;
        const double* brow = bv.data() + p * n;
        double* orow = out.data() + i * n;
        for (int j = 0; j < n; ++j) orow[j] += av_ip * brow[j];
      }
    Tensor res = detail::make_result({m, n}, std::move(out), {a.node(), b.node()});
    if (res.requires_grad()) {
      auto an = a.node(), bn = b.node();
      Node* rp = res.node().get();
      res.node()->backward_fn = [an, bn, rp, m, k, n]() {
        const auto& g = rp->grad;
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = G * B^T
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double s = 0.0;
              const double* grow = g.data() + i * n;
              const double* brow = bn->value.data() + p * n;
              for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
              an->grad[i * k + p] += s;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = A^T * G
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              const double a_ip = an->value[i * k + p];
              if (a_ip == 0.0) continue;
              const double* grow = g.data() + i * n;
              double* brow = bn->grad.data() + p * n;
              for (int j = 0; j < n; ++j) brow[j] += a_ip * grow[j];
            }
        }
      };
    }
    return res;
  }
  // Batched cases: lift 2-d operands to a shared batch.
  const int batch = a3 ? a.dim(0) : b.dim(0);
  if (a3 && b3 && a.dim(0) != b.dim(0))
    throw ShapeError("matmul: batch mismatch");
  const int m = a.dim(a3 ? 1 : 0), k = a.dim(a3 ? 2 : 1);
  const int kb = b.dim(b3 ? 1 : 0), n = b.dim(b3 ? 2 : 1);
  if (k != kb) throw ShapeError("matmul: inner dims (batched)");
  std::vector<double> out(static_cast<std::size_t>(batch) * m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int bi = 0; bi < batch; ++bi) {
    const double* ab = av.data() + (a3 ? static_cast<std::size_t>(bi) * m * k : 0);
    const double* bb = bv.data() + (b3 ? static_cast<std::size_t>(bi) * k * n : 0);
    double* ob = out.data() + static_cast<std::size_t>(bi) * m * n;
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double a_ip = ab[i * k + p];
        if (a_ip == 0.0) continue;
        const double* brow = bb + p * n;
        double* orow = ob + i * n;
        for (int j = 0; j < n; ++j) orow[j] += a_ip * brow[j];
      }
  }
  Tensor res = detail::make_result({batch, m, n}, std::move(out),
                                   {a.node(), b.node()});
  if (res.requires_grad()) {
    auto an = a.node(), bn = b.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, bn, rp, batch, m, k, n, a3, b3]() {
      for (int bi = 0; bi < batch; ++bi) {
        const double* g = rp->grad.data() + static_cast<std::size_t>(bi) * m * n;
        const double* ab =
            an->value.data() + (a3 ? static_cast<std::size_t>(bi) * m * k : 0);
        const double* bb =
            bn->value.data() + (b3 ? static_cast<std::size_t>(bi) * k * n : 0);
        if (an->requires_grad) {
          an->ensure_grad();
          double* ga =
              an->grad.data() + (a3 ? static_cast<std::size_t>(bi) * m * k : 0);
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double s = 0.0;
              const double* grow = g + i * n;
              const double* brow = bb + p * n;
              for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
              ga[i * k + p] += s;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          double* gb =
              bn->grad.data() + (b3 ? static_cast<std::size_t>(bi) * k * n : 0);
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              const double a_ip = ab[i * k + p];
              if (a_ip == 0.0) continue;
              const double* grow = g + i * n;
              double* brow = gb + p * n;
              for (int j = 0; j < n; ++j) brow[j] += a_ip * grow[j];
            }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Softmax family (fused over the last axis, max-shifted)

inline Tensor softmax_last(const Tensor& a) {
  const int n = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.size() / n;
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = av.data() + r * n;
    double* dst = out.data() + r * n;
    double mx = src[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (int j = 0; j < n; ++j) dst[j] /= z;
  }
  Tensor res = detail::make_result(a.shape(), std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, rows, n]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = rp->value.data() + r * n;
        const double* g = rp->grad.data() + r * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += y[j] * g[j];
        double* dst = an->grad.data() + r * n;
        for (int j = 0; j < n; ++j) dst[j] += y[j] * (g[j] - dot);
      }
    };
  }
  return res;
}

inline Tensor log_softmax_last(const Tensor& a) {
  const int n = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.size() / n;
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = av.data() + r * n;
    double* dst = out.data() + r * n;
    double mx = src[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(src[j] - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < n; ++j) dst[j] = src[j] - lz;
  }
  Tensor res = detail::make_result(a.shape(), std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, rows, n]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = rp->value.data() + r * n;
        const double* g = rp->grad.data() + r * n;
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += g[j];
        double* dst = an->grad.data() + r * n;
        for (int j = 0; j < n; ++j) dst[j] += g[j] - std::exp(y[j]) * gsum;
      }
    };
  }
  return res;
}

inline Tensor logsumexp_last(const Tensor& a) {
  const int n = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.size() / n;
  Shape out_shape = a.shape();
  out_shape.back() = 1;
  std::vector<double> out(rows);
  const auto& av = a.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = av.data() + r * n;
    double mx = src[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(src[j] - mx);
    out[r] = mx + std::log(z);
  }
  Tensor res = detail::make_result(out_shape, std::move(out), {a.node()});
  if (res.requires_grad()) {
    auto an = a.node();
    Node* rp = res.node().get();
    res.node()->backward_fn = [an, rp, rows, n]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = an->value.data() + r * n;
        const double lse = rp->value[r];
        const double g = rp->grad[r];
        double* dst = an->grad.data() + r * n;
        for (int j = 0; j < n; ++j) dst[j] += g * std::exp(x[j] - lse);
      }
    };
  }
  return res;
}

// Convenience operators.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace zymflow::ad
