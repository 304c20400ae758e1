#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "zymflow/nn.hpp"
#include "zymflow/rng.hpp"
#include "zymflow/tensor.hpp"

using namespace zymflow;
using ad::Tensor;

namespace {

Tensor random_param(Rng& rng, ad::Shape shape, double scale = 1.0,
                    double offset = 0.0) {
  std::vector<double> data(ad::numel(shape));
  for (auto& v : data) v = rng.normal() * scale + offset;
  return Tensor::param(std::move(shape), std::move(data));
}

// Checks analytic gradients of a scalar-valued builder against central finite
// differences on every input entry.
void check_gradients(std::vector<Tensor> inputs,
                     const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                     double h = 1e-5, double tol = 1e-6) {
  Tensor loss = fn(inputs);
  REQUIRE(loss.size() == 1);
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      ad::NoGradGuard guard;
      vals[i] = keep + h;
      const double up = fn(inputs).item();
      vals[i] = keep - h;
      const double down = fn(inputs).item();
      vals[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-3});
      INFO("input " << k << " entry " << i << " analytic " << a << " fd " << fd);
      REQUIRE(std::abs(a - fd) / denom < tol);
    }
  }
}

// Reduce any tensor to a scalar with fixed pseudo-random weights so every
// output entry influences the loss.
Tensor weigh(const Tensor& t, std::uint64_t salt = 0) {
  std::vector<double> w(t.size());
  Rng rng(900 + salt);
  for (auto& v : w) v = rng.uniform(0.5, 1.5);
  return ad::sum_all(ad::mul(t, Tensor::constant(t.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("binary ops with broadcasting", "[tensor]") {
  Rng rng(1);
  SECTION("same shape") {
    check_gradients({random_param(rng, {2, 3}), random_param(rng, {2, 3})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::mul(ad::add(in[0], in[1]),
                                           ad::sub(in[0], in[1])));
                    });
  }
  SECTION("row vector over matrix") {
    check_gradients({random_param(rng, {4, 3}), random_param(rng, {3})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::add(in[0], in[1]));
                    });
  }
  SECTION("column over matrix and scalar") {
    check_gradients({random_param(rng, {4, 1}), random_param(rng, {1, 3}),
                     random_param(rng, {1})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::mul(ad::mul(in[0], in[1]), in[2]));
                    });
  }
  SECTION("division") {
    check_gradients({random_param(rng, {3, 2}), random_param(rng, {3, 2}, 0.3, 2.0)},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::div(in[0], in[1]));
                    });
  }
}

TEST_CASE("unary op gradients", "[tensor]") {
  Rng rng(2);
  check_gradients({random_param(rng, {2, 5})}, [](const std::vector<Tensor>& in) {
    Tensor x = in[0];
    Tensor y = ad::add(ad::tanh(x), ad::sigmoid(x));
    y = ad::add(y, ad::silu(x));
    y = ad::add(y, ad::sin(x));
    y = ad::add(y, ad::cos(x));
    y = ad::add(y, ad::exp(ad::scale(x, 0.3)));
    y = ad::add(y, ad::softplus(x));
    y = ad::add(y, ad::square(x));
    return weigh(y);
  });
  // Positive-domain ops.
  check_gradients({random_param(rng, {6}, 0.5, 3.0)},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::add(ad::log(in[0]), ad::sqrt(in[0])));
                  });
  // ReLU away from the kink.
  check_gradients({random_param(rng, {8}, 1.0, 2.5)},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::relu(in[0]));
                  });
}

TEST_CASE("rotation coefficient ops", "[tensor]") {
  Rng rng(3);
  // s = theta^2 well away from series switch.
  check_gradients({random_param(rng, {5}, 0.2, 1.0)},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::add(ad::sinc_theta2(in[0]),
                                         ad::versine_theta2(in[0])));
                  });
  check_gradients({random_param(rng, {5}, 0.2, 0.0)},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::rot_log_coeff(in[0]));
                  });
  // Values stay continuous across the series switches.
  for (double s : {1e-9, 9.9e-9, 1.01e-8, 1e-7}) {
    const double a = ad::sinc_theta2(Tensor::scalar(s)).item();
    const double b = ad::versine_theta2(Tensor::scalar(s)).item();
    REQUIRE(std::abs(a - std::sin(std::sqrt(s)) / std::sqrt(s)) < 1e-12);
    REQUIRE(std::abs(b - 0.5) < 1e-8);
  }
  for (double c : {1.0 - 1e-5, 1.0 - 9e-5, 1.0 - 1.1e-4, 1.0 - 1e-3}) {
    const double g = ad::rot_log_coeff(Tensor::scalar(c)).item();
    const double theta = std::acos(c);
    REQUIRE(std::abs(g - theta / (2 * std::sin(theta))) < 1e-10);
  }
}

TEST_CASE("matmul gradients", "[tensor]") {
  Rng rng(4);
  SECTION("2d") {
    check_gradients({random_param(rng, {3, 4}), random_param(rng, {4, 2})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::matmul(in[0], in[1]));
                    });
  }
  SECTION("batched") {
    check_gradients({random_param(rng, {2, 3, 4}), random_param(rng, {2, 4, 2})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::matmul(in[0], in[1]));
                    });
  }
  SECTION("shared right operand") {
    check_gradients({random_param(rng, {2, 3, 4}), random_param(rng, {4, 2})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::matmul(in[0], in[1]));
                    });
  }
  SECTION("shared left operand") {
    check_gradients({random_param(rng, {3, 4}), random_param(rng, {2, 4, 2})},
                    [](const std::vector<Tensor>& in) {
                      return weigh(ad::matmul(in[0], in[1]));
                    });
  }
}

TEST_CASE("shape op gradients", "[tensor]") {
  Rng rng(5);
  check_gradients({random_param(rng, {2, 3, 4})},
                  [](const std::vector<Tensor>& in) {
                    Tensor p = ad::permute3(in[0], 2, 0, 1);
                    Tensor r = ad::reshape(p, {4, 6});
                    Tensor t = ad::transpose_last(r);
                    return weigh(t);
                  });
  check_gradients({random_param(rng, {3, 2}), random_param(rng, {3, 4})},
                  [](const std::vector<Tensor>& in) {
                    Tensor c = ad::concat({in[0], in[1]}, 1);
                    return weigh(ad::slice(c, 1, 1, 4));
                  });
  check_gradients({random_param(rng, {2, 4}), random_param(rng, {3, 4})},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::concat({in[0], in[1]}, 0));
                  });
  check_gradients({random_param(rng, {3, 5})},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::gather_cols(in[0], {4, 0, 2}));
                  });
  check_gradients({random_param(rng, {4, 3})},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::take_per_row(in[0], {2, 0, 1, 2}));
                  });
  check_gradients({random_param(rng, {5, 3})},
                  [](const std::vector<Tensor>& in) {
                    // Repeated indices must accumulate.
                    return weigh(ad::embedding(in[0], {1, 4, 1, 0}));
                  });
}

TEST_CASE("reduction gradients", "[tensor]") {
  Rng rng(6);
  check_gradients({random_param(rng, {2, 3, 4})},
                  [](const std::vector<Tensor>& in) {
                    Tensor s0 = ad::sum_axis(in[0], 1, false);
                    Tensor s1 = ad::mean_axis(in[0], -1, true);
                    return ad::add(weigh(s0, 1), weigh(s1, 2));
                  });
  check_gradients({random_param(rng, {7})},
                  [](const std::vector<Tensor>& in) {
                    return ad::sum_all(ad::square(in[0]));
                  });
}

TEST_CASE("softmax family gradients", "[tensor]") {
  Rng rng(7);
  check_gradients({random_param(rng, {3, 5})},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::softmax_last(in[0]));
                  });
  check_gradients({random_param(rng, {3, 5})},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::log_softmax_last(in[0]));
                  });
  check_gradients({random_param(rng, {4, 6})},
                  [](const std::vector<Tensor>& in) {
                    return weigh(ad::logsumexp_last(in[0]));
                  });
  // Softmax rows sum to one.
  Tensor x = random_param(rng, {4, 9});
  Tensor sm = ad::softmax_last(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 9; ++c) s += sm.values()[r * 9 + c];
    REQUIRE(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("graph reuse accumulates gradients", "[tensor]") {
  Rng rng(8);
  check_gradients({random_param(rng, {3, 3})},
                  [](const std::vector<Tensor>& in) {
                    // Diamond: the same tensor feeds two paths.
                    Tensor a = ad::matmul(in[0], in[0]);
                    Tensor b = ad::add(ad::silu(in[0]), a);
                    return weigh(b);
                  });
}

TEST_CASE("no-grad mode builds no tape", "[tensor]") {
  Rng rng(9);
  Tensor p = random_param(rng, {2, 2});
  ad::NoGradGuard guard;
  Tensor y = ad::matmul(p, p);
  REQUIRE_FALSE(y.requires_grad());
  REQUIRE(y.node()->parents.empty());
}

TEST_CASE("nn layers differentiate end to end", "[tensor]") {
  nn::ParamStore ps(17);
  nn::Linear lin(ps, "lin", 4, 3);
  nn::LayerNorm ln(ps, "ln", 3);
  nn::MultiHeadAttention mha(ps, "mha", 2, 4);
  nn::CrossAttention cross(ps, "cross", 3, 4, 3);
  Rng rng(10);
  Tensor x = random_param(rng, {5, 4});

  std::vector<Tensor> inputs = {x};
  for (auto& [name, t] : ps.items()) inputs.push_back(t);
  std::vector<double> mq(5, 1.0), mk(5, 1.0);
  mk[3] = 0.0;
  check_gradients(
      inputs,
      [&](const std::vector<Tensor>& in) {
        Tensor h = mha(in[0], in[0], &mq, &mk);
        Tensor g = ln(lin(h));
        Tensor c = cross(g, in[0], nullptr, nullptr);
        return weigh(c);
      },
      1e-5, 1e-5);
}

TEST_CASE("adam with zero learning rate keeps parameters", "[tensor]") {
  nn::ParamStore ps(3);
  nn::Linear lin(ps, "lin", 3, 2);
  auto before = ps.snapshot();
  nn::Adam opt(0.0);
  Rng rng(11);
  Tensor x = random_param(rng, {4, 3});
  Tensor loss = ad::sum_all(ad::square(lin(x)));
  loss.backward();
  opt.step(ps);
  auto after = ps.snapshot();
  REQUIRE(before == after);
}

TEST_CASE("checkpoints roundtrip values and config hash", "[tensor]") {
  nn::ParamStore a(21);
  nn::Linear l1(a, "enc.l1", 3, 4);
  nn::LayerNorm n1(a, "enc.ln", 4);
  const std::string path = "test_ckpt.bin";
  nn::save_checkpoint(a, path, 0xabcdef1234ULL);

  nn::ParamStore b(99);  // different seed -> different init
  nn::Linear l2(b, "enc.l1", 3, 4);
  nn::LayerNorm n2(b, "enc.ln", 4);
  const std::uint64_t h = nn::load_checkpoint(b, path);
  REQUIRE(h == 0xabcdef1234ULL);
  REQUIRE(a.snapshot() == b.snapshot());

  nn::ParamStore c(1);
  nn::Linear l3(c, "enc.l1", 3, 5);  // wrong shape
  nn::LayerNorm n3(c, "enc.ln", 5);
  REQUIRE_THROWS_AS(nn::load_checkpoint(c, path), ConfigError);
  std::remove(path.c_str());
}
