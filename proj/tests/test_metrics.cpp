#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "zymflow/metrics.hpp"
#include "zymflow/rng.hpp"

using namespace zymflow;

namespace {

std::vector<Vec3> random_points(Rng& rng, int n, double scale = 3.0) {
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i)
    pts.push_back({rng.normal() * scale, rng.normal() * scale, rng.normal() * scale});
  return pts;
}

Mat3 euler_zyz(double a, double b, double c) {
  const Rotation rz1 = so3_exp({0, 0, a});
  const Rotation ry = so3_exp({0, b, 0});
  const Rotation rz2 = so3_exp({0, 0, c});
  return (rz1 * ry * rz2).m;
}

}  // namespace

TEST_CASE("kabsch on identical and rigidly moved point sets", "[metrics]") {
  Rng rng(3);
  const auto p = random_points(rng, 8);
  const KabschResult self = kabsch_align(p, p);
  REQUIRE(self.rmsd < 1e-9);
  REQUIRE(self.rotation.orthonormality_error() < 1e-9);
  double ident_diff = 0.0;
  for (int k = 0; k < 9; ++k)
    ident_diff = std::max(ident_diff,
                          std::abs(self.rotation.m.m[k] - Mat3::identity().m[k]));
  REQUIRE(ident_diff < 1e-8);

  for (int trial = 0; trial < 10; ++trial) {
    const Rotation g = uniform_rotation(rng);
    const Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    std::vector<Vec3> q;
    for (const auto& x : p) q.push_back(g * x + d);
    const KabschResult k = kabsch_align(p, q);
    REQUIRE(k.rmsd < 1e-8);
    double diff = 0.0;
    for (int e = 0; e < 9; ++e)
      diff = std::max(diff, std::abs(k.rotation.m.m[e] - g.m.m[e]));
    REQUIRE(diff < 1e-8);
  }
}

TEST_CASE("kabsch rmsd is a lower bound over a rotation grid", "[metrics]") {
  Rng rng(5);
  const auto p = random_points(rng, 5, 2.0);
  std::vector<Vec3> q = random_points(rng, 5, 2.0);
  const KabschResult best = kabsch_align(p, q);

  Vec3 pc{0, 0, 0}, qc{0, 0, 0};
  for (int i = 0; i < 5; ++i) { pc += p[i]; qc += q[i]; }
  pc = pc / 5;
  qc = qc / 5;
  double max_radius = 0.0;
  for (const auto& x : p) max_radius = std::max(max_radius, (x - pc).norm());

  const double step = 4.0 * M_PI / 180.0;
  double grid_best = 1e300;
  for (double a = 0; a < 2 * M_PI; a += step)
    for (double b = 0; b <= M_PI + 1e-9; b += step)
      for (double c = 0; c < 2 * M_PI; c += step) {
        const Mat3 r = euler_zyz(a, b, c);
        double ss = 0.0;
        for (int i = 0; i < 5; ++i) {
          // Optimal translation for a fixed rotation matches the centroids.
          const Vec3 res = r * (p[i] - pc) - (q[i] - qc);
          ss += res.norm2();
        }
        grid_best = std::min(grid_best, std::sqrt(ss / 5));
      }
  REQUIRE(grid_best >= best.rmsd - 1e-9);
  // Any grid rotation is within ~3 steps of the optimum.
  REQUIRE(grid_best - best.rmsd < 3.0 * step * max_radius);
}

TEST_CASE("kabsch rejects degenerate inputs", "[metrics]") {
  std::vector<Vec3> line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  REQUIRE_THROWS_AS(kabsch_align(line, line), DegenerateGeometryError);
  std::vector<Vec3> two{{0, 0, 0}, {1, 0, 0}};
  REQUIRE_THROWS_AS(kabsch_align(two, two), DegenerateGeometryError);
}

TEST_CASE("kabsch rmsd is invariant to common rigid motion", "[metrics]") {
  Rng rng(7);
  const auto p = random_points(rng, 10);
  auto q = random_points(rng, 10);
  const double base = kabsch_align(p, q).rmsd;
  const Rotation g = uniform_rotation(rng);
  const Vec3 d{rng.normal(), rng.normal(), rng.normal()};
  std::vector<Vec3> p2, q2;
  for (int i = 0; i < 10; ++i) {
    p2.push_back(g * p[i] + d);
    q2.push_back(g * q[i] + d);
  }
  REQUIRE(std::abs(kabsch_align(p2, q2).rmsd - base) < 1e-9);
}

TEST_CASE("tm-score basics", "[metrics]") {
  REQUIRE(std::abs(tm_d0(32) - 1.3884) < 1e-3);
  REQUIRE_THROWS_AS(tm_d0(15), NumericError);

  Rng rng(11);
  const auto p = random_points(rng, 32, 5.0);
  REQUIRE(std::abs(tm_score(p, p) - 1.0) < 1e-12);

  // Large residuals that survive superposition push TM toward zero.
  const double d0 = tm_d0(32);
  std::vector<Vec3> q;
  for (const auto& x : p)
    q.push_back(x + Vec3{rng.normal(), rng.normal(), rng.normal()} * (100.0 * d0));
  REQUIRE(tm_score(p, q) < 0.001);
}

TEST_CASE("tm-score matches the per-distance formula", "[metrics]") {
  Rng rng(13);
  const auto p = random_points(rng, 20, 4.0);
  std::vector<Vec3> q;
  for (const auto& x : p)
    q.push_back(x + Vec3{rng.normal(), rng.normal(), rng.normal()} * 1.5);
  const KabschResult k = kabsch_align(p, q);
  const double d0 = tm_d0(20);
  double expected = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double d = (k.rotation * p[i] + k.translation - q[i]).norm();
    expected += 1.0 / (1.0 + (d / d0) * (d / d0));
  }
  expected /= 20;
  REQUIRE(std::abs(tm_score(p, q) - expected) < 1e-12);
}

TEST_CASE("tm-score decreases along a displacement ladder", "[metrics]") {
  Rng rng(17);
  const auto p = random_points(rng, 24, 4.0);
  std::vector<Vec3> noise = random_points(rng, 24, 1.0);
  double last = 1.1;
  for (double scale : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    std::vector<Vec3> q;
    for (int i = 0; i < 24; ++i) q.push_back(p[i] + noise[i] * scale);
    const double tm = tm_score(p, q);
    REQUIRE(tm < last);
    last = tm;
  }
}

TEST_CASE("amino-acid recovery", "[metrics]") {
  REQUIRE(aar({1, 2, 3}, {1, 2, 3}) == 1.0);
  REQUIRE(aar({4, 5, 6}, {1, 2, 3}) == 0.0);
  REQUIRE(aar({1, 2, 3, 4}, {1, 2, 3, 9}) == 0.75);
  REQUIRE_THROWS_AS(aar({1}, {1, 2}), ShapeError);
}

TEST_CASE("ec metrics on perfect and constant predictors", "[metrics]") {
  const std::vector<int> truth{1, 2, 3, 4, 5, 6, 7};
  const EcMetrics perfect = ec_metrics(truth, truth);
  REQUIRE(perfect.accuracy == 1.0);
  REQUIRE(perfect.precision == 1.0);
  REQUIRE(perfect.recall == 1.0);
  REQUIRE(perfect.f1 == 1.0);

  // Balanced two-class fixture, constant predictor.
  std::vector<int> bal_truth, bal_pred;
  for (int i = 0; i < 10; ++i) { bal_truth.push_back(1); bal_pred.push_back(1); }
  for (int i = 0; i < 10; ++i) { bal_truth.push_back(2); bal_pred.push_back(1); }
  const EcMetrics constant = ec_metrics(bal_pred, bal_truth);
  REQUIRE(constant.accuracy == 0.5);
  REQUIRE(std::abs(constant.f1 - 1.0 / 3.0) < 1e-12);
  REQUIRE(std::abs(constant.precision - 0.25) < 1e-12);
  REQUIRE(std::abs(constant.recall - 0.5) < 1e-12);
}

TEST_CASE("top-k aggregation", "[metrics]") {
  // Single sample per group: top1 = topk = median.
  const TopkAggregate single = aggregate_topk({{2.5}}, 10, true);
  REQUIRE(single.top1 == 2.5);
  REQUIRE(single.topk == 2.5);
  REQUIRE(single.median == 2.5);
  REQUIRE(single.clipped_groups == 1);

  // 1..10 minimizing: best 1, top-10 mean 5.5, median 5.5.
  std::vector<double> ten;
  for (int i = 1; i <= 10; ++i) ten.push_back(i);
  const TopkAggregate t = aggregate_topk({ten}, 10, true);
  REQUIRE(t.top1 == 1.0);
  REQUIRE(t.topk == 5.5);
  REQUIRE(t.median == 5.5);
  REQUIRE(t.clipped_groups == 0);

  // Two-reaction fixture against a hand aggregation (maximizing).
  const std::vector<std::vector<double>> groups{{0.2, 0.8, 0.5}, {0.1, 0.9}};
  const TopkAggregate m = aggregate_topk(groups, 2, false);
  REQUIRE(std::abs(m.top1 - (0.8 + 0.9) / 2) < 1e-12);
  REQUIRE(std::abs(m.topk - ((0.8 + 0.5) / 2 + (0.9 + 0.1) / 2) / 2) < 1e-12);
  REQUIRE(std::abs(m.median - (0.5 + 0.5) / 2) < 1e-12);
  REQUIRE_THROWS_AS(aggregate_topk({}, 1, true), ShapeError);
}
