#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "test_support.hpp"
#include "zymflow/flow.hpp"

using namespace zymflow;
using zymflow::testing::tiny_config;
using zymflow::testing::tiny_records;

TEST_CASE("corrupt_sample at the endpoints", "[flow]") {
  auto records = tiny_records(51, 1, 6, 2, 20);
  const EnzymeReactionRecord& rec = records[0];

  Rng rng1(1);
  const FlowState at_one = corrupt_sample(rec, 1.0, rng1);
  for (int i = 0; i < rec.pocket.size(); ++i) {
    REQUIRE((at_one.frames[i].x - rec.pocket.residues[i].x).norm() < 1e-12);
    double diff = 0.0;
    for (int k = 0; k < 9; ++k)
      diff = std::max(diff, std::abs(at_one.frames[i].r.m.m[k] -
                                     rec.pocket.residues[i].r.m.m[k]));
    REQUIRE(diff < 1e-9);
    REQUIRE(at_one.aatypes[i] == rec.pocket.residues[i].aa);
  }
  REQUIRE(at_one.ec == rec.ec);
  REQUIRE(at_one.coevo.tokens == rec.coevo.tokens);
  REQUIRE(at_one.x0.size() == static_cast<std::size_t>(rec.pocket.size()));

  Rng rng0(2);
  const FlowState at_zero = corrupt_sample(rec, 0.0, rng0);
  for (int i = 0; i < rec.pocket.size(); ++i) {
    REQUIRE((at_zero.frames[i].x - at_zero.x0[i]).norm() < 1e-12);
    double diff = 0.0;
    for (int k = 0; k < 9; ++k)
      diff = std::max(diff, std::abs(at_zero.frames[i].r.m.m[k] -
                                     at_zero.r0[i].m.m[k]));
    REQUIRE(diff < 1e-12);
    REQUIRE(at_zero.aatypes[i] == kAminoMask);
  }
  REQUIRE(at_zero.ec == DiscreteSpace::ec_classes().mask_index());
  for (std::size_t c = 0; c < at_zero.coevo.tokens.size(); ++c)
    if (at_zero.coevo.cell_mask[c] > 0)
      REQUIRE(at_zero.coevo.tokens[c] == kCoevoVocabSize);

  Rng rng3(3);
  REQUIRE_THROWS_AS(corrupt_sample(rec, 1.5, rng3), DomainError);
}

TEST_CASE("corrupt_sample unmasked fraction tracks t", "[flow]") {
  auto records = tiny_records(52, 1, 32, 2, 20);
  const EnzymeReactionRecord& rec = records[0];
  const double t = 0.5;
  int unmasked = 0, total = 0;
  Rng rng(7);
  for (int draw = 0; draw < 320; ++draw) {
    const FlowState st = corrupt_sample(rec, t, rng);
    for (int aa : st.aatypes) {
      ++total;
      if (aa != kAminoMask) ++unmasked;
    }
  }
  const double frac = static_cast<double>(unmasked) / total;
  const double sigma = std::sqrt(t * (1 - t) / total);
  REQUIRE(std::abs(frac - t) < 3.0 * sigma);
}

TEST_CASE("train_stage with zero learning rate keeps parameters", "[flow]") {
  auto records = tiny_records(53, 2, 6, 2, 20);
  Network net(tiny_config(), 77);
  const auto before = net.params().snapshot();
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.lr = 0.0;
  cfg.stage = Stage::kEnzyme;
  train_stage(net, cfg, records);
  REQUIRE(net.params().snapshot() == before);
}

TEST_CASE("train_stage is deterministic per seed", "[flow]") {
  auto records = tiny_records(54, 2, 6, 2, 20);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.seed = 123;
  cfg.stage = Stage::kEnzyme;

  Network a(tiny_config(), 42);
  const auto log_a = train_stage(a, cfg, records);
  Network b(tiny_config(), 42);
  const auto log_b = train_stage(b, cfg, records);
  REQUIRE(log_a.size() == log_b.size());
  for (std::size_t s = 0; s < log_a.size(); ++s)
    REQUIRE(log_a[s].loss.total == log_b[s].loss.total);
  REQUIRE(a.params().snapshot() == b.params().snapshot());
}

TEST_CASE("train_stage reduces the loss on a tiny dataset", "[flow]") {
  auto records = tiny_records(55, 1, 6, 2, 20);
  Network net(tiny_config(), 7);
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.seed = 5;
  cfg.stage = Stage::kEnzyme;
  const auto log = train_stage(net, cfg, records);
  double early = 0.0, late = 0.0;
  for (int s = 0; s < 5; ++s) early += log[s].loss.total;
  for (int s = 55; s < 60; ++s) late += log[s].loss.total;
  REQUIRE(late < 0.8 * early);
}

TEST_CASE("train_stage validates the stage against the dataset", "[flow]") {
  auto records = tiny_records(56, 1, 6, 2, 20);
  records[0].affinity.reset();
  Network net(tiny_config(), 8);
  TrainConfig cfg;
  cfg.stage = Stage::kLigand;
  cfg.steps = 1;
  REQUIRE_THROWS_AS(train_stage(net, cfg, records), ConfigError);
}

TEST_CASE("gradcheck passes on a small instance and covers all tensors", "[flow]") {
  auto records = tiny_records(57, 1, 4, 2, 16);
  Network net(tiny_config(), 11);
  GradCheckOptions opts;
  opts.entries_per_tensor = 2;
  const auto report = gradcheck(net, records[0], Stage::kEnzyme, opts);
  REQUIRE(report.size() == net.params().size());
  // Every named tensor appears exactly once.
  std::set<std::string> names;
  for (const auto& row : report) names.insert(row.name);
  REQUIRE(names.size() == report.size());
  const auto failures = gradcheck_failures(report, 1e-4);
  for (const auto& f : failures) INFO("failed: " << f);
  REQUIRE(failures.empty());
}

TEST_CASE("gradcheck flags a corrupted gradient", "[flow]") {
  std::vector<GradCheckRow> report{{"good", 4, 2e-6, 0.5, 0.5},
                                   {"bad", 4, 3e-3, 0.5, 0.6}};
  const auto failures = gradcheck_failures(report, 1e-4);
  REQUIRE(failures == std::vector<std::string>{"bad"});
}

TEST_CASE("sampler is deterministic per seed", "[flow]") {
  auto records = tiny_records(58, 1, 5, 2, 16);
  const EnzymeReactionRecord& rec = records[0];
  Network net(tiny_config(), 13);
  SampleOptions opts;
  opts.steps = 8;
  opts.seed = 99;
  opts.n_msa = 2;
  opts.n_token = 16;
  const SampleResult a = sample(net, rec.substrate, rec.product, 5, opts);
  const SampleResult b = sample(net, rec.substrate, rec.product, 5, opts);
  REQUIRE(a.ec == b.ec);
  REQUIRE(a.coevo.tokens == b.coevo.tokens);
  for (int i = 0; i < 5; ++i) {
    REQUIRE((a.pocket.residues[i].x - b.pocket.residues[i].x).norm() == 0.0);
    REQUIRE(a.pocket.residues[i].aa == b.pocket.residues[i].aa);
  }
}

TEST_CASE("sampler keeps frames orthonormal and unmasking monotone", "[flow]") {
  auto records = tiny_records(59, 1, 5, 2, 16);
  const EnzymeReactionRecord& rec = records[0];
  Network net(tiny_config(), 17);
  SampleOptions opts;
  opts.steps = 12;
  opts.seed = 3;
  opts.n_msa = 2;
  opts.n_token = 16;
  opts.record_trajectory = true;
  const SampleResult res = sample(net, rec.substrate, rec.product, 5, opts);
  REQUIRE(res.trajectory.size() == 12);
  std::vector<int> last_aa(5, kAminoMask);
  for (const Pocket& snap : res.trajectory) {
    for (int i = 0; i < 5; ++i) {
      REQUIRE(snap.residues[i].r.orthonormality_error() < 1e-8);
      // A site that left mask never changes again.
      if (last_aa[i] != kAminoMask) REQUIRE(snap.residues[i].aa == last_aa[i]);
      last_aa[i] = snap.residues[i].aa;
    }
  }
  // The final state carries no masks anywhere.
  for (const auto& f : res.pocket.residues) REQUIRE(f.aa != kAminoMask);
  REQUIRE(res.ec != DiscreteSpace::ec_classes().mask_index());
  for (int tok : res.coevo.tokens) REQUIRE(tok != kCoevoVocabSize);
}

TEST_CASE("sampler output transforms rigidly with substrate and priors", "[flow]") {
  auto records = tiny_records(60, 1, 5, 2, 16);
  const EnzymeReactionRecord& rec = records[0];
  Network net(tiny_config(), 19);
  SampleOptions opts;
  opts.steps = 8;
  opts.seed = 21;
  opts.n_msa = 2;
  opts.n_token = 16;
  const SampleResult base = sample(net, rec.substrate, rec.product, 5, opts);

  Rng rng(5);
  for (int trial = 0; trial < 2; ++trial) {
    const Rotation g = uniform_rotation(rng);
    const Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    Molecule3D sub = rec.substrate;
    for (auto& c : sub.coords) c = g * c + d;
    SampleOptions moved = opts;
    moved.init_trans = std::vector<Vec3>();
    moved.init_rot = std::vector<Rotation>();
    for (int i = 0; i < 5; ++i) {
      moved.init_trans->push_back(g * base.prior_trans[i] + d);
      moved.init_rot->push_back(g * base.prior_rot[i]);
    }
    const SampleResult out = sample(net, sub, rec.product, 5, moved);
    REQUIRE(out.ec == base.ec);
    REQUIRE(out.coevo.tokens == base.coevo.tokens);
    for (int i = 0; i < 5; ++i) {
      REQUIRE(out.pocket.residues[i].aa == base.pocket.residues[i].aa);
      const Vec3 expect = g * base.pocket.residues[i].x + d;
      REQUIRE((out.pocket.residues[i].x - expect).norm() < 1e-5);
      const Mat3 expect_r = g.m * base.pocket.residues[i].r.m;
      double diff = 0.0;
      for (int k = 0; k < 9; ++k)
        diff = std::max(diff,
                        std::abs(out.pocket.residues[i].r.m.m[k] - expect_r.m[k]));
      REQUIRE(diff < 1e-5);
    }
  }
}

TEST_CASE("sampler validates arguments", "[flow]") {
  auto records = tiny_records(61, 1, 4, 2, 16);
  Network net(tiny_config(), 23);
  SampleOptions opts;
  opts.steps = 1;
  REQUIRE_THROWS_AS(sample(net, records[0].substrate, records[0].product, 4, opts),
                    ConfigError);
  opts.steps = 4;
  REQUIRE_THROWS_AS(sample(net, records[0].substrate, records[0].product, 0, opts),
                    ConfigError);
}
