#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "zymflow/coevo.hpp"

using namespace zymflow;

#ifndef ZYMFLOW_SOURCE_DIR
#define ZYMFLOW_SOURCE_DIR "."
#endif

namespace {

CoEvoMatrix random_grid(Rng& rng, int n_msa, int n_token, double mask_frac) {
  CoEvoMatrix u;
  u.n_msa = n_msa;
  u.n_token = n_token;
  u.tokens.resize(static_cast<std::size_t>(n_msa) * n_token);
  u.row_mask.assign(n_msa, 1.0);
  u.cell_mask.assign(u.tokens.size(), 1.0);
  for (auto& t : u.tokens)
    t = rng.uniform() < mask_frac ? kCoevoVocabSize : rng.uniform_int(kCoevoVocabSize);
  return u;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("vocabulary is a 64-symbol bijection", "[coevo]") {
  CoEvoVocabulary vocab;
  std::vector<bool> seen(kCoevoVocabSize, false);
  for (int i = 0; i < kCoevoVocabSize; ++i) {
    const char s = vocab.symbol(i);
    REQUIRE(vocab.index(s) == i);
    REQUIRE_FALSE(seen[i]);
    seen[i] = true;
  }
  REQUIRE(vocab.index('A') == 0);
  REQUIRE(vocab.index(vocab.gap()) == 20);
  REQUIRE(vocab.index(vocab.separator()) == 62);
  REQUIRE(vocab.pad_index() == 63);
  REQUIRE_THROWS_AS(vocab.index('!'), VocabularyError);
}

TEST_CASE("shipped vocabulary table matches the built-in one", "[coevo]") {
  CoEvoVocabulary vocab;
  std::ostringstream builtin;
  vocab.write_table(builtin);
  std::ifstream asset(std::string(ZYMFLOW_SOURCE_DIR) + "/assets/coevo_vocab.txt");
  REQUIRE(asset.good());
  std::stringstream shipped;
  shipped << asset.rdbuf();
  REQUIRE(shipped.str() == builtin.str());
}

TEST_CASE("tokenize: single row with separator and pad", "[coevo]") {
  CoEvoVocabulary vocab;
  const CoEvoMatrix u = tokenize_coevolution({"AC"}, {"co"}, vocab, 6);
  REQUIRE(u.n_msa == 1);
  REQUIRE(u.n_token == 6);
  // "AC|co" -> 5 real tokens + 1 pad
  REQUIRE(u.at(0, 0) == vocab.index('A'));
  REQUIRE(u.at(0, 1) == vocab.index('C'));
  REQUIRE(u.at(0, 2) == vocab.index('|'));
  REQUIRE(u.at(0, 3) == vocab.index('c'));
  REQUIRE(u.at(0, 4) == vocab.index('o'));
  REQUIRE(u.at(0, 5) == vocab.pad_index());
  int real = 0;
  for (double m : u.cell_mask) real += m > 0 ? 1 : 0;
  REQUIRE(real == 5);
}

TEST_CASE("tokenize: errors and truncation", "[coevo]") {
  CoEvoVocabulary vocab;
  REQUIRE_THROWS_AS(tokenize_coevolution({"AC"}, {}, vocab, 8), ConfigError);
  REQUIRE_THROWS_AS(tokenize_coevolution({}, {}, vocab, 8), ConfigError);
  REQUIRE_THROWS_AS(tokenize_coevolution({"A!"}, {"cc"}, vocab, 8), VocabularyError);
  // Combined length 10 truncated to exactly 8 tokens, no pad.
  const CoEvoMatrix u = tokenize_coevolution({"ACDEF"}, {"ccoo"}, vocab, 8);
  for (int n = 0; n < 8; ++n) REQUIRE(u.mask_at(0, n) > 0);
}

TEST_CASE("tokenize -> detokenize identity on short rows", "[coevo]") {
  CoEvoVocabulary vocab;
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    std::string enz, rxn;
    const int ne = 1 + rng.uniform_int(10), nr = 1 + rng.uniform_int(10);
    for (int i = 0; i < ne; ++i) enz += vocab.symbol(rng.uniform_int(21));
    for (int i = 0; i < nr; ++i) rxn += vocab.symbol(21 + rng.uniform_int(41));
    const CoEvoMatrix u = tokenize_coevolution({enz}, {rxn}, vocab, 32);
    REQUIRE(detokenize_row(u, 0, vocab) == enz + "|" + rxn);
  }
}

TEST_CASE("msa file parsing splits enzyme and reaction blocks", "[coevo]") {
  std::istringstream in("ACD-\nACDE\n\ncco>o\ncc->o\n");
  std::vector<std::string> enz, rxn;
  parse_msa_file(in, enz, rxn);
  REQUIRE(enz == std::vector<std::string>{"ACD-", "ACDE"});
  REQUIRE(rxn == std::vector<std::string>{"cco>o", "cc->o"});
}

TEST_CASE("coevoformer: single-row depth attention stays finite", "[coevo]") {
  nn::ParamStore ps(5);
  CoEvoFormerConfig cfg;
  cfg.depth = 16;
  cfg.ff = 16;
  CoEvoFormer former(ps, "coevo", cfg);
  Rng rng(1);
  const CoEvoMatrix u = random_grid(rng, 1, 12, 0.3);
  const ad::Tensor out = former.encode(u);
  REQUIRE(out.shape() == ad::Shape{1, 12, 16});
  for (double v : out.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("coevoformer: permuting MSA rows permutes outputs", "[coevo]") {
  nn::ParamStore ps(6);
  CoEvoFormerConfig cfg;
  cfg.depth = 16;
  cfg.ff = 16;
  CoEvoFormer former(ps, "coevo", cfg);
  Rng rng(2);
  const int n_msa = 4, n_token = 10;
  const CoEvoMatrix u = random_grid(rng, n_msa, n_token, 0.25);
  const ad::Tensor base = former.encode(u);

  const std::vector<int> perm{2, 0, 3, 1};
  CoEvoMatrix v = u;
  for (int m = 0; m < n_msa; ++m)
    for (int n = 0; n < n_token; ++n) v.at(m, n) = u.at(perm[m], n);
  const ad::Tensor permuted = former.encode(v);

  for (int m = 0; m < n_msa; ++m)
    for (int n = 0; n < n_token; ++n)
      for (int d = 0; d < cfg.depth; ++d) {
        const double a = permuted.values()[(m * n_token + n) * cfg.depth + d];
        const double b = base.values()[(perm[m] * n_token + n) * cfg.depth + d];
        REQUIRE(std::abs(a - b) < 1e-6);
      }
}

TEST_CASE("coevoformer: all-masked grid maps to zero", "[coevo]") {
  nn::ParamStore ps(7);
  CoEvoFormerConfig cfg;
  cfg.depth = 16;
  cfg.ff = 16;
  CoEvoFormer former(ps, "coevo", cfg);
  Rng rng(3);
  CoEvoMatrix u = random_grid(rng, 3, 8, 0.0);
  std::fill(u.cell_mask.begin(), u.cell_mask.end(), 0.0);
  const ad::Tensor out = former.encode(u);
  for (double v : out.values()) REQUIRE(v == 0.0);
}

TEST_CASE("coevoformer: padded cells never influence real outputs", "[coevo]") {
  nn::ParamStore ps(8);
  CoEvoFormerConfig cfg;
  cfg.depth = 16;
  cfg.ff = 16;
  CoEvoFormer former(ps, "coevo", cfg);
  Rng rng(4);
  CoEvoMatrix u = random_grid(rng, 3, 9, 0.2);
  u.cell_mask[1 * 9 + 4] = 0.0;
  u.cell_mask[2 * 9 + 8] = 0.0;
  const ad::Tensor base = former.encode(u);
  CoEvoMatrix v = u;
  v.at(1, 4) = (u.at(1, 4) + 17) % kCoevoVocabSize;
  v.at(2, 8) = (u.at(2, 8) + 5) % kCoevoVocabSize;
  const ad::Tensor poked = former.encode(v);
  REQUIRE(max_abs_diff(base.values(), poked.values()) < 1e-12);
}

TEST_CASE("coevoformer outputs are finite over random configs", "[coevo]") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    nn::ParamStore ps(100 + trial);
    CoEvoFormerConfig cfg;
    cfg.depth = 8;
    cfg.ff = 8;
    cfg.heads = 2;
    CoEvoFormer former(ps, "coevo", cfg);
    const int n_msa = 1 + rng.uniform_int(4);
    const int n_token = 2 + rng.uniform_int(12);
    const CoEvoMatrix u = random_grid(rng, n_msa, n_token, rng.uniform() * 0.9);
    const ad::Tensor out = former.encode(u);
    for (double v : out.values()) REQUIRE(std::isfinite(v));
  }
}
