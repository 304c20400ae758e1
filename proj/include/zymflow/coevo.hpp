#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "zymflow/discrete.hpp"
#include "zymflow/errors.hpp"
#include "zymflow/nn.hpp"
#include "zymflow/tensor.hpp"

namespace zymflow {

// ---------------------------------------------------------------------------
// Vocabulary: a joint 64-character table over aligned enzyme sequences and
// reaction strings. The mask state lives in the discrete-flow layer, not in
// this table. Version 1 is the normative table shipped with the repo.

inline constexpr int kCoevoVocabSize = 64;
inline constexpr int kCoevoVocabVersion = 1;

class CoEvoVocabulary {
 public:
  CoEvoVocabulary() {
    // 20 amino acids, the alignment gap, 41 reaction-string characters
    // (organic-subset element letters, digits, bond/ring/branch/charge/
    // stereo punctuation and the reaction arrow), separator, pad.
    const std::string symbols =
        "ACDEFGHIKLMNPQRSTVWY"   // 0..19  amino acids
        "-"                      // 20     alignment gap
        "abcdegilnoprstuz"       // 21..36 element letters (lowercase)
        "0123456789"             // 37..46 digits
        "=#()[]+./\\@:%*>"       // 47..61 punctuation and reaction arrow
        "|"                      // 62     enzyme/reaction separator
        "_";                     // 63     pad
    for (int i = 0; i < kCoevoVocabSize; ++i) {
      index_of_[symbols[i]] = i;
      symbol_of_.push_back(symbols[i]);
    }
  }

  int index(char symbol) const {
    auto it = index_of_.find(symbol);
    if (it == index_of_.end())
      throw VocabularyError(std::string("character not in vocabulary: '") +
                            symbol + "'");
    return it->second;
  }
  bool contains(char symbol) const { return index_of_.count(symbol) > 0; }
  char symbol(int idx) const { return symbol_of_.at(idx); }

  char separator() const { return '|'; }
  char pad() const { return '_'; }
  char gap() const { return '-'; }
  int pad_index() const { return kCoevoVocabSize - 1; }

  // One "<index> <symbol>" line per entry after a version header.
  void write_table(std::ostream& out) const {
    out << "coevo_vocab_version " << kCoevoVocabVersion << "\n";
    for (int i = 0; i < kCoevoVocabSize; ++i)
      out << i << " " << symbol_of_[i] << "\n";
  }

 private:
  std::map<char, int> index_of_;
  std::vector<char> symbol_of_;
};

// ---------------------------------------------------------------------------
// Tokenized grid

struct CoEvoMatrix {
  int n_msa = 0;
  int n_token = 0;
  std::vector<int> tokens;      // n_msa * n_token, values in 0..64 (64 = mask)
  std::vector<double> row_mask;   // n_msa, 1.0 for real rows
  std::vector<double> cell_mask;  // n_msa * n_token, 1.0 for real cells

  int& at(int m, int n) { return tokens[m * n_token + n]; }
  int at(int m, int n) const { return tokens[m * n_token + n]; }
  double mask_at(int m, int n) const { return cell_mask[m * n_token + n]; }
};

// Row m of the grid is enzyme_rows[m] + separator + reaction_rows[m],
// truncated or padded to n_token. Pad cells are masked out.
inline CoEvoMatrix tokenize_coevolution(const std::vector<std::string>& enzyme_rows,
                                        const std::vector<std::string>& reaction_rows,
                                        const CoEvoVocabulary& vocab,
                                        int n_token) {
  if (enzyme_rows.empty() || reaction_rows.empty())
    throw ConfigError("tokenize: empty alignment");
  if (enzyme_rows.size() != reaction_rows.size())
    throw ConfigError("tokenize: enzyme and reaction alignments have different depth");
  CoEvoMatrix u;
  u.n_msa = static_cast<int>(enzyme_rows.size());
  u.n_token = n_token;
  u.tokens.assign(static_cast<std::size_t>(u.n_msa) * n_token, vocab.pad_index());
  u.row_mask.assign(u.n_msa, 1.0);
  u.cell_mask.assign(u.tokens.size(), 0.0);
  for (int m = 0; m < u.n_msa; ++m) {
    const std::string row =
        enzyme_rows[m] + vocab.separator() + reaction_rows[m];
    const int len = std::min<int>(n_token, static_cast<int>(row.size()));
    for (int n = 0; n < len; ++n) {
      u.at(m, n) = vocab.index(row[n]);
      u.cell_mask[m * n_token + n] = 1.0;
    }
  }
  return u;
}

// Inverse of tokenization for real (unpadded, unmasked) cells of one row.
inline std::string detokenize_row(const CoEvoMatrix& u, int row,
                                  const CoEvoVocabulary& vocab) {
  std::string out;
  for (int n = 0; n < u.n_token; ++n)
    if (u.mask_at(row, n) > 0.0) out += vocab.symbol(u.at(row, n));
  return out;
}

// MSA file: enzyme block, blank line, reaction block; one aligned row per line.
inline void parse_msa_file(std::istream& in, std::vector<std::string>& enzyme_rows,
                           std::vector<std::string>& reaction_rows) {
  enzyme_rows.clear();
  reaction_rows.clear();
  std::string line;
  bool in_reactions = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      if (!enzyme_rows.empty()) in_reactions = true;
      continue;
    }
    (in_reactions ? reaction_rows : enzyme_rows).push_back(line);
  }
}

inline void load_msa_file(const std::string& path,
                          std::vector<std::string>& enzyme_rows,
                          std::vector<std::string>& reaction_rows) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open MSA file: " + path);
  parse_msa_file(in, enzyme_rows, reaction_rows);
}

// ---------------------------------------------------------------------------
// coEvoFormer: per-row token embedding with sinusoidal positions, a per-row
// transformer encoder, then attention across the MSA depth per token column,
// then attention across tokens per row. Masked cells contribute zero.

struct CoEvoFormerConfig {
  int depth = 32;        // embedding width
  int heads = 4;
  int ff = 32;           // encoder feed-forward width
  int encoder_layers = 1;
  int max_len = 5000;
};

// Interleaved sin/cos positional table, [n, depth].
inline ad::Tensor sinusoidal_positions(int n, int depth, int max_base = 10000) {
  std::vector<double> pe(static_cast<std::size_t>(n) * depth, 0.0);
  for (int pos = 0; pos < n; ++pos)
    for (int k = 0; 2 * k < depth; ++k) {
      const double div = std::exp(2.0 * k * -(std::log(static_cast<double>(max_base)) / depth));
      pe[pos * depth + 2 * k] = std::sin(pos * div);
      if (2 * k + 1 < depth) pe[pos * depth + 2 * k + 1] = std::cos(pos * div);
    }
  return ad::Tensor::constant({n, depth}, std::move(pe));
}

class CoEvoFormer {
 public:
  CoEvoFormer() = default;
  CoEvoFormer(nn::ParamStore& ps, const std::string& prefix,
              const CoEvoFormerConfig& cfg)
      : cfg_(cfg) {
    lut_ = ps.create(prefix + ".embed.lut", {kCoevoVocabSize + 1, cfg.depth},
                     nn::Init::kXavierUniform);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
      const std::string p = prefix + ".enc" + std::to_string(l);
      layers_.push_back(EncoderLayer{
          nn::LayerNorm(ps, p + ".norm1", cfg.depth),
          nn::MultiHeadAttention(ps, p + ".attn", cfg.heads, cfg.depth),
          nn::LayerNorm(ps, p + ".norm2", cfg.depth),
          nn::Linear(ps, p + ".ff.w1", cfg.depth, cfg.ff),
          nn::Linear(ps, p + ".ff.w2", cfg.ff, cfg.depth)});
    }
    final_ln_ = nn::LayerNorm(ps, prefix + ".enc_ln", cfg.depth);
    col_attn_ = nn::MultiHeadAttention(ps, prefix + ".col_attn", cfg.heads, cfg.depth);
    row_attn_ = nn::MultiHeadAttention(ps, prefix + ".row_attn", cfg.heads, cfg.depth);
  }

  const CoEvoFormerConfig& config() const { return cfg_; }

  // u: tokens in 0..64 (64 = flow mask state); returns [n_msa, n_token, depth].
  ad::Tensor encode(const CoEvoMatrix& u) const {
    const int n_msa = u.n_msa, n_token = u.n_token, d = cfg_.depth;
    if (n_msa <= 0 || n_token <= 0)
      throw ShapeError("coevoformer: empty grid");

    // Token embedding, scaled, plus positions along the token axis.
    ad::Tensor emb = ad::embedding(lut_, u.tokens);  // [n_msa*n_token, d]
    emb = ad::scale(emb, std::sqrt(static_cast<double>(d)));
    emb = ad::reshape(emb, {n_msa, n_token, d});
    emb = ad::add(emb, ad::reshape(sinusoidal_positions(n_token, d, cfg_.max_len),
                                   {1, n_token, d}));

    // Per-row encoder over tokens, excluding padded/invalid cells.
    const ad::Tensor row_bias = row_bias_tensor(u);  // [n_msa, n_token, n_token]
    for (const auto& layer : layers_) {
      ad::Tensor h = layer.norm1(emb);
      emb = ad::add(emb, layer.attn.batched(h, h, &row_bias));
      ad::Tensor g = layer.norm2(emb);
      emb = ad::add(emb, layer.ff2(ad::silu(layer.ff1(g))));
    }
    emb = final_ln_(emb);

    // Column attention across the MSA depth (no positions along depth).
    const ad::Tensor col_bias = col_bias_tensor(u);
    ad::Tensor cols = ad::permute3(emb, 1, 0, 2);  // [n_token, n_msa, d]
    cols = col_attn_.batched(cols, cols, &col_bias);
    emb = ad::permute3(cols, 1, 0, 2);

    // Row attention across tokens.
    emb = row_attn_.batched(emb, emb, &row_bias);

    // Masked cells contribute zero downstream.
    return ad::mul(emb, ad::Tensor::constant({n_msa, n_token, 1}, u.cell_mask));
  }

 private:
  struct EncoderLayer {
    nn::LayerNorm norm1;
    nn::MultiHeadAttention attn;
    nn::LayerNorm norm2;
    nn::Linear ff1, ff2;
  };

  static ad::Tensor row_bias_tensor(const CoEvoMatrix& u) {
    std::vector<double> bias(static_cast<std::size_t>(u.n_msa) * u.n_token * u.n_token);
    for (int m = 0; m < u.n_msa; ++m)
      for (int i = 0; i < u.n_token; ++i)
        for (int j = 0; j < u.n_token; ++j)
          bias[(static_cast<std::size_t>(m) * u.n_token + i) * u.n_token + j] =
              (u.mask_at(m, i) > 0 && u.mask_at(m, j) > 0) ? 0.0 : -1e9;
    return ad::Tensor::constant({u.n_msa, u.n_token, u.n_token}, std::move(bias));
  }

  static ad::Tensor col_bias_tensor(const CoEvoMatrix& u) {
    std::vector<double> bias(static_cast<std::size_t>(u.n_token) * u.n_msa * u.n_msa);
    for (int n = 0; n < u.n_token; ++n)
      for (int i = 0; i < u.n_msa; ++i)
        for (int j = 0; j < u.n_msa; ++j)
          bias[(static_cast<std::size_t>(n) * u.n_msa + i) * u.n_msa + j] =
              (u.mask_at(i, n) > 0 && u.mask_at(j, n) > 0) ? 0.0 : -1e9;
    return ad::Tensor::constant({u.n_token, u.n_msa, u.n_msa}, std::move(bias));
  }

  CoEvoFormerConfig cfg_;
  ad::Tensor lut_;
  std::vector<EncoderLayer> layers_;
  nn::LayerNorm final_ln_;
  nn::MultiHeadAttention col_attn_, row_attn_;
};

}  // namespace zymflow
