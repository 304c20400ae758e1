#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "zymflow/coevo.hpp"
#include "zymflow/errors.hpp"
#include "zymflow/hash.hpp"
#include "zymflow/mol.hpp"
#include "zymflow/rng.hpp"
#include "zymflow/so3.hpp"

namespace zymflow {

// ---------------------------------------------------------------------------
// Structure input: a fixed-column text subset of PDB ATOM records carrying
// only N/CA/C/O atoms. Coordinates stay in Angstrom inside ProteinStructure;
// everything downstream is converted to model units.

struct StructureResidue {
  int index = 0;
  char aa_letter = 'X';
  Vec3 n, ca, c, o;  // Angstrom
  bool has_n = false, has_ca = false, has_c = false, has_o = false;
};

struct ProteinStructure {
  std::vector<StructureResidue> residues;
};

inline char three_letter_to_one(const std::string& res) {
  static const std::map<std::string, char> table = {
      {"ALA", 'A'}, {"CYS", 'C'}, {"ASP", 'D'}, {"GLU", 'E'}, {"PHE", 'F'},
      {"GLY", 'G'}, {"HIS", 'H'}, {"ILE", 'I'}, {"LYS", 'K'}, {"LEU", 'L'},
      {"MET", 'M'}, {"ASN", 'N'}, {"PRO", 'P'}, {"GLN", 'Q'}, {"ARG", 'R'},
      {"SER", 'S'}, {"THR", 'T'}, {"VAL", 'V'}, {"TRP", 'W'}, {"TYR", 'Y'}};
  auto it = table.find(res);
  if (it == table.end())
    throw IoError("unknown residue name in structure file: " + res);
  return it->second;
}

inline std::string one_letter_to_three(char aa) {
  static const std::map<char, std::string> table = {
      {'A', "ALA"}, {'C', "CYS"}, {'D', "ASP"}, {'E', "GLU"}, {'F', "PHE"},
      {'G', "GLY"}, {'H', "HIS"}, {'I', "ILE"}, {'K', "LYS"}, {'L', "LEU"},
      {'M', "MET"}, {'N', "ASN"}, {'P', "PRO"}, {'Q', "GLN"}, {'R', "ARG"},
      {'S', "SER"}, {'T', "THR"}, {'V', "VAL"}, {'W', "TRP"}, {'Y', "TYR"}};
  auto it = table.find(aa);
  return it == table.end() ? "UNK" : it->second;
}

inline ProteinStructure parse_structure(std::istream& in) {
  ProteinStructure ps;
  std::map<int, StructureResidue> by_index;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("ATOM", 0) != 0) continue;
    if (line.size() < 54) throw IoError("short ATOM record: " + line);
    std::string trimmed = line.substr(12, 4);
    trimmed.erase(trimmed.find_last_not_of(' ') + 1);
    trimmed.erase(0, trimmed.find_first_not_of(' '));
    const std::string res_name = line.substr(17, 3);
    const int res_seq = std::stoi(line.substr(22, 4));
    const Vec3 xyz{std::stod(line.substr(30, 8)), std::stod(line.substr(38, 8)),
                   std::stod(line.substr(46, 8))};
    if (!std::isfinite(xyz.x) || !std::isfinite(xyz.y) || !std::isfinite(xyz.z))
      throw IoError("non-finite coordinates in structure file");
    StructureResidue& r = by_index[res_seq];
    r.index = res_seq;
    r.aa_letter = three_letter_to_one(res_name);
    if (trimmed == "N") { r.n = xyz; r.has_n = true; }
    else if (trimmed == "CA") { r.ca = xyz; r.has_ca = true; }
    else if (trimmed == "C") { r.c = xyz; r.has_c = true; }
    else if (trimmed == "O") { r.o = xyz; r.has_o = true; }
  }
  for (auto& [idx, r] : by_index) {
    if (!(r.has_n && r.has_ca && r.has_c))
      throw IoError("residue " + std::to_string(idx) + " is missing N/CA/C");
    ps.residues.push_back(r);
  }
  return ps;  // map iteration gives strictly increasing indices
}

inline ProteinStructure load_structure(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open structure file: " + path);
  return parse_structure(in);
}

inline void write_structure(std::ostream& out, const ProteinStructure& ps) {
  int serial = 1;
  auto atom_line = [&](const char* name, const StructureResidue& r, const Vec3& p) {
    out << "ATOM  " << std::setw(5) << serial++ << " " << std::setw(4) << std::left
        << name << std::right << " " << one_letter_to_three(r.aa_letter) << " A"
        << std::setw(4) << r.index << "    " << std::fixed << std::setprecision(3)
        << std::setw(8) << p.x << std::setw(8) << p.y << std::setw(8) << p.z
        << "\n";
  };
  for (const auto& r : ps.residues) {
    atom_line("N", r, r.n);
    atom_line("CA", r, r.ca);
    atom_line("C", r, r.c);
    atom_line("O", r, r.o);
  }
}

// ---------------------------------------------------------------------------
// Pocket extraction: residues whose CA lies within the radius of any ligand
// atom, order preserved; frames from N/CA/C with CA as origin (model units).

inline Pocket extract_pocket(const ProteinStructure& protein,
                             const Molecule3D& ligand,
                             double radius_angstrom = 10.0) {
  Pocket pocket;
  for (const auto& r : protein.residues) {
    bool within = false;
    for (int a = 0; a < ligand.size(); ++a) {
      if (ligand.atom_mask[a] <= 0) continue;
      const Vec3 lig_ang = ligand.coords[a] / kCoordScale;
      if ((r.ca - lig_ang).norm() <= radius_angstrom) { within = true; break; }
    }
    if (!within) continue;
    const int aa = amino_index_from_letter(r.aa_letter);
    pocket.residues.push_back(frame_from_backbone(
        r.n * kCoordScale, r.ca * kCoordScale, r.c * kCoordScale,
        aa >= 0 ? aa : kAminoMask));
  }
  if (pocket.residues.empty())
    throw EmptyPocketError("no residue CA within the extraction radius");
  return pocket;
}

inline bool filter_min_residues(const Pocket& pocket, int min_n = 32) {
  return pocket.size() >= min_n;
}

// ---------------------------------------------------------------------------
// Sequence identity: global alignment with affine gaps (match 1, mismatch 0,
// a gap of length L costs -(1 + 0.1 L)). Among score-optimal alignments the
// one with the most matches and then the shortest alignment defines identity
// = matches / alignment length.

namespace detail_align {

// Scores in tenths keep the arithmetic exact, so co-optimal alignments tie
// break on match count and length rather than floating-point noise.
struct Cell {
  long long score = -(1LL << 60);
  int matches = -1;
  int neg_len = 0;
  bool operator<(const Cell& o) const {
    if (score != o.score) return score < o.score;
    if (matches != o.matches) return matches < o.matches;
    return neg_len < o.neg_len;
  }
  Cell step(long long ds, int dm) const {
    return {score + ds, matches + dm, neg_len - 1};
  }
};

inline Cell cell_max(const Cell& a, const Cell& b) { return a < b ? b : a; }

}  // namespace detail_align

inline void validate_protein_alphabet(const std::string& s) {
  if (s.empty()) throw VocabularyError("empty sequence");
  for (char c : s)
    if (amino_index_from_letter(c) < 0)
      throw VocabularyError(std::string("invalid amino-acid character: '") + c + "'");
}

inline double sequence_identity(const std::string& a, const std::string& b) {
  validate_protein_alphabet(a);
  validate_protein_alphabet(b);
  using detail_align::Cell;
  using detail_align::cell_max;
  // Match 1, mismatch 0, gap of length L costs 1 + 0.1 L; held in tenths.
  const long long kOpen = -10, kExt = -1, kMatch = 10;
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  // Gotoh with three lanes: M (match/mismatch), E (gap in a), F (gap in b).
  std::vector<std::vector<Cell>> M(n + 1, std::vector<Cell>(m + 1));
  auto E = M, F = M;
  M[0][0] = {0, 0, 0};
  for (int j = 1; j <= m; ++j) {
    E[0][j] = cell_max(E[0][j - 1].step(kExt, 0),
                       M[0][j - 1].step(kOpen + kExt, 0));
    M[0][j] = E[0][j];
  }
  for (int i = 1; i <= n; ++i) {
    F[i][0] = cell_max(F[i - 1][0].step(kExt, 0),
                       M[i - 1][0].step(kOpen + kExt, 0));
    M[i][0] = F[i][0];
  }
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j) {
      E[i][j] = cell_max(E[i][j - 1].step(kExt, 0),
                         M[i][j - 1].step(kOpen + kExt, 0));
      F[i][j] = cell_max(F[i - 1][j].step(kExt, 0),
                         M[i - 1][j].step(kOpen + kExt, 0));
      const bool match = a[i - 1] == b[j - 1];
      Cell diag = M[i - 1][j - 1].step(match ? kMatch : 0, match ? 1 : 0);
      M[i][j] = cell_max(diag, cell_max(E[i][j], F[i][j]));
    }
  const Cell best = M[n][m];
  const int alen = -best.neg_len;
  return alen > 0 ? static_cast<double>(best.matches) / alen : 0.0;
}

// ---------------------------------------------------------------------------
// Greedy centroid clustering: sequences in length-descending order (ties by
// original index) join the first centroid with identity >= threshold.

struct Clustering {
  std::vector<int> assignment;        // per input sequence, cluster id
  std::vector<int> centroid_indices;  // per cluster, input index of centroid
};

inline Clustering cluster_by_homology(const std::vector<std::string>& seqs,
                                      double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw ConfigError("homology threshold must be in (0,1)");
  std::vector<int> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return seqs[x].size() > seqs[y].size();
  });
  Clustering out;
  out.assignment.assign(seqs.size(), -1);
  for (int idx : order) {
    int joined = -1;
    for (std::size_t c = 0; c < out.centroid_indices.size(); ++c) {
      if (sequence_identity(seqs[idx], seqs[out.centroid_indices[c]]) >= threshold) {
        joined = static_cast<int>(c);
        break;
      }
    }
    if (joined < 0) {
      joined = static_cast<int>(out.centroid_indices.size());
      out.centroid_indices.push_back(idx);
    }
    out.assignment[idx] = joined;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and debiasing

struct EnzymeReactionRecord {
  std::string id;
  Pocket pocket;          // model units, centered at the substrate centroid
  Molecule3D substrate;   // model units, centered likewise
  Molecule2D product;
  int ec = 0;             // 0..6
  CoEvoMatrix coevo;
  std::string sequence;   // full enzyme sequence used for clustering
  std::optional<double> affinity;
};

inline std::uint64_t record_digest(const EnzymeReactionRecord& r) {
  std::ostringstream s;
  s << r.id << '\n' << r.sequence << '\n' << r.ec << '\n';
  if (r.affinity) s << *r.affinity << '\n';
  s << std::setprecision(17);
  for (const auto& f : r.pocket.residues) {
    const auto rec = frame_to_record(f);
    for (double v : rec) s << v << ' ';
    s << f.aa << '\n';
  }
  for (int a = 0; a < r.substrate.size(); ++a)
    s << r.substrate.atom_types[a] << ' ' << r.substrate.coords[a].x << ' '
      << r.substrate.coords[a].y << ' ' << r.substrate.coords[a].z << '\n';
  for (const auto& b : r.product.bonds) s << b.i << ' ' << b.j << ' ' << b.order << '\n';
  for (int tok : r.coevo.tokens) s << tok << ' ';
  return fnv1a(s.str());
}

inline std::uint64_t dataset_digest(const std::vector<EnzymeReactionRecord>& rs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : rs) {
    const std::uint64_t d = record_digest(r);
    h = fnv1a(&d, sizeof(d), h);
  }
  return h;
}

// Per-EC dataset statistics in the layout of the evaluation-data table:
// pair/enzyme/substrate/product counts plus per-class pair counts.
struct DatasetStats {
  std::string label;
  int pairs = 0;
  int enzymes = 0;
  int substrates = 0;
  double substrate_avg_atoms = 0.0;
  int products = 0;
  double product_avg_atoms = 0.0;
  std::array<int, 7> ec_counts{};
};

inline DatasetStats dataset_stats(const std::vector<EnzymeReactionRecord>& rs,
                                  const std::string& label) {
  DatasetStats st;
  st.label = label;
  st.pairs = static_cast<int>(rs.size());
  std::vector<std::string> seqs;
  std::vector<std::uint64_t> subs, prods;
  double sub_atoms = 0, prod_atoms = 0;
  for (const auto& r : rs) {
    seqs.push_back(r.sequence);
    std::ostringstream sm, pm;
    for (int a = 0; a < r.substrate.size(); ++a)
      sm << r.substrate.atom_types[a] << ',' << r.substrate.coords[a].x << ';';
    for (int t : r.product.atom_types) pm << t << ';';
    for (const auto& b : r.product.bonds) pm << b.i << '-' << b.j << ';';
    subs.push_back(fnv1a(sm.str()));
    prods.push_back(fnv1a(pm.str()));
    sub_atoms += r.substrate.size();
    prod_atoms += r.product.size();
    if (r.ec >= 0 && r.ec < 7) ++st.ec_counts[r.ec];
  }
  std::sort(seqs.begin(), seqs.end());
  st.enzymes = static_cast<int>(std::unique(seqs.begin(), seqs.end()) - seqs.begin());
  std::sort(subs.begin(), subs.end());
  st.substrates = static_cast<int>(std::unique(subs.begin(), subs.end()) - subs.begin());
  std::sort(prods.begin(), prods.end());
  st.products = static_cast<int>(std::unique(prods.begin(), prods.end()) - prods.begin());
  if (!rs.empty()) {
    st.substrate_avg_atoms = sub_atoms / rs.size();
    st.product_avg_atoms = prod_atoms / rs.size();
  }
  return st;
}

inline void write_stats_tsv(std::ostream& out, const std::vector<DatasetStats>& rows) {
  out << "data\tpairs\tenzymes\tsubstrates\tsub_avg_atoms\tproducts\tprod_avg_atoms";
  for (int c = 1; c <= 7; ++c) out << "\tec" << c << "\tec" << c << "_pct";
  out << "\n";
  for (const auto& st : rows) {
    out << st.label << '\t' << st.pairs << '\t' << st.enzymes << '\t'
        << st.substrates << '\t' << std::fixed << std::setprecision(2)
        << st.substrate_avg_atoms << '\t' << st.products << '\t'
        << st.product_avg_atoms;
    for (int c = 0; c < 7; ++c) {
      const double pct = st.pairs > 0 ? 100.0 * st.ec_counts[c] / st.pairs : 0.0;
      out << '\t' << st.ec_counts[c] << '\t' << std::setprecision(2) << pct;
    }
    out << "\n";
  }
}

// Debias: drop exact-duplicate records, cluster the distinct sequences, and
// keep every record whose sequence is its cluster's centroid sequence.
inline std::vector<EnzymeReactionRecord> debias(
    const std::vector<EnzymeReactionRecord>& records, double threshold) {
  std::vector<EnzymeReactionRecord> unique_records;
  std::vector<std::uint64_t> seen;
  for (const auto& r : records) {
    const std::uint64_t d = record_digest(r);
    if (std::find(seen.begin(), seen.end(), d) != seen.end()) continue;
    seen.push_back(d);
    unique_records.push_back(r);
  }
  std::vector<std::string> distinct;
  for (const auto& r : unique_records)
    if (std::find(distinct.begin(), distinct.end(), r.sequence) == distinct.end())
      distinct.push_back(r.sequence);
  const Clustering cl = cluster_by_homology(distinct, threshold);
  std::vector<std::string> kept_seqs;
  for (int c : cl.centroid_indices) kept_seqs.push_back(distinct[c]);
  std::vector<EnzymeReactionRecord> kept;
  for (const auto& r : unique_records)
    if (std::find(kept_seqs.begin(), kept_seqs.end(), r.sequence) != kept_seqs.end())
      kept.push_back(r);
  return kept;
}

// ---------------------------------------------------------------------------
// Record file IO. A record is a directory with pocket.txt, substrate.txt,
// product.txt, msa.txt and labels.txt; a dataset manifest lists record
// directories, one per line.

inline void write_pocket_stream(std::ostream& out, const Pocket& pocket) {
  out << "pocket " << pocket.size() << "\n" << std::setprecision(17);
  for (int i = 0; i < pocket.size(); ++i) {
    const auto rec = frame_to_record(pocket.residues[i]);
    out << i << ' ' << amino_letter_from_index(pocket.residues[i].aa);
    // Quaternion then translation, translation written in Angstrom.
    for (int kk = 0; kk < 4; ++kk) out << ' ' << rec[kk];
    for (int kk = 4; kk < 7; ++kk) out << ' ' << rec[kk] / kCoordScale;
    out << "\n";
  }
}

inline Pocket read_pocket_stream(std::istream& in) {
  std::string tag;
  int n = 0;
  if (!(in >> tag >> n) || tag != "pocket" || n < 1)
    throw IoError("bad pocket file header");
  Pocket pocket;
  for (int i = 0; i < n; ++i) {
    int idx;
    char letter;
    std::array<double, 7> rec{};
    if (!(in >> idx >> letter >> rec[0] >> rec[1] >> rec[2] >> rec[3] >> rec[4] >>
          rec[5] >> rec[6]))
      throw IoError("truncated pocket file");
    for (int kk = 4; kk < 7; ++kk) rec[kk] *= kCoordScale;
    const int aa = amino_index_from_letter(letter);
    pocket.residues.push_back(frame_from_record(rec, aa >= 0 ? aa : kAminoMask));
  }
  return pocket;
}

inline void write_molecule_file(const std::string& path, const Molecule3D& mol3,
                                const std::vector<Bond>& bonds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write molecule file: " + path);
  out << mol3.size() << "\n" << std::setprecision(17);
  for (int a = 0; a < mol3.size(); ++a) {
    const int t = mol3.atom_types[a];
    const std::string el =
        t >= 0 && t < static_cast<int>(element_table().size()) ? element_table()[t]
                                                               : "X";
    const Vec3 ang = mol3.coords[a] / kCoordScale;
    out << el << ' ' << ang.x << ' ' << ang.y << ' ' << ang.z << "\n";
  }
  out << "BONDS\n";
  for (const auto& b : bonds) out << b.i << ' ' << b.j << ' ' << b.order << "\n";
}

inline void write_record(const std::string& dir, const EnzymeReactionRecord& r,
                         const CoEvoVocabulary& vocab) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir + "/pocket.txt");
    if (!out) throw IoError("cannot write " + dir + "/pocket.txt");
    write_pocket_stream(out, r.pocket);
  }
  {
    // Product atoms carry no coordinates; zeros keep the shared format.
    Molecule3D prod3;
    prod3.atom_types = r.product.atom_types;
    prod3.coords.assign(r.product.size(), Vec3{0, 0, 0});
    prod3.atom_mask.assign(r.product.size(), 1.0);
    std::vector<Bond> one_way;
    for (std::size_t b = 0; b < r.product.bonds.size(); b += 2)
      one_way.push_back(r.product.bonds[b]);
    write_molecule_file(dir + "/substrate.txt", r.substrate, {});
    write_molecule_file(dir + "/product.txt", prod3, one_way);
  }
  {
    std::ofstream out(dir + "/msa.txt");
    if (!out) throw IoError("cannot write " + dir + "/msa.txt");
    // Rows split back into enzyme and reaction blocks at the separator.
    std::vector<std::string> enzyme_rows, reaction_rows;
    for (int m = 0; m < r.coevo.n_msa; ++m) {
      const std::string row = detokenize_row(r.coevo, m, vocab);
      const auto sep = row.find(vocab.separator());
      enzyme_rows.push_back(row.substr(0, sep));
      reaction_rows.push_back(sep == std::string::npos ? "" : row.substr(sep + 1));
    }
    for (const auto& s : enzyme_rows) out << s << "\n";
    out << "\n";
    for (const auto& s : reaction_rows) out << s << "\n";
  }
  {
    std::ofstream out(dir + "/labels.txt");
    if (!out) throw IoError("cannot write " + dir + "/labels.txt");
    out << "id " << r.id << "\n";
    out << "ec " << (r.ec + 1) << "\n";
    if (r.affinity) out << "affinity " << std::setprecision(17) << *r.affinity << "\n";
    out << "sequence " << r.sequence << "\n";
  }
}

inline EnzymeReactionRecord read_record(const std::string& dir,
                                        const CoEvoVocabulary& vocab, int n_token) {
  EnzymeReactionRecord r;
  {
    std::ifstream in(dir + "/pocket.txt");
    if (!in) throw IoError("cannot open " + dir + "/pocket.txt");
    r.pocket = read_pocket_stream(in);
  }
  r.substrate = to_molecule_3d(load_molecule_file(dir + "/substrate.txt"));
  r.product = to_molecule_2d(load_molecule_file(dir + "/product.txt"));
  {
    std::vector<std::string> enzyme_rows, reaction_rows;
    load_msa_file(dir + "/msa.txt", enzyme_rows, reaction_rows);
    r.coevo = tokenize_coevolution(enzyme_rows, reaction_rows, vocab, n_token);
  }
  {
    std::ifstream in(dir + "/labels.txt");
    if (!in) throw IoError("cannot open " + dir + "/labels.txt");
    std::string key;
    while (in >> key) {
      if (key == "id") in >> r.id;
      else if (key == "ec") {
        int ec1;
        in >> ec1;
        if (ec1 < 1 || ec1 > 7) throw IoError("labels: ec out of range 1..7");
        r.ec = ec1 - 1;
      } else if (key == "affinity") {
        double v;
        in >> v;
        r.affinity = v;
      } else if (key == "sequence") {
        in >> r.sequence;
      } else {
        std::string skip;
        std::getline(in, skip);
      }
    }
  }
  if (r.sequence.empty())
    for (const auto& f : r.pocket.residues)
      r.sequence += amino_letter_from_index(f.aa);
  return r;
}

inline std::vector<std::string> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<std::string> dirs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) dirs.push_back(line);
  }
  return dirs;
}

// ---------------------------------------------------------------------------
// Synthetic data: helical pockets jittered around a random small ligand,
// random products, EC labels and co-evolution grids consistent with the
// pocket sequence. Deterministic per seed.

struct SynthConfig {
  int n_records = 5;
  int n_res = 32;
  int n_substrate_atoms = 6;
  int n_product_atoms = 6;
  int n_msa = 4;
  int n_token = 64;
};

inline std::vector<EnzymeReactionRecord> generate_synthetic_dataset(
    Rng& rng, const SynthConfig& cfg, const CoEvoVocabulary& vocab) {
  std::vector<EnzymeReactionRecord> records;
  const std::string organic = "HCNOSP";
  for (int rec_idx = 0; rec_idx < cfg.n_records; ++rec_idx) {
    EnzymeReactionRecord r;
    r.id = "synth" + std::to_string(rec_idx);

    // Substrate: atoms in a 1.5 A ball (stored in model units, centered later).
    for (int a = 0; a < cfg.n_substrate_atoms; ++a) {
      const std::string el(1, organic[rng.uniform_int(static_cast<int>(organic.size()))]);
      r.substrate.atom_types.push_back(element_index(el));
      r.substrate.coords.push_back(Vec3{rng.normal(), rng.normal(), rng.normal()}
                                       .normalized() *
                                   (1.5 * rng.uniform()) * kCoordScale);
      r.substrate.atom_mask.push_back(1.0);
    }
    const Vec3 centroid = r.substrate.centroid();
    for (auto& c : r.substrate.coords) c -= centroid;

    // Pocket: helix of radius 8 A around the substrate, jitter 0.3 A.
    std::string sequence;
    for (int i = 0; i < cfg.n_res; ++i) {
      const double angle = i * (100.0 * M_PI / 180.0);
      const double radius = 8.0, rise = 1.5;
      Vec3 ca{radius * std::cos(angle), radius * std::sin(angle),
              (i - cfg.n_res / 2.0) * rise * 0.45};
      ca += Vec3{rng.normal(), rng.normal(), rng.normal()} * 0.3;
      ResidueFrame f;
      f.x = ca * kCoordScale;
      f.r = uniform_rotation(rng);
      f.aa = rng.uniform_int(kNumAminoAcids);
      sequence += amino_letter_from_index(f.aa);
      r.pocket.residues.push_back(f);
    }
    r.sequence = sequence;

    // Product: random connected graph.
    for (int a = 0; a < cfg.n_product_atoms; ++a) {
      const std::string el(1, organic[rng.uniform_int(static_cast<int>(organic.size()))]);
      r.product.atom_types.push_back(element_index(el));
      r.product.atom_mask.push_back(1.0);
    }
    for (int a = 1; a < cfg.n_product_atoms; ++a) {
      const int b = rng.uniform_int(a);
      const int order = 1 + rng.uniform_int(3);
      r.product.bonds.push_back({a, b, order});
      r.product.bonds.push_back({b, a, order});
    }

    r.ec = rng.uniform_int(7);
    r.affinity = -5.0 + rng.normal();

    // Co-evolution rows: the pocket sequence plus mutated homologs, joined
    // with a synthetic reaction string.
    std::string reaction;
    const std::string rxn_chars = "cnos123=()>";
    const int rxn_len = 10 + rng.uniform_int(8);
    for (int kk = 0; kk < rxn_len; ++kk)
      reaction += rxn_chars[rng.uniform_int(static_cast<int>(rxn_chars.size()))];
    std::vector<std::string> enzyme_rows{sequence}, reaction_rows{reaction};
    for (int m = 1; m < cfg.n_msa; ++m) {
      std::string mut = sequence;
      for (auto& ch : mut)
        if (rng.uniform() < 0.2)
          ch = rng.uniform() < 0.15 ? '-' : kAminoLetters[rng.uniform_int(20)];
      std::string rmut = reaction;
      for (auto& ch : rmut)
        if (rng.uniform() < 0.2)
          ch = rxn_chars[rng.uniform_int(static_cast<int>(rxn_chars.size()))];
      enzyme_rows.push_back(mut);
      reaction_rows.push_back(rmut);
    }
    r.coevo = tokenize_coevolution(enzyme_rows, reaction_rows, vocab, cfg.n_token);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace zymflow
