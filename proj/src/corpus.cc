#include "tmal/corpus.h"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace tmal {
namespace {

constexpr char kMatrixMagic[4] = {'T', 'M', 'A', 'F'};
constexpr std::uint8_t kMatrixVersion = 0x01;

const std::array<std::string, 7> kRecordColumns = {"record_id", "dna_barcode", "order",   "family",
                                                   "genus",     "species",     "image_ref"};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  for (;;) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

void put_u64_le(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf, 8);
}

std::uint64_t get_u64_le(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw DataError("TMAF: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void check_label(const std::string& label) {
  if (label.find_first_of("\t\n\r") != std::string::npos) {
    throw DataError("taxonomy label contains tab or newline: '" + label + "'");
  }
}

std::string mutate(const std::string& seq, double rate, Rng& rng) {
  static constexpr char kBases[4] = {'A', 'C', 'G', 'T'};
  std::string out = seq;
  if (rate <= 0.0) return out;
  for (char& c : out) {
    if (rng.uniform() < rate) {
      // Substitute with a different base.
      char next = c;
      while (next == c) next = kBases[rng.below(4)];
      c = next;
    }
  }
  return out;
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace

std::string_view rank_name(Rank r) {
  switch (r) {
    case Rank::kOrder:
      return "order";
    case Rank::kFamily:
      return "family";
    case Rank::kGenus:
      return "genus";
    case Rank::kSpecies:
      return "species";
  }
  return "unknown";
}

Rank parse_rank(std::string_view name) {
  for (Rank r : kAllRanks) {
    if (rank_name(r) == name) return r;
  }
  throw UsageError("unknown taxonomic rank '" + std::string(name) + "'");
}

Taxonomy::Taxonomy(std::string order, std::string family, std::string genus,
                   std::string species) {
  std::array<std::string, 4> in = {std::move(order), std::move(family), std::move(genus),
                                   std::move(species)};
  bool gap = false;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i].empty()) {
      gap = true;
      continue;
    }
    if (gap) throw DataError("taxonomy not prefix-complete");
    check_label(in[i]);
    ranks_[i] = std::move(in[i]);
  }
}

int Taxonomy::depth() const {
  int d = 0;
  for (const auto& r : ranks_) d += r.has_value() ? 1 : 0;
  return d;
}

std::string serialize_taxonomy(const Taxonomy& t) {
  std::string out;
  for (Rank r : kAllRanks) {
    if (!t.has(r)) break;
    if (!out.empty()) out.push_back(' ');
    out += *t.at(r);
  }
  return out;
}

void write_feature_matrix(const FeatureMatrix& m, std::ostream& out) {
  if (m.values.size() != m.rows * m.cols) throw UsageError("FeatureMatrix: rows*cols != size");
  out.write(kMatrixMagic, 4);
  out.put(static_cast<char>(kMatrixVersion));
  put_u64_le(out, m.rows);
  put_u64_le(out, m.cols);
  for (float f : m.values) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    out.write(buf, 4);
  }
  if (!out) throw DataError("TMAF: write failed");
}

FeatureMatrix read_feature_matrix(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMatrixMagic, 4) != 0) {
    throw DataError("bad magic: expected TMAF");
  }
  const int version = in.get();
  if (version != kMatrixVersion) {
    throw DataError("TMAF: unsupported version " + std::to_string(version) + ", expected 1");
  }
  FeatureMatrix m;
  m.rows = get_u64_le(in);
  m.cols = get_u64_le(in);
  if (m.cols != 0 && m.rows > (std::uint64_t{1} << 40) / m.cols) {
    throw DataError("TMAF: implausible shape");
  }
  const std::uint64_t n = m.rows * m.cols;
  std::vector<unsigned char> raw(n * 4);
  if (n > 0 && !in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DataError("TMAF: truncated payload");
  }
  m.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[4 * i + b]) << (8 * b);
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f)) throw DataError("TMAF: non-finite value at index " + std::to_string(i));
    m.values[i] = f;
  }
  return m;
}

void save_feature_matrix(const FeatureMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  write_feature_matrix(m, out);
}

FeatureMatrix load_feature_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  try {
    return read_feature_matrix(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

RecordSet::RecordSet(std::vector<Record> records, std::size_t d_img)
    : records_(std::move(records)), d_img_(d_img) {
  index_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const Record& r = records_[i];
    if (r.record_id.empty()) throw DataError("empty record_id at row " + std::to_string(i));
    if (r.dna_barcode.empty()) throw DataError("empty dna_barcode for " + r.record_id);
    if (r.image_feature.size() != d_img_) {
      throw DataError("dimension mismatch for " + r.record_id + ": got " +
                      std::to_string(r.image_feature.size()) + ", expected " +
                      std::to_string(d_img_));
    }
    if (!index_.emplace(r.record_id, i).second) {
      throw DataError("duplicate record_id '" + r.record_id + "'");
    }
  }
}

const Record& RecordSet::by_id(const std::string& record_id) const {
  auto it = index_.find(record_id);
  if (it == index_.end()) throw DataError("unknown record_id '" + record_id + "'");
  return records_[it->second];
}

std::optional<std::size_t> RecordSet::index_of(const std::string& record_id) const {
  auto it = index_.find(record_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

RecordSet parse_records(std::istream& tsv, const FeatureMatrix& features) {
  std::string line;
  if (!std::getline(tsv, line)) throw DataError("record table: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_tabs(line);
  std::array<std::size_t, 7> col{};
  for (std::size_t c = 0; c < kRecordColumns.size(); ++c) {
    auto it = std::find(header.begin(), header.end(), kRecordColumns[c]);
    if (it == header.end()) throw DataError("record table: missing column '" + kRecordColumns[c] + "'");
    col[c] = static_cast<std::size_t>(it - header.begin());
  }

  std::vector<Record> records;
  std::size_t line_no = 1;
  while (std::getline(tsv, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    if (cells.size() != header.size()) {
      throw DataError("record table line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    Record r;
    r.record_id = cells[col[0]];
    r.dna_barcode = cells[col[1]];
    try {
      r.taxonomy = Taxonomy(cells[col[2]], cells[col[3]], cells[col[4]], cells[col[5]]);
    } catch (const DataError& e) {
      throw DataError("record table line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::string& ref = cells[col[6]];
    std::uint64_t row = 0;
    try {
      std::size_t used = 0;
      row = std::stoull(ref, &used);
      if (used != ref.size()) throw std::invalid_argument(ref);
    } catch (const std::exception&) {
      throw DataError("record table line " + std::to_string(line_no) + ": bad image_ref '" + ref + "'");
    }
    if (row >= features.rows) {
      throw DataError("record table line " + std::to_string(line_no) + ": image_ref " + ref +
                      " out of range (" + std::to_string(features.rows) + " rows)");
    }
    auto first = features.values.begin() + static_cast<std::ptrdiff_t>(row * features.cols);
    r.image_feature.assign(first, first + static_cast<std::ptrdiff_t>(features.cols));
    records.push_back(std::move(r));
  }
  return RecordSet(std::move(records), features.cols);
}

void write_records(const RecordSet& set, std::ostream& tsv, FeatureMatrix& features_out) {
  features_out.rows = set.size();
  features_out.cols = set.d_img();
  features_out.values.clear();
  features_out.values.reserve(set.size() * set.d_img());
  for (std::size_t c = 0; c < kRecordColumns.size(); ++c) {
    tsv << (c ? "\t" : "") << kRecordColumns[c];
  }
  tsv << '\n';
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Record& r = set[i];
    tsv << r.record_id << '\t' << r.dna_barcode;
    for (Rank rank : kAllRanks) tsv << '\t' << r.taxonomy.at(rank).value_or("");
    tsv << '\t' << i << '\n';
    features_out.values.insert(features_out.values.end(), r.image_feature.begin(),
                               r.image_feature.end());
  }
}

std::string default_features_path(const std::string& tsv_path) { return tsv_path + ".tmaf"; }

RecordSet load_records(const std::string& tsv_path, const std::string& features_path) {
  const std::string fpath = features_path.empty() ? default_features_path(tsv_path) : features_path;
  std::ifstream in(tsv_path);
  if (!in) throw DataError("cannot open: " + tsv_path);
  const FeatureMatrix features = load_feature_matrix(fpath);
  try {
    return parse_records(in, features);
  } catch (const DataError& e) {
    throw DataError(tsv_path + ": " + e.what());
  }
}

void save_records(const RecordSet& set, const std::string& tsv_path,
                  const std::string& features_path) {
  std::ofstream out(tsv_path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + tsv_path);
  FeatureMatrix features;
  write_records(set, out, features);
  save_feature_matrix(features, features_path.empty() ? default_features_path(tsv_path) : features_path);
}

RecordSet generate_synthetic_corpus(const SyntheticCorpusOptions& opts) {
  if (opts.n_species < 1 || opts.records_per_species < 1) {
    throw UsageError("synthetic corpus needs n_species >= 1 and records_per_species >= 1");
  }
  if (opts.noise < 0.0) throw UsageError("synthetic corpus noise must be >= 0");
  if (opts.barcode_length < 1) throw UsageError("synthetic barcode length must be >= 1");

  constexpr std::size_t kSpeciesPerGenus = 2;
  constexpr std::size_t kGeneraPerFamily = 2;
  constexpr std::size_t kFamiliesPerOrder = 3;
  const std::size_t n_genera = (opts.n_species + kSpeciesPerGenus - 1) / kSpeciesPerGenus;
  const std::size_t n_families = (n_genera + kGeneraPerFamily - 1) / kGeneraPerFamily;
  const std::size_t n_orders = (n_families + kFamiliesPerOrder - 1) / kFamiliesPerOrder;

  Rng rng(derive_seed(opts.seed, "synthetic-corpus"));
  const std::size_t d = opts.d_img;
  auto gaussian_vec = [&](double scale) {
    std::vector<double> v(d);
    for (double& x : v) x = scale * rng.normal();
    return v;
  };
  auto random_seq = [&]() {
    static constexpr char kBases[4] = {'A', 'C', 'G', 'T'};
    std::string s(opts.barcode_length, 'A');
    for (char& c : s) c = kBases[rng.below(4)];
    return s;
  };

  // Hierarchy: each level contributes a latent offset and a barcode drift.
  std::vector<std::vector<double>> order_vec, family_vec, genus_vec;
  std::vector<std::string> order_seq, family_seq, genus_seq;
  for (std::size_t o = 0; o < n_orders; ++o) {
    order_vec.push_back(gaussian_vec(0.5));
    order_seq.push_back(random_seq());
  }
  for (std::size_t f = 0; f < n_families; ++f) {
    family_vec.push_back(gaussian_vec(0.5));
    family_seq.push_back(mutate(order_seq[f / kFamiliesPerOrder], 0.15, rng));
  }
  for (std::size_t g = 0; g < n_genera; ++g) {
    genus_vec.push_back(gaussian_vec(0.5));
    genus_seq.push_back(mutate(family_seq[g / kGeneraPerFamily], 0.10, rng));
  }

  const double record_mutation = std::min(0.5, 0.5 * opts.noise);
  std::vector<Record> records;
  records.reserve(opts.n_species * opts.records_per_species);
  for (std::size_t s = 0; s < opts.n_species; ++s) {
    const std::size_t g = s / kSpeciesPerGenus;
    const std::size_t f = g / kGeneraPerFamily;
    const std::size_t o = f / kFamiliesPerOrder;
    const auto species_vec = gaussian_vec(0.5);
    const std::string species_seq = mutate(genus_seq[g], 0.06, rng);
    std::vector<double> latent(d);
    for (std::size_t j = 0; j < d; ++j) {
      latent[j] = order_vec[o][j] + family_vec[f][j] + genus_vec[g][j] + species_vec[j];
    }
    const std::string genus_name = numbered("Genus", g, 3);
    Taxonomy tax(numbered("Order", o, 2), numbered("Family", f, 3), genus_name,
                 genus_name + " " + numbered("sp", s, 4));
    for (std::size_t k = 0; k < opts.records_per_species; ++k) {
      Record r;
      r.record_id = numbered("syn", s * opts.records_per_species + k, 7);
      r.image_feature.resize(d);
      for (std::size_t j = 0; j < d; ++j) {
        r.image_feature[j] = static_cast<float>(latent[j] + opts.noise * rng.normal());
      }
      r.dna_barcode = mutate(species_seq, record_mutation, rng);
      r.taxonomy = tax;
      records.push_back(std::move(r));
    }
  }
  return RecordSet(std::move(records), d);
}

}  // namespace tmal
