#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tmal/common.h"

namespace tmal {

enum class Rank { kOrder = 0, kFamily = 1, kGenus = 2, kSpecies = 3 };

inline constexpr std::array<Rank, 4> kAllRanks = {Rank::kOrder, Rank::kFamily, Rank::kGenus,
                                                  Rank::kSpecies};

std::string_view rank_name(Rank r);
Rank parse_rank(std::string_view name);

// Four optional ranks, coarse to fine. A rank may only be present when every
// coarser rank is present; the constructor enforces that.
class Taxonomy {
 public:
  Taxonomy() = default;
  // Empty strings mean "absent". Throws DataError on a prefix gap or a label
  // holding a tab/newline.
  Taxonomy(std::string order, std::string family, std::string genus, std::string species);

  const std::optional<std::string>& at(Rank r) const { return ranks_[static_cast<int>(r)]; }
  bool has(Rank r) const { return at(r).has_value(); }
  // Number of present ranks (0..4).
  int depth() const;

  bool operator==(const Taxonomy&) const = default;

 private:
  std::array<std::optional<std::string>, 4> ranks_;
};

// Present ranks joined by a single space, coarse to fine.
std::string serialize_taxonomy(const Taxonomy& t);

struct Record {
  std::string record_id;
  std::vector<float> image_feature;
  std::string dna_barcode;
  Taxonomy taxonomy;

  bool operator==(const Record&) const = default;
};

// Dense row-major float32 matrix with the on-disk `TMAF` layout.
struct FeatureMatrix {
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<float> values;

  float at(std::uint64_t r, std::uint64_t c) const { return values[r * cols + c]; }
  bool operator==(const FeatureMatrix&) const = default;
};

void write_feature_matrix(const FeatureMatrix& m, std::ostream& out);
FeatureMatrix read_feature_matrix(std::istream& in);
void save_feature_matrix(const FeatureMatrix& m, const std::string& path);
FeatureMatrix load_feature_matrix(const std::string& path);

// Immutable, ordered collection of records sharing one feature dimension.
class RecordSet {
 public:
  RecordSet() = default;
  RecordSet(std::vector<Record> records, std::size_t d_img);

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t d_img() const { return d_img_; }
  const Record& operator[](std::size_t i) const { return records_[i]; }

  // Throws DataError when the id is unknown.
  const Record& by_id(const std::string& record_id) const;
  std::optional<std::size_t> index_of(const std::string& record_id) const;

 private:
  std::vector<Record> records_;
  std::size_t d_img_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

// Reads the record TSV; image_ref indexes rows of `features`.
RecordSet parse_records(std::istream& tsv, const FeatureMatrix& features);
// Writes the TSV plus the feature matrix it references (row i = record i).
void write_records(const RecordSet& set, std::ostream& tsv, FeatureMatrix& features_out);

// File-level helpers. The feature sidecar defaults to `<tsv path>.tmaf`.
RecordSet load_records(const std::string& tsv_path, const std::string& features_path = "");
void save_records(const RecordSet& set, const std::string& tsv_path,
                  const std::string& features_path = "");
std::string default_features_path(const std::string& tsv_path);

struct SyntheticCorpusOptions {
  std::size_t n_species = 20;
  std::size_t records_per_species = 50;
  std::size_t d_img = 32;
  double noise = 0.1;
  std::uint64_t seed = 1;
  std::size_t barcode_length = 120;
};

// Deterministic desk-scale corpus. Species are grouped 2 per genus, genera 2
// per family, families 3 per order. Barcodes descend from per-order templates
// with rank-level mutations, so related species share k-mers.
RecordSet generate_synthetic_corpus(const SyntheticCorpusOptions& opts);

}  // namespace tmal
