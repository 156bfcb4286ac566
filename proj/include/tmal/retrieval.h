#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmal/alignment.h"
#include "tmal/corpus.h"
#include "tmal/neuralnet.h"

namespace tmal {

enum class KeyStrategy { kImage, kDna, kText, kAvg };

std::string_view key_strategy_name(KeyStrategy s);
KeyStrategy parse_key_strategy(std::string_view name);
KeyStrategy strategy_for(Modality m);

struct Neighbor {
  std::size_t key = 0;
  std::string record_id;
  double similarity = 0.0;

  bool operator==(const Neighbor&) const = default;
};

// Immutable exact-search index over unit-norm key embeddings.
class KeyIndex {
 public:
  // Throws UsageError on an empty key set, duplicate ids, size mismatches,
  // or a row whose norm is not 1 within 1e-6.
  static KeyIndex build(const EmbeddingBatch& keys, std::vector<Taxonomy> taxonomies);
  static KeyIndex build(const Matrix& keys, std::vector<std::string> record_ids,
                        std::vector<Taxonomy> taxonomies, KeyStrategy strategy);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  KeyStrategy strategy() const { return strategy_; }
  const std::string& record_id(std::size_t i) const { return ids_[i]; }
  const Taxonomy& taxonomy(std::size_t i) const { return taxonomies_[i]; }
  std::span<const double> row(std::size_t i) const { return {keys_.data() + i * dim_, dim_}; }
  std::optional<std::size_t> find(const std::string& record_id) const;

  double similarity(std::span<const double> q, std::size_t key) const;
  // Exact top-k by descending cosine; ties go to the smaller record_id.
  std::vector<Neighbor> query_topk(std::span<const double> q, std::size_t k) const;

 private:
  std::vector<double> keys_;
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<Taxonomy> taxonomies_;
  KeyStrategy strategy_ = KeyStrategy::kImage;
};

// Per record: normalize(mean(image key, dna key)). Throws on id-set mismatch
// and NumericalError when the two keys cancel.
KeyIndex make_avg_index(const KeyIndex& image_keys, const KeyIndex& dna_keys);

struct NnPrediction {
  Neighbor nearest;
  // Absent when the nearest key lacks the requested rank (abstention).
  std::optional<std::string> label;
};

NnPrediction classify_by_nn(const KeyIndex& index, std::span<const double> q, Rank level);

enum class Branch { kSeen, kUnseen };
std::string_view branch_name(Branch b);
Branch parse_branch(std::string_view name);

struct OpenSetPrediction {
  std::optional<std::string> label;  // species
  Branch branch = Branch::kSeen;
  double score = 0.0;
  std::string key_record_id;  // empty for the linear seen branch
};

// Image keys of seen species first; below t1 fall back to 1-NN over the
// DNA keys of unseen species.
OpenSetPrediction open_set_classify_nn(std::span<const double> q, const KeyIndex& seen_image_keys,
                                       const KeyIndex& unseen_dna_keys, double t1);

// Softmax classifier over seen species on top of frozen query embeddings.
class LinearProbe {
 public:
  LinearProbe() = default;
  LinearProbe(nn::Linear layer, std::vector<std::string> classes);

  std::size_t num_classes() const { return classes_.size(); }
  const std::vector<std::string>& classes() const { return classes_; }
  const nn::Linear& layer() const { return layer_; }
  RowVector probabilities(std::span<const double> q) const;

 private:
  nn::Linear layer_;
  std::vector<std::string> classes_;
};

struct ProbeOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  std::uint64_t seed = 1;
};

// Cross-entropy training with the Adam optimizer. Classes are the sorted
// distinct labels.
LinearProbe train_linear_probe(const Matrix& embeddings, const std::vector<std::string>& labels,
                               const ProbeOptions& opts);

OpenSetPrediction open_set_classify_linear(std::span<const double> q, const LinearProbe& probe,
                                           double t2, const KeyIndex& unseen_dna_keys);

// Threshold-independent view of one query: its gating score and the labels
// each branch would predict.
struct OpenSetScore {
  double score = 0.0;
  std::optional<std::string> seen_label;
  std::optional<std::string> unseen_label;
};

std::vector<OpenSetScore> open_set_scores_nn(const Matrix& queries, const KeyIndex& seen_image_keys,
                                             const KeyIndex& unseen_dna_keys);
std::vector<OpenSetScore> open_set_scores_linear(const Matrix& queries, const LinearProbe& probe,
                                                 const KeyIndex& unseen_dna_keys);

struct TuneResult {
  double threshold = 0.0;
  double hm = 0.0;
  double seen_accuracy = 0.0;
  double unseen_accuracy = 0.0;
  // H.M. at each grid point, index j <-> threshold j / (grid_size - 1).
  std::vector<double> curve;
};

// Uniform grid over [0, 1]; maximizes the harmonic mean of seen and unseen
// species accuracy (percent). Ties resolve to the smallest threshold.
TuneResult tune_threshold(std::span<const OpenSetScore> scores,
                          std::span<const std::string> gold_species,
                          const std::vector<bool>& gold_seen, std::size_t grid_size = 1000);

// On-disk embedding store: TMAF matrix plus `<path>.tsv` (row, record_id,
// modality).
struct EmbeddingStore {
  Matrix matrix;
  std::vector<std::string> record_ids;
  std::string tag;  // image, dna, text or avg
};

void save_embedding_store(const EmbeddingStore& store, const std::string& path);
EmbeddingStore load_embedding_store(const std::string& path);
std::string store_sidecar_path(const std::string& path);

}  // namespace tmal
