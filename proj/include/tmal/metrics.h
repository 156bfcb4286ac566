#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmal/corpus.h"

namespace tmal {

using Label = std::optional<std::string>;

// 100 * correct / evaluated. Queries whose gold label is absent are skipped;
// an absent prediction (abstention) counts as wrong. Throws UsageError when
// nothing is evaluated.
double micro_accuracy(std::span<const Label> preds, std::span<const Label> golds);

// Unweighted mean over gold classes of each class's accuracy.
double macro_accuracy(std::span<const Label> preds, std::span<const Label> golds);

// 2ab / (a + b), 0 when a + b == 0.
double harmonic_mean(double a, double b);

struct AccuracyBin {
  std::size_t lower = 0;
  std::optional<std::size_t> upper;  // exclusive; open-ended when absent
  std::size_t species = 0;
  double mean_accuracy = 0.0;
};

// Groups species by key count into [edge_i, edge_{i+1}) bins and averages
// per-species accuracy. Bins without species are omitted.
std::vector<AccuracyBin> binned_species_accuracy(const std::map<std::string, double>& per_species_accuracy,
                                                 const std::map<std::string, std::size_t>& key_counts,
                                                 std::span<const std::size_t> bin_edges);

// 0, 1, 2, 4, ... up to the first power of two above max_count.
std::vector<std::size_t> power_of_two_edges(std::size_t max_count);

struct BinaryAccuracy {
  double seen = 0.0;
  double unseen = 0.0;
  double hm = 0.0;
};

// branch_seen[i]: the pipeline routed query i to the seen branch.
BinaryAccuracy seen_unseen_binary_accuracy(const std::vector<bool>& branch_seen,
                                           const std::vector<bool>& gold_seen);

struct RankReport {
  std::optional<double> micro_seen, micro_unseen, macro_seen, macro_unseen;
  std::optional<double> hm_micro, hm_macro;
  std::size_t evaluated_seen = 0, evaluated_unseen = 0;
  std::size_t abstained_seen = 0, abstained_unseen = 0;
};

struct SpeciesAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t key_count = 0;
  bool seen = true;
  double accuracy() const { return total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  std::array<RankReport, 4> ranks;
  std::map<std::string, SpeciesAccuracy> species;
  std::vector<AccuracyBin> bins_seen, bins_unseen;
  std::optional<BinaryAccuracy> binary;
  std::size_t queries = 0;
};

struct EvalItem {
  Taxonomy gold;
  Taxonomy predicted;  // ranks absent in the prediction are abstentions
  bool gold_seen = true;
  std::optional<bool> branch_seen;
};

EvalReport evaluate(std::span<const EvalItem> items,
                    const std::map<std::string, std::size_t>& species_key_counts);

std::string report_to_json(const EvalReport& report);
// Aligned table: rank x {seen, unseen, H.M.} x {micro, macro}.
std::string report_to_text(const EvalReport& report);

}  // namespace tmal
