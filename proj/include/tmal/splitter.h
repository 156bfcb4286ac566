#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tmal/corpus.h"

namespace tmal {

enum class Partition {
  kPretrain,
  kTrainSeen,
  kValSeenQuery,
  kTestSeenQuery,
  kKeySeen,
  kValUnseenQuery,
  kValUnseenKey,
  kTestUnseenQuery,
  kTestUnseenKey,
  kExcluded,
};

inline constexpr std::size_t kPartitionCount = 10;

std::string_view partition_name(Partition p);
Partition parse_partition(std::string_view name);
bool is_seen_partition(Partition p);
bool is_unseen_partition(Partition p);

enum class EvalSplit { kVal, kTest };
EvalSplit parse_eval_split(std::string_view name);
std::string_view eval_split_name(EvalSplit s);
Partition seen_query_partition(EvalSplit s);
Partition unseen_query_partition(EvalSplit s);
Partition unseen_key_partition(EvalSplit s);

class SplitManifest {
 public:
  SplitManifest() = default;
  explicit SplitManifest(std::uint64_t seed) : seed_(seed) {}

  void assign(const std::string& record_id, Partition p);
  std::optional<Partition> find(const std::string& record_id) const;
  Partition at(const std::string& record_id) const;

  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return order_.size(); }
  // Entries in insertion order.
  const std::vector<std::pair<std::string, Partition>>& entries() const { return order_; }
  std::array<std::size_t, kPartitionCount> counts() const;

  void write(std::ostream& out) const;
  static SplitManifest read(std::istream& in);
  void save(const std::string& path) const;
  static SplitManifest load(const std::string& path);

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::pair<std::string, Partition>> order_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Splits n into parts proportional to integer weights. Floors first, then
// the leftover units go to the largest remainders (ties: lower index).
std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<std::size_t>& weights);

// Species-then-record partitioning into seen/unseen and query/key sets.
SplitManifest partition(const RecordSet& corpus, std::uint64_t seed);

struct ValidationCheck {
  std::string name;
  bool passed = true;
  std::vector<std::string> failures;
};

struct ValidationReport {
  // unseen_val_test_disjoint, seen_unseen_disjoint, unseen_query_and_key,
  // seen_ratios, singletons_excluded, unlabelled_pretrain, totality.
  std::vector<ValidationCheck> checks;

  bool ok() const;
  const ValidationCheck& check(std::string_view name) const;
  std::string to_string() const;
};

ValidationReport validate_manifest(const RecordSet& corpus, const SplitManifest& manifest);

}  // namespace tmal
