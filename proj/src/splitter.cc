#include "tmal/splitter.h"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

namespace tmal {
namespace {

constexpr std::array<std::string_view, kPartitionCount> kPartitionNames = {
    "pretrain",         "train_seen",       "val_seen_query",    "test_seen_query",
    "key_seen",         "val_unseen_query", "val_unseen_key",    "test_unseen_query",
    "test_unseen_key",  "excluded"};

constexpr const char* kToolVersion = "tmal 0.1.0";

// Seen records: train / val query / test query / key.
const std::vector<std::size_t> kSeenRecordWeights = {70, 10, 10, 10};
const std::vector<std::size_t> kHalves = {1, 1};

}  // namespace

std::string_view partition_name(Partition p) { return kPartitionNames[static_cast<std::size_t>(p)]; }

Partition parse_partition(std::string_view name) {
  for (std::size_t i = 0; i < kPartitionNames.size(); ++i) {
    if (kPartitionNames[i] == name) return static_cast<Partition>(i);
  }
  throw DataError("unknown partition '" + std::string(name) + "'");
}

bool is_seen_partition(Partition p) {
  return p == Partition::kTrainSeen || p == Partition::kValSeenQuery ||
         p == Partition::kTestSeenQuery || p == Partition::kKeySeen;
}

bool is_unseen_partition(Partition p) {
  return p == Partition::kValUnseenQuery || p == Partition::kValUnseenKey ||
         p == Partition::kTestUnseenQuery || p == Partition::kTestUnseenKey;
}

EvalSplit parse_eval_split(std::string_view name) {
  if (name == "val") return EvalSplit::kVal;
  if (name == "test") return EvalSplit::kTest;
  throw UsageError("unknown split '" + std::string(name) + "' (expected val or test)");
}

std::string_view eval_split_name(EvalSplit s) { return s == EvalSplit::kVal ? "val" : "test"; }

Partition seen_query_partition(EvalSplit s) {
  return s == EvalSplit::kVal ? Partition::kValSeenQuery : Partition::kTestSeenQuery;
}
Partition unseen_query_partition(EvalSplit s) {
  return s == EvalSplit::kVal ? Partition::kValUnseenQuery : Partition::kTestUnseenQuery;
}
Partition unseen_key_partition(EvalSplit s) {
  return s == EvalSplit::kVal ? Partition::kValUnseenKey : Partition::kTestUnseenKey;
}

void SplitManifest::assign(const std::string& record_id, Partition p) {
  auto [it, inserted] = index_.emplace(record_id, order_.size());
  if (inserted) {
    order_.emplace_back(record_id, p);
  } else {
    order_[it->second].second = p;
  }
}

std::optional<Partition> SplitManifest::find(const std::string& record_id) const {
  auto it = index_.find(record_id);
  if (it == index_.end()) return std::nullopt;
  return order_[it->second].second;
}

Partition SplitManifest::at(const std::string& record_id) const {
  auto p = find(record_id);
  if (!p) throw DataError("record '" + record_id + "' missing from manifest");
  return *p;
}

std::array<std::size_t, kPartitionCount> SplitManifest::counts() const {
  std::array<std::size_t, kPartitionCount> c{};
  for (const auto& [id, p] : order_) ++c[static_cast<std::size_t>(p)];
  return c;
}

void SplitManifest::write(std::ostream& out) const {
  out << "# seed=" << seed_ << " tool=" << kToolVersion << '\n';
  for (const auto& [id, p] : order_) out << id << '\t' << partition_name(p) << '\n';
}

SplitManifest SplitManifest::read(std::istream& in) {
  SplitManifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("seed=");
      if (pos != std::string::npos) m.seed_ = std::stoull(line.substr(pos + 5));
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected record_id<TAB>partition");
    }
    const std::string id = line.substr(0, tab);
    if (m.find(id)) throw DataError("manifest: duplicate record_id '" + id + "'");
    m.assign(id, parse_partition(line.substr(tab + 1)));
  }
  return m;
}

void SplitManifest::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  write(out);
}

SplitManifest SplitManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  try {
    return read(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<std::size_t>& weights) {
  std::size_t total = 0;
  for (auto w : weights) total += w;
  if (total == 0) throw UsageError("largest_remainder: weights sum to zero");
  std::vector<std::size_t> parts(weights.size());
  std::vector<std::size_t> rem(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    parts[i] = n * weights[i] / total;
    rem[i] = n * weights[i] % total;
    assigned += parts[i];
  }
  std::vector<std::size_t> order(weights.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++parts[order[j % order.size()]];
  return parts;
}

SplitManifest partition(const RecordSet& corpus, std::uint64_t seed) {
  SplitManifest manifest(seed);
  std::vector<Partition> assigned(corpus.size(), Partition::kExcluded);

  std::map<std::string, std::vector<std::size_t>> by_species;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& species = corpus[i].taxonomy.at(Rank::kSpecies);
    if (!species) {
      assigned[i] = Partition::kPretrain;
    } else {
      by_species[*species].push_back(i);
    }
  }

  std::vector<std::string> small, large;
  for (auto& [name, rows] : by_species) {
    std::sort(rows.begin(), rows.end(),
              [&](auto a, auto b) { return corpus[a].record_id < corpus[b].record_id; });
    if (rows.size() >= 9) {
      large.push_back(name);
    } else if (rows.size() >= 2) {
      small.push_back(name);
    }
    // Singletons keep kExcluded.
  }

  Rng rng(derive_seed(seed, "partition"));
  enum class Role { kSeen, kUnseenVal, kUnseenTest };
  std::map<std::string, Role> role;

  rng.shuffle(small);
  const auto small_split = largest_remainder(small.size(), kHalves);
  for (std::size_t i = 0; i < small.size(); ++i) {
    role[small[i]] = i < small_split[0] ? Role::kUnseenVal : Role::kUnseenTest;
  }

  rng.shuffle(large);
  const auto seen_unseen = largest_remainder(large.size(), {80, 20});
  const auto unseen_split = largest_remainder(seen_unseen[1], kHalves);
  for (std::size_t i = 0; i < large.size(); ++i) {
    if (i < seen_unseen[0]) {
      role[large[i]] = Role::kSeen;
    } else if (i - seen_unseen[0] < unseen_split[0]) {
      role[large[i]] = Role::kUnseenVal;
    } else {
      role[large[i]] = Role::kUnseenTest;
    }
  }

  for (auto& [name, rows] : by_species) {
    auto it = role.find(name);
    if (it == role.end()) continue;
    rng.shuffle(rows);
    std::vector<Partition> slots;
    std::vector<std::size_t> counts;
    if (it->second == Role::kSeen) {
      slots = {Partition::kTrainSeen, Partition::kValSeenQuery, Partition::kTestSeenQuery,
               Partition::kKeySeen};
      counts = largest_remainder(rows.size(), kSeenRecordWeights);
      if (counts[3] == 0 && counts[1] + counts[2] > 0 && counts[0] > 0) {
        --counts[0];
        ++counts[3];
      }
    } else {
      const EvalSplit split = it->second == Role::kUnseenVal ? EvalSplit::kVal : EvalSplit::kTest;
      slots = {unseen_query_partition(split), unseen_key_partition(split)};
      counts = largest_remainder(rows.size(), kHalves);
    }
    std::size_t pos = 0;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      for (std::size_t c = 0; c < counts[s]; ++c) assigned[rows[pos++]] = slots[s];
    }
  }

  for (std::size_t i = 0; i < corpus.size(); ++i) manifest.assign(corpus[i].record_id, assigned[i]);
  return manifest;
}

bool ValidationReport::ok() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

const ValidationCheck& ValidationReport::check(std::string_view name) const {
  for (const auto& c : checks) {
    if (c.name == name) return c;
  }
  throw UsageError("no validation check named '" + std::string(name) + "'");
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (const auto& c : checks) {
    os << (c.passed ? "PASS " : "FAIL ") << c.name << '\n';
    for (const auto& f : c.failures) os << "  - " << f << '\n';
  }
  return os.str();
}

ValidationReport validate_manifest(const RecordSet& corpus, const SplitManifest& manifest) {
  ValidationCheck disjoint_unseen{"unseen_val_test_disjoint", true, {}};
  ValidationCheck disjoint_seen{"seen_unseen_disjoint", true, {}};
  ValidationCheck query_key{"unseen_query_and_key", true, {}};
  ValidationCheck ratios{"seen_ratios", true, {}};
  ValidationCheck singletons{"singletons_excluded", true, {}};
  ValidationCheck unlabelled{"unlabelled_pretrain", true, {}};
  ValidationCheck totality{"totality", true, {}};
  auto fail = [](ValidationCheck& c, std::string msg) {
    c.passed = false;
    c.failures.push_back(std::move(msg));
  };

  struct SpeciesStats {
    std::size_t records = 0;
    std::array<std::size_t, kPartitionCount> by_partition{};
  };
  std::map<std::string, SpeciesStats> stats;
  std::set<std::string> seen_ids;
  for (const Record& r : corpus.records()) {
    seen_ids.insert(r.record_id);
    const auto p = manifest.find(r.record_id);
    if (!p) {
      fail(totality, "record '" + r.record_id + "' has no partition");
      continue;
    }
    const auto& species = r.taxonomy.at(Rank::kSpecies);
    if (!species) {
      if (*p != Partition::kPretrain) {
        fail(unlabelled, "record '" + r.record_id + "' lacks a species label but is in " +
                             std::string(partition_name(*p)));
      }
      continue;
    }
    auto& s = stats[*species];
    ++s.records;
    ++s.by_partition[static_cast<std::size_t>(*p)];
  }
  for (const auto& [id, p] : manifest.entries()) {
    if (!seen_ids.count(id)) fail(totality, "manifest names unknown record '" + id + "'");
  }

  auto count = [](const SpeciesStats& s, Partition p) {
    return s.by_partition[static_cast<std::size_t>(p)];
  };
  for (const auto& [name, s] : stats) {
    std::size_t seen = 0, unseen = 0;
    for (std::size_t i = 0; i < kPartitionCount; ++i) {
      const auto p = static_cast<Partition>(i);
      if (is_seen_partition(p)) seen += s.by_partition[i];
      if (is_unseen_partition(p)) unseen += s.by_partition[i];
    }
    const std::size_t in_val = count(s, Partition::kValUnseenQuery) + count(s, Partition::kValUnseenKey);
    const std::size_t in_test = count(s, Partition::kTestUnseenQuery) + count(s, Partition::kTestUnseenKey);

    if (in_val > 0 && in_test > 0) {
      fail(disjoint_unseen, "species '" + name + "' appears in both val and test unseen partitions");
    }
    if (seen > 0 && unseen > 0) {
      fail(disjoint_seen, "species '" + name + "' is both seen and unseen");
    }
    for (EvalSplit split : {EvalSplit::kVal, EvalSplit::kTest}) {
      const std::size_t q = count(s, unseen_query_partition(split));
      const std::size_t k = count(s, unseen_key_partition(split));
      if (q + k > 0 && (q == 0 || k == 0)) {
        fail(query_key, "unseen species '" + name + "' in " + std::string(eval_split_name(split)) +
                            " has " + std::to_string(q) + " queries and " + std::to_string(k) + " keys");
      }
    }
    if (seen > 0) {
      const std::array<Partition, 4> slots = {Partition::kTrainSeen, Partition::kValSeenQuery,
                                              Partition::kTestSeenQuery, Partition::kKeySeen};
      const double n = static_cast<double>(seen);
      const double key_quota = n * 0.1;
      const bool key_floor = count(s, Partition::kKeySeen) == 1 && key_quota < 1.0;
      for (std::size_t j = 0; j < slots.size(); ++j) {
        const double quota = n * static_cast<double>(kSeenRecordWeights[j]) / 100.0;
        const double got = static_cast<double>(count(s, slots[j]));
        double tol = 1.0;
        if (key_floor && (j == 0 || j == 3)) tol = 2.0;
        if (std::abs(got - quota) >= tol) {
          fail(ratios, "seen species '" + name + "': " + std::string(partition_name(slots[j])) +
                           " has " + std::to_string(count(s, slots[j])) + " records, quota " +
                           std::to_string(quota));
        }
      }
    }
    if (s.records == 1 && count(s, Partition::kExcluded) != 1) {
      fail(singletons, "singleton species '" + name + "' is not excluded");
    }
  }

  ValidationReport report;
  report.checks = {disjoint_unseen, disjoint_seen, query_key, ratios, singletons, unlabelled, totality};
  return report;
}

}  // namespace tmal
