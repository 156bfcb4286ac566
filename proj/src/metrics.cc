#include "tmal/metrics.h"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tmal {
namespace {

void check_aligned(std::span<const Label> preds, std::span<const Label> golds) {
  if (preds.size() != golds.size()) throw UsageError("predictions and golds differ in length");
}

}  // namespace

double micro_accuracy(std::span<const Label> preds, std::span<const Label> golds) {
  check_aligned(preds, golds);
  std::size_t correct = 0, evaluated = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (!golds[i]) continue;
    ++evaluated;
    if (preds[i] && *preds[i] == *golds[i]) ++correct;
  }
  if (evaluated == 0) throw UsageError("accuracy over an empty evaluated set");
  return 100.0 * static_cast<double>(correct) / static_cast<double>(evaluated);
}

double macro_accuracy(std::span<const Label> preds, std::span<const Label> golds) {
  check_aligned(preds, golds);
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_class;  // correct, total
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (!golds[i]) continue;
    auto& c = per_class[*golds[i]];
    ++c.second;
    if (preds[i] && *preds[i] == *golds[i]) ++c.first;
  }
  if (per_class.empty()) throw UsageError("accuracy over an empty evaluated set");
  double sum = 0.0;
  for (const auto& [label, c] : per_class) {
    sum += 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second);
  }
  return sum / static_cast<double>(per_class.size());
}

double harmonic_mean(double a, double b) {
  if (a < 0.0 || b < 0.0) throw UsageError("harmonic mean of negative values");
  return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0;
}

std::vector<std::size_t> power_of_two_edges(std::size_t max_count) {
  std::vector<std::size_t> edges = {0, 1};
  while (edges.back() <= max_count) edges.push_back(edges.back() * 2);
  return edges;
}

std::vector<AccuracyBin> binned_species_accuracy(const std::map<std::string, double>& per_species_accuracy,
                                                 const std::map<std::string, std::size_t>& key_counts,
                                                 std::span<const std::size_t> bin_edges) {
  if (bin_edges.empty()) throw UsageError("binning needs at least one edge");
  if (!std::is_sorted(bin_edges.begin(), bin_edges.end())) throw UsageError("bin edges must be sorted");
  std::vector<double> sums(bin_edges.size(), 0.0);
  std::vector<std::size_t> counts(bin_edges.size(), 0);
  for (const auto& [species, acc] : per_species_accuracy) {
    auto it = key_counts.find(species);
    if (it == key_counts.end()) throw UsageError("no key count for species '" + species + "'");
    const std::size_t kc = it->second;
    if (kc < bin_edges.front()) continue;
    const auto pos = static_cast<std::size_t>(std::upper_bound(bin_edges.begin(), bin_edges.end(), kc) - bin_edges.begin()) - 1;
    sums[pos] += acc;
    ++counts[pos];
  }
  std::vector<AccuracyBin> bins;
  for (std::size_t i = 0; i < bin_edges.size(); ++i) {
    if (counts[i] == 0) continue;
    AccuracyBin b;
    b.lower = bin_edges[i];
    if (i + 1 < bin_edges.size()) b.upper = bin_edges[i + 1];
    b.species = counts[i];
    b.mean_accuracy = sums[i] / static_cast<double>(counts[i]);
    bins.push_back(b);
  }
  return bins;
}

BinaryAccuracy seen_unseen_binary_accuracy(const std::vector<bool>& branch_seen,
                                           const std::vector<bool>& gold_seen) {
  if (branch_seen.size() != gold_seen.size()) throw UsageError("branch and gold lists differ in length");
  std::size_t seen_total = 0, seen_right = 0, unseen_total = 0, unseen_right = 0;
  for (std::size_t i = 0; i < gold_seen.size(); ++i) {
    if (gold_seen[i]) {
      ++seen_total;
      seen_right += branch_seen[i] ? 1 : 0;
    } else {
      ++unseen_total;
      unseen_right += branch_seen[i] ? 0 : 1;
    }
  }
  if (seen_total == 0 || unseen_total == 0) {
    throw UsageError("binary seen/unseen accuracy needs both gold-seen and gold-unseen queries");
  }
  BinaryAccuracy out;
  out.seen = 100.0 * static_cast<double>(seen_right) / static_cast<double>(seen_total);
  out.unseen = 100.0 * static_cast<double>(unseen_right) / static_cast<double>(unseen_total);
  out.hm = harmonic_mean(out.seen, out.unseen);
  return out;
}

EvalReport evaluate(std::span<const EvalItem> items,
                    const std::map<std::string, std::size_t>& species_key_counts) {
  EvalReport report;
  report.queries = items.size();
  for (Rank rank : kAllRanks) {
    RankReport& rr = report.ranks[static_cast<std::size_t>(rank)];
    for (bool seen_side : {true, false}) {
      std::vector<Label> preds, golds;
      std::size_t abstained = 0;
      for (const auto& it : items) {
        if (it.gold_seen != seen_side || !it.gold.has(rank)) continue;
        golds.push_back(it.gold.at(rank));
        preds.push_back(it.predicted.at(rank));
        if (!preds.back()) ++abstained;
      }
      if (golds.empty()) continue;
      const double micro = micro_accuracy(preds, golds);
      const double macro = macro_accuracy(preds, golds);
      if (seen_side) {
        rr.micro_seen = micro;
        rr.macro_seen = macro;
        rr.evaluated_seen = golds.size();
        rr.abstained_seen = abstained;
      } else {
        rr.micro_unseen = micro;
        rr.macro_unseen = macro;
        rr.evaluated_unseen = golds.size();
        rr.abstained_unseen = abstained;
      }
    }
    if (rr.micro_seen && rr.micro_unseen) {
      rr.hm_micro = harmonic_mean(*rr.micro_seen, *rr.micro_unseen);
      rr.hm_macro = harmonic_mean(*rr.macro_seen, *rr.macro_unseen);
    }
  }

  for (const auto& it : items) {
    const auto& species = it.gold.at(Rank::kSpecies);
    if (!species) continue;
    auto& s = report.species[*species];
    ++s.total;
    s.seen = it.gold_seen;
    const auto& pred = it.predicted.at(Rank::kSpecies);
    if (pred && *pred == *species) ++s.correct;
    auto kc = species_key_counts.find(*species);
    s.key_count = kc == species_key_counts.end() ? 0 : kc->second;
  }
  std::map<std::string, double> acc_seen, acc_unseen;
  std::map<std::string, std::size_t> kc_all;
  std::size_t max_kc = 0;
  for (const auto& [name, s] : report.species) {
    (s.seen ? acc_seen : acc_unseen)[name] = s.accuracy();
    kc_all[name] = s.key_count;
    max_kc = std::max(max_kc, s.key_count);
  }
  const auto edges = power_of_two_edges(max_kc);
  report.bins_seen = binned_species_accuracy(acc_seen, kc_all, edges);
  report.bins_unseen = binned_species_accuracy(acc_unseen, kc_all, edges);

  std::vector<bool> branch, gold;
  bool have_branches = !items.empty();
  for (const auto& it : items) {
    if (!it.branch_seen) {
      have_branches = false;
      break;
    }
    branch.push_back(*it.branch_seen);
    gold.push_back(it.gold_seen);
  }
  const bool both_sides = std::find(gold.begin(), gold.end(), true) != gold.end() &&
                          std::find(gold.begin(), gold.end(), false) != gold.end();
  if (have_branches && both_sides) {
    report.binary = seen_unseen_binary_accuracy(branch, gold);
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j;
  j["queries"] = report.queries;
  for (Rank rank : kAllRanks) {
    const auto& r = report.ranks[static_cast<std::size_t>(rank)];
    j["ranks"][std::string(rank_name(rank))] = {
        {"micro_seen", opt(r.micro_seen)},     {"micro_unseen", opt(r.micro_unseen)},
        {"macro_seen", opt(r.macro_seen)},     {"macro_unseen", opt(r.macro_unseen)},
        {"hm_micro", opt(r.hm_micro)},         {"hm_macro", opt(r.hm_macro)},
        {"evaluated_seen", r.evaluated_seen},  {"evaluated_unseen", r.evaluated_unseen},
        {"abstained_seen", r.abstained_seen},  {"abstained_unseen", r.abstained_unseen}};
  }
  json species = json::object();
  for (const auto& [name, s] : report.species) {
    species[name] = {{"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy()},
                     {"key_count", s.key_count}, {"seen", s.seen}};
  }
  j["species"] = species;
  auto bins = [](const std::vector<AccuracyBin>& bs) {
    json arr = json::array();
    for (const auto& b : bs) {
      arr.push_back({{"lower", b.lower},
                     {"upper", b.upper ? json(*b.upper) : json(nullptr)},
                     {"species", b.species},
                     {"mean_accuracy", b.mean_accuracy}});
    }
    return arr;
  };
  j["bins_seen"] = bins(report.bins_seen);
  j["bins_unseen"] = bins(report.bins_unseen);
  if (report.binary) {
    j["binary"] = {{"seen", report.binary->seen}, {"unseen", report.binary->unseen}, {"hm", report.binary->hm}};
  } else {
    j["binary"] = nullptr;
  }
  return j.dump(2) + "\n";
}

std::string report_to_text(const EvalReport& report) {
  auto cell = [](const std::optional<double>& v) {
    char buf[16];
    if (v) {
      std::snprintf(buf, sizeof(buf), "%7.1f", *v);
    } else {
      std::snprintf(buf, sizeof(buf), "%7s", "-");
    }
    return std::string(buf);
  };
  std::ostringstream os;
  os << "             |        Micro top-1 acc        |        Macro top-1 acc\n";
  os << "Taxon        |    Seen  Unseen    H.M. |    Seen  Unseen    H.M.\n";
  os << "-------------+-------------------------+------------------------\n";
  for (Rank rank : kAllRanks) {
    const auto& r = report.ranks[static_cast<std::size_t>(rank)];
    char name[16];
    std::snprintf(name, sizeof(name), "%-12s", std::string(rank_name(rank)).c_str());
    os << name << " | " << cell(r.micro_seen) << ' ' << cell(r.micro_unseen) << ' ' << cell(r.hm_micro)
       << " | " << cell(r.macro_seen) << ' ' << cell(r.macro_unseen) << ' ' << cell(r.hm_macro) << '\n';
  }
  if (report.binary) {
    os << "\nseen/unseen routing | seen " << cell(report.binary->seen) << "  unseen "
       << cell(report.binary->unseen) << "  H.M. " << cell(report.binary->hm) << '\n';
  }
  return os.str();
}

}  // namespace tmal
