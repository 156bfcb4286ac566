#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "tmal/common.h"
#include "tmal/metrics.h"

namespace tmal {
namespace {

std::vector<Label> labels(std::initializer_list<const char*> xs) {
  std::vector<Label> out;
  for (const char* x : xs) out.push_back(x ? Label(x) : std::nullopt);
  return out;
}

TEST(HarmonicMeanTest, Values) {
  EXPECT_NEAR(harmonic_mean(65.4, 77.2), 70.8, 0.05);
  EXPECT_EQ(harmonic_mean(42.0, 42.0), 42.0);
  EXPECT_EQ(harmonic_mean(0.0, 93.0), 0.0);
  EXPECT_EQ(harmonic_mean(0.0, 0.0), 0.0);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double a = 100 * rng.uniform(), b = 100 * rng.uniform();
    EXPECT_LE(harmonic_mean(a, b), (a + b) / 2 + 1e-12);
  }
}

TEST(AccuracyTest, MicroExamples) {
  const auto g = labels({"a", "b", "c", "d"});
  EXPECT_EQ(micro_accuracy(g, g), 100.0);
  EXPECT_EQ(micro_accuracy(labels({"a", "x", "x", "x"}), g), 25.0);
  // Absent golds skipped; absent predictions wrong.
  EXPECT_EQ(micro_accuracy(labels({"a", "b", nullptr}), labels({nullptr, "b", "c"})), 50.0);
  EXPECT_THROW(micro_accuracy(labels({"a"}), labels({nullptr})), UsageError);
  EXPECT_THROW(macro_accuracy(std::vector<Label>{}, std::vector<Label>{}), UsageError);
}

TEST(AccuracyTest, MacroVersusMicro) {
  std::vector<Label> preds, golds;
  for (int i = 0; i < 9; ++i) {
    preds.push_back("a");
    golds.push_back("a");
  }
  preds.push_back("a");
  golds.push_back("b");
  EXPECT_DOUBLE_EQ(micro_accuracy(preds, golds), 90.0);
  EXPECT_DOUBLE_EQ(macro_accuracy(preds, golds), 50.0);
  const auto single = labels({"a", "a", "a"});
  const auto sp = labels({"a", "z", "a"});
  EXPECT_DOUBLE_EQ(macro_accuracy(sp, single), micro_accuracy(sp, single));
}

TEST(AccuracyTest, FuzzAgainstCounting) {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<Label> preds, golds;
    for (std::size_t i = 0; i < n; ++i) {
      golds.push_back(i == 0 || rng.below(8) ? Label("c" + std::to_string(rng.below(5))) : std::nullopt);
      preds.push_back(rng.below(6) ? Label("c" + std::to_string(rng.below(5))) : std::nullopt);
    }
    double correct = 0, total = 0;
    std::map<std::string, std::pair<double, double>> per;
    for (std::size_t i = 0; i < n; ++i) {
      if (!golds[i]) continue;
      const bool ok = preds[i] && *preds[i] == *golds[i];
      correct += ok;
      total += 1;
      per[*golds[i]].first += ok;
      per[*golds[i]].second += 1;
    }
    double macro = 0;
    for (const auto& [k, v] : per) macro += 100.0 * v.first / v.second;
    macro /= static_cast<double>(per.size());
    EXPECT_EQ(micro_accuracy(preds, golds), 100.0 * correct / total);
    EXPECT_NEAR(macro_accuracy(preds, golds), macro, 1e-12);
  }
}

TEST(AccuracyTest, BalancedConstantPatternsAgree) {
  std::vector<Label> preds, golds;
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 6; ++i) {
      golds.push_back("c" + std::to_string(c));
      preds.push_back(c % 2 ? golds.back() : Label("wrong"));
    }
  }
  EXPECT_LT(std::abs(micro_accuracy(preds, golds) - macro_accuracy(preds, golds)), 1e-9);
}

TEST(BinningTest, PowerOfTwoEdges) {
  EXPECT_EQ(power_of_two_edges(0), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(power_of_two_edges(5), (std::vector<std::size_t>{0, 1, 2, 4, 8}));
  EXPECT_EQ(power_of_two_edges(8), (std::vector<std::size_t>{0, 1, 2, 4, 8, 16}));
}

TEST(BinningTest, GroupsByKeyCount) {
  const std::map<std::string, double> acc{{"a", 10}, {"b", 20}, {"c", 30}, {"d", 50}};
  const std::map<std::string, std::size_t> keys{{"a", 1}, {"b", 2}, {"c", 3}, {"d", 9}};
  const auto edges = power_of_two_edges(9);
  const auto bins = binned_species_accuracy(acc, keys, edges);
  ASSERT_EQ(bins.size(), 3u);
  EXPECT_EQ(bins[0].lower, 1u);
  EXPECT_EQ(bins[0].mean_accuracy, 10.0);
  EXPECT_EQ(bins[1].lower, 2u);
  EXPECT_EQ(bins[1].upper, 4u);
  EXPECT_EQ(bins[1].species, 2u);
  EXPECT_EQ(bins[1].mean_accuracy, 25.0);
  EXPECT_EQ(bins[2].lower, 8u);
  EXPECT_EQ(bins[2].mean_accuracy, 50.0);

  const std::vector<std::size_t> one_edge{0};
  const auto single = binned_species_accuracy(acc, keys, one_edge);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_FALSE(single[0].upper.has_value());
  EXPECT_EQ(single[0].mean_accuracy, 27.5);
}

TEST(BinningTest, FuzzAgainstGrouping) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::map<std::string, double> acc;
    std::map<std::string, std::size_t> keys;
    std::size_t max_kc = 0;
    for (int s = 0; s < 40; ++s) {
      const std::string name = "s" + std::to_string(s);
      acc[name] = 100.0 * rng.uniform();
      keys[name] = static_cast<std::size_t>(std::pow(2.0, 8.0 * rng.uniform()));
      max_kc = std::max(max_kc, keys[name]);
    }
    const auto edges = power_of_two_edges(max_kc);
    std::map<std::size_t, std::pair<double, std::size_t>> oracle;
    for (const auto& [name, a] : acc) {
      std::size_t lo = 0;
      for (std::size_t e : edges)
        if (e <= keys[name]) lo = e;
      oracle[lo].first += a;
      oracle[lo].second += 1;
    }
    const auto bins = binned_species_accuracy(acc, keys, edges);
    ASSERT_EQ(bins.size(), oracle.size());
    std::size_t i = 0;
    for (const auto& [lo, v] : oracle) {
      EXPECT_EQ(bins[i].lower, lo);
      EXPECT_NEAR(bins[i].mean_accuracy, v.first / static_cast<double>(v.second), 1e-12);
      ++i;
    }
  }
}

TEST(BinaryAccuracyTest, Cases) {
  const std::vector<bool> gold{true, true, false, false};
  const auto perfect = seen_unseen_binary_accuracy(gold, gold);
  EXPECT_EQ(perfect.seen, 100.0);
  EXPECT_EQ(perfect.unseen, 100.0);
  EXPECT_EQ(perfect.hm, 100.0);
  const auto always = seen_unseen_binary_accuracy({true, true, true, true}, gold);
  EXPECT_EQ(always.seen, 100.0);
  EXPECT_EQ(always.unseen, 0.0);
  EXPECT_EQ(always.hm, 0.0);
  EXPECT_THROW(seen_unseen_binary_accuracy({true}, {true}), UsageError);
}

TEST(EvaluateTest, ReportFieldsAreConsistent) {
  Rng rng(4);
  std::vector<EvalItem> items;
  std::map<std::string, std::size_t> key_counts;
  for (int i = 0; i < 200; ++i) {
    const int sp = static_cast<int>(rng.below(12));
    const std::string genus = "G" + std::to_string(sp / 3);
    const std::string species = genus + " s" + std::to_string(sp);
    key_counts[species] = static_cast<std::size_t>(sp + 1);
    EvalItem it;
    it.gold = Taxonomy("O", "F" + std::to_string(sp / 6), genus, i % 17 == 0 ? "" : species);
    it.gold_seen = sp < 8;
    const int guess = rng.below(3) ? sp : static_cast<int>(rng.below(12));
    const std::string pg = "G" + std::to_string(guess / 3);
    it.predicted = rng.below(20) ? Taxonomy("O", "F" + std::to_string(guess / 6), pg, pg + " s" + std::to_string(guess))
                                 : Taxonomy("O", "", "", "");
    it.branch_seen = rng.below(4) ? it.gold_seen : !it.gold_seen;
    items.push_back(it);
  }
  const EvalReport r = evaluate(items, key_counts);
  EXPECT_EQ(r.queries, 200u);
  for (const RankReport& rr : r.ranks) {
    ASSERT_TRUE(rr.hm_micro && rr.hm_macro);
    EXPECT_NEAR(*rr.hm_micro, harmonic_mean(*rr.micro_seen, *rr.micro_unseen), 1e-9);
    EXPECT_NEAR(*rr.hm_macro, harmonic_mean(*rr.macro_seen, *rr.macro_unseen), 1e-9);
    for (double v : {*rr.micro_seen, *rr.micro_unseen, *rr.macro_seen, *rr.macro_unseen}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 100.0);
    }
  }
  // Species-less golds never reach the species denominator.
  std::size_t species_evaluated = 0;
  for (const auto& it : items) species_evaluated += it.gold.has(Rank::kSpecies);
  const RankReport& species = r.ranks[static_cast<std::size_t>(Rank::kSpecies)];
  EXPECT_EQ(species.evaluated_seen + species.evaluated_unseen, species_evaluated);
  EXPECT_GT(species.abstained_seen + species.abstained_unseen, 0u);
  ASSERT_TRUE(r.binary.has_value());
  std::vector<bool> branch, gold;
  for (const auto& it : items) {
    branch.push_back(*it.branch_seen);
    gold.push_back(it.gold_seen);
  }
  EXPECT_EQ(r.binary->hm, seen_unseen_binary_accuracy(branch, gold).hm);
  EXPECT_FALSE(r.bins_seen.empty());

  const std::string text = report_to_text(r);
  EXPECT_NE(text.find("species"), std::string::npos);
  EXPECT_NE(report_to_json(r).find("\"hm_micro\""), std::string::npos);
}

}  // namespace
}  // namespace tmal
