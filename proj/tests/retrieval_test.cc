#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "oracles.h"
#include "test_util.h"
#include "tmal/retrieval.h"

namespace tmal {
namespace {

using testing::random_unit_rows;

std::span<const double> row_span(const Matrix& m, Eigen::Index i) {
  return {m.data() + i * m.cols(), static_cast<std::size_t>(m.cols())};
}

Taxonomy species_taxon(const std::string& species) { return Taxonomy("O", "F", "G", species); }

KeyIndex index_of(const Matrix& keys, const std::vector<std::string>& ids, const std::vector<Taxonomy>& taxa = {}) {
  std::vector<Taxonomy> t = taxa;
  if (t.empty()) {
    for (const auto& id : ids) t.push_back(species_taxon("G " + id));
  }
  return KeyIndex::build(keys, ids, t, KeyStrategy::kDna);
}

std::vector<std::string> make_ids(std::size_t n, Rng& rng) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("k" + std::to_string(i));
  rng.shuffle(ids);
  return ids;
}

TEST(KeyIndexTest, TopKMatchesNaiveScan) {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(trial < 10 ? 1000 : 64);
    const auto d = static_cast<Eigen::Index>(1 + rng.below(16));
    Matrix keys = random_unit_rows(static_cast<Eigen::Index>(m), d, rng);
    // Duplicate rows force exact similarity ties.
    for (std::size_t i = 1; i < m; ++i) {
      if (rng.below(3) == 0) keys.row(static_cast<Eigen::Index>(i)) = keys.row(static_cast<Eigen::Index>(rng.below(i)));
    }
    const auto ids = make_ids(m, rng);
    const KeyIndex index = index_of(keys, ids);
    const Matrix q = random_unit_rows(1, d, rng);
    const std::size_t k = 1 + rng.below(m);
    const auto got = index.query_topk(row_span(q, 0), k);
    const auto want = testing::naive_topk(keys, ids, q.data(), k);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < k; ++i) {
      ASSERT_EQ(got[i].record_id, want[i].first) << "trial " << trial << " rank " << i;
      ASSERT_EQ(got[i].similarity, want[i].second);
    }
  }
}

TEST(KeyIndexTest, ExactMatchAndOrthogonalTies) {
  Rng rng(1);
  const Matrix keys = random_unit_rows(5, 4, rng);
  const KeyIndex index = index_of(keys, {"e", "d", "c", "b", "a"});
  EXPECT_EQ(index.size(), 5u);
  const auto top = index.query_topk(row_span(keys, 2), 1);
  EXPECT_EQ(top[0].record_id, "c");
  EXPECT_NEAR(top[0].similarity, 1.0, 1e-6);

  Matrix axes = Matrix::Zero(3, 4);
  axes(0, 0) = axes(1, 1) = axes(2, 2) = 1.0;
  const KeyIndex ortho = index_of(axes, {"z", "x", "y"});
  Matrix q = Matrix::Zero(1, 4);
  q(0, 3) = 1.0;
  const auto all = ortho.query_topk(row_span(q, 0), 3);
  EXPECT_EQ(all[0].record_id, "x");
  EXPECT_EQ(all[1].record_id, "y");
  EXPECT_EQ(all[2].record_id, "z");
  for (const auto& n : all) EXPECT_EQ(n.similarity, 0.0);
}

TEST(KeyIndexTest, Errors) {
  Rng rng(2);
  EXPECT_THROW(index_of(Matrix(0, 3), {}), UsageError);
  const Matrix keys = random_unit_rows(2, 3, rng);
  EXPECT_THROW(index_of(keys, {"a", "a"}), UsageError);
  EXPECT_THROW(index_of(keys * 2.0, {"a", "b"}), UsageError);
  const KeyIndex index = index_of(keys, {"a", "b"});
  EXPECT_THROW(index.query_topk(row_span(keys, 0), 0), UsageError);
  EXPECT_THROW(index.query_topk(row_span(keys, 0), 3), UsageError);
  try {
    index_of(Matrix(0, 3), {});
  } catch (const UsageError& e) {
    EXPECT_STREQ(e.what(), "empty key set");
  }
}

TEST(AvgIndexTest, Cases) {
  Rng rng(3);
  const Matrix img = random_unit_rows(30, 6, rng), dna = random_unit_rows(30, 6, rng);
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back("r" + std::to_string(i));
  const KeyIndex ii = KeyIndex::build(img, ids, std::vector<Taxonomy>(30, species_taxon("G a")), KeyStrategy::kImage);
  std::vector<std::string> rev(ids.rbegin(), ids.rend());
  Matrix dna_perm(30, 6);
  for (int i = 0; i < 30; ++i) dna_perm.row(i) = dna.row(29 - i);
  const KeyIndex di = KeyIndex::build(dna_perm, rev, std::vector<Taxonomy>(30, species_taxon("G a")), KeyStrategy::kDna);
  const KeyIndex avg = make_avg_index(ii, di);
  EXPECT_EQ(avg.strategy(), KeyStrategy::kAvg);
  for (std::size_t i = 0; i < 30; ++i) {
    const auto r = avg.row(i);
    const Eigen::Map<const RowVector> a(r.data(), 6);
    EXPECT_NEAR(a.norm(), 1.0, 1e-12);
    const RowVector x = img.row(static_cast<Eigen::Index>(i)), y = dna.row(static_cast<Eigen::Index>(i));
    const double arc = std::acos(std::clamp(x.dot(y), -1.0, 1.0));
    const double ax = std::acos(std::clamp(a.dot(x), -1.0, 1.0)), ay = std::acos(std::clamp(a.dot(y), -1.0, 1.0));
    EXPECT_NEAR(ax, arc / 2.0, 1e-9);
    EXPECT_NEAR(ay, arc / 2.0, 1e-9);
  }

  const KeyIndex same = make_avg_index(ii, KeyIndex::build(img, ids, std::vector<Taxonomy>(30, species_taxon("G a")), KeyStrategy::kDna));
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(same.row(i)[c], img(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)), 1e-15);

  const KeyIndex neg = KeyIndex::build(-img, ids, std::vector<Taxonomy>(30, species_taxon("G a")), KeyStrategy::kDna);
  EXPECT_THROW(make_avg_index(ii, neg), NumericalError);
  std::vector<std::string> other = ids;
  other[0] = "zz";
  EXPECT_THROW(make_avg_index(ii, KeyIndex::build(img, other, std::vector<Taxonomy>(30, species_taxon("G a")), KeyStrategy::kDna)),
               UsageError);
}

TEST(ClassifyTest, NearestKeyLabels) {
  Matrix keys(2, 2);
  keys << 1, 0, 0, 1;
  const KeyIndex single = KeyIndex::build(Matrix(keys.topRows(1)), {"a"}, {Taxonomy("Diptera", "", "", "")}, KeyStrategy::kDna);
  Matrix q(1, 2);
  q << 0, 1;
  EXPECT_EQ(classify_by_nn(single, row_span(q, 0), Rank::kOrder).label, "Diptera");

  const KeyIndex partial = KeyIndex::build(keys, {"a", "b"}, {Taxonomy("O", "F", "G", ""), Taxonomy("O", "F", "H", "H s")},
                                           KeyStrategy::kDna);
  q << 0.8, 0.6;
  EXPECT_FALSE(classify_by_nn(partial, row_span(q, 0), Rank::kSpecies).label.has_value());
  EXPECT_EQ(classify_by_nn(partial, row_span(q, 0), Rank::kGenus).label, "G");
  EXPECT_EQ(classify_by_nn(partial, row_span(q, 0), Rank::kGenus).nearest.record_id, "a");
}

// Seen keys along e0/e1; unseen DNA keys along e2/e3.
struct OpenSetToy {
  KeyIndex seen, unseen;
  Matrix queries;
  std::vector<std::string> gold;
  std::vector<bool> gold_seen;
};

OpenSetToy make_toy() {
  Matrix seen = Matrix::Zero(2, 4), unseen = Matrix::Zero(2, 4);
  seen(0, 0) = seen(1, 1) = 1.0;
  unseen(0, 2) = unseen(1, 3) = 1.0;
  OpenSetToy t{KeyIndex::build(seen, {"s0", "s1"}, {species_taxon("G a"), species_taxon("G b")}, KeyStrategy::kImage),
               KeyIndex::build(unseen, {"u0", "u1"}, {species_taxon("G c"), species_taxon("G d")}, KeyStrategy::kDna),
               Matrix(8, 4), {}, {}};
  auto put = [&](Eigen::Index r, int axis, double s, const std::string& g, bool is_seen) {
    RowVector v = RowVector::Zero(4);
    v(axis) = s;
    v((axis + 2) % 4) = std::sqrt(1.0 - s * s);
    t.queries.row(r) = v;
    t.gold.push_back(g);
    t.gold_seen.push_back(is_seen);
  };
  put(0, 0, 0.95, "G a", true);
  put(1, 1, 0.97, "G b", true);
  put(2, 0, 0.92, "G a", true);
  put(3, 1, 0.96, "G b", true);
  put(4, 2, 0.99, "G c", false);
  put(5, 3, 0.98, "G d", false);
  put(6, 2, 0.95, "G c", false);
  put(7, 3, 0.97, "G d", false);
  return t;
}

TEST(OpenSetTest, ThresholdBoundariesAndSeparableToy) {
  const OpenSetToy t = make_toy();
  for (Eigen::Index i = 0; i < t.queries.rows(); ++i) {
    EXPECT_EQ(open_set_classify_nn(row_span(t.queries, i), t.seen, t.unseen, 0.0).branch, Branch::kSeen);
    EXPECT_EQ(open_set_classify_nn(row_span(t.queries, i), t.seen, t.unseen, 1.0).branch, Branch::kUnseen);
    const auto p = open_set_classify_nn(row_span(t.queries, i), t.seen, t.unseen, 0.6);
    EXPECT_EQ(p.branch == Branch::kSeen, t.gold_seen[static_cast<std::size_t>(i)]);
    EXPECT_EQ(p.label, t.gold[static_cast<std::size_t>(i)]);
  }
  // Query identical to a seen key scores exactly 1 and stays seen at t1 = 1.
  Matrix dup = Matrix::Zero(1, 4);
  dup(0, 0) = 1.0;
  EXPECT_EQ(open_set_classify_nn(row_span(dup, 0), t.seen, t.unseen, 1.0).branch, Branch::kSeen);
}

TEST(OpenSetTest, BranchingMonotoneInThreshold) {
  Rng rng(4);
  const Matrix seen = random_unit_rows(10, 5, rng), unseen = random_unit_rows(6, 5, rng), q = random_unit_rows(40, 5, rng);
  std::vector<std::string> sid, uid;
  for (int i = 0; i < 10; ++i) sid.push_back("s" + std::to_string(i));
  for (int i = 0; i < 6; ++i) uid.push_back("u" + std::to_string(i));
  const KeyIndex si = index_of(seen, sid), ui = index_of(unseen, uid);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    bool went_unseen = false;
    for (int j = 0; j <= 20; ++j) {
      const bool unseen_branch = open_set_classify_nn(row_span(q, i), si, ui, j / 20.0).branch == Branch::kUnseen;
      if (went_unseen) {
        EXPECT_TRUE(unseen_branch);
      }
      went_unseen = went_unseen || unseen_branch;
    }
  }
}

// Independent H.M. sweep over the same grid.
std::pair<double, double> oracle_tune(const std::vector<OpenSetScore>& s, const std::vector<std::string>& gold,
                                      const std::vector<bool>& seen, std::size_t grid) {
  double best_t = 0.0, best_hm = -1.0;
  for (std::size_t j = 0; j < grid; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(grid - 1);
    double cs = 0, cu = 0, ns = 0, nu = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto pred = s[i].score >= t ? s[i].seen_label : s[i].unseen_label;
      const bool ok = pred.has_value() && *pred == gold[i];
      (seen[i] ? ns : nu) += 1;
      (seen[i] ? cs : cu) += ok ? 1 : 0;
    }
    const double a = 100 * cs / ns, b = 100 * cu / nu;
    const double hm = a + b == 0 ? 0 : 2 * a * b / (a + b);
    if (hm > best_hm) {
      best_hm = hm;
      best_t = t;
    }
  }
  return {best_t, best_hm};
}

TEST(TuneTest, MatchesGridOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<OpenSetScore> scores;
    std::vector<std::string> gold;
    std::vector<bool> seen;
    for (std::size_t i = 0; i < n; ++i) {
      OpenSetScore s;
      s.score = std::round(rng.uniform() * 50) / 50;
      const std::string g = "sp" + std::to_string(rng.below(4));
      s.seen_label = rng.below(3) ? g : "other";
      if (rng.below(2)) s.unseen_label = rng.below(2) ? g : "x";
      scores.push_back(s);
      gold.push_back(g);
      seen.push_back(i == 0 || (i != 1 && rng.below(2) == 0));
    }
    const std::size_t grid = trial % 10 == 0 ? 2 : 1000;
    const TuneResult r = tune_threshold(scores, gold, seen, grid);
    const auto [t, hm] = oracle_tune(scores, gold, seen, grid);
    EXPECT_EQ(r.threshold, t);
    EXPECT_EQ(r.hm, hm);
    ASSERT_EQ(r.curve.size(), grid);
    for (double c : r.curve) EXPECT_LE(c, r.hm);
  }
}

TEST(TuneTest, SeparableToyReachesFullHarmonicMean) {
  const OpenSetToy t = make_toy();
  const auto scores = open_set_scores_nn(t.queries, t.seen, t.unseen);
  const TuneResult r = tune_threshold(scores, t.gold, t.gold_seen);
  EXPECT_EQ(r.hm, 100.0);
  EXPECT_GT(r.threshold, 0.0);
  EXPECT_LE(r.threshold, 0.92);
  const std::vector<OpenSetScore> one_sided(scores.begin(), scores.begin() + 4);
  EXPECT_THROW(tune_threshold(one_sided, std::vector<std::string>(t.gold.begin(), t.gold.begin() + 4),
                              std::vector<bool>(4, true)),
               UsageError);
}

TEST(LinearProbeTest, UniformLogitsFallBack) {
  const nn::Linear zero("probe", Matrix::Zero(4, 10), RowVector::Zero(10));
  std::vector<std::string> classes;
  for (int i = 0; i < 10; ++i) classes.push_back("c" + std::to_string(i));
  const LinearProbe probe(zero, classes);
  Rng rng(6);
  const Matrix q = random_unit_rows(1, 4, rng);
  const KeyIndex unseen = index_of(random_unit_rows(2, 4, rng), {"u0", "u1"});
  EXPECT_NEAR(probe.probabilities(row_span(q, 0)).maxCoeff(), 0.1, 1e-15);
  EXPECT_EQ(open_set_classify_linear(row_span(q, 0), probe, 0.2, unseen).branch, Branch::kUnseen);
  const auto p = open_set_classify_linear(row_span(q, 0), probe, 0.0, unseen);
  EXPECT_EQ(p.branch, Branch::kSeen);
  EXPECT_EQ(p.label, "c0");
}

TEST(LinearProbeTest, LearnsSeparableClassesAndBranches) {
  const OpenSetToy t = make_toy();
  Matrix train(40, 4);
  std::vector<std::string> labels;
  Rng rng(7);
  for (int i = 0; i < 40; ++i) {
    RowVector v = RowVector::Zero(4);
    v(i % 2) = 1.0;
    // Label-free variance on the unseen axes pulls their weights toward zero.
    v(2) = 0.5 * rng.normal();
    v(3) = 0.5 * rng.normal();
    train.row(i) = v.normalized();
    labels.push_back(i % 2 ? "G b" : "G a");
  }
  ProbeOptions po;
  po.epochs = 2000;
  po.lr = 0.05;
  const LinearProbe probe = train_linear_probe(train, labels, po);
  EXPECT_EQ(probe.classes(), (std::vector<std::string>{"G a", "G b"}));
  const auto scores = open_set_scores_linear(t.queries, probe, t.unseen);
  const TuneResult r = tune_threshold(scores, t.gold, t.gold_seen);
  EXPECT_EQ(r.hm, 100.0);
  std::vector<bool> branch;
  for (Eigen::Index i = 0; i < t.queries.rows(); ++i)
    branch.push_back(open_set_classify_linear(row_span(t.queries, i), probe, r.threshold, t.unseen).branch == Branch::kSeen);
  EXPECT_EQ(branch, t.gold_seen);
}

TEST(EmbeddingStoreTest, RoundTrip) {
  Rng rng(8);
  const auto dir = std::filesystem::temp_directory_path() / "tmal_store_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "keys.tmaf").string();
  EmbeddingStore s{random_unit_rows(5, 3, rng), {"a", "b", "c", "d", "e"}, "dna"};
  save_embedding_store(s, path);
  const EmbeddingStore back = load_embedding_store(path);
  EXPECT_EQ(back.record_ids, s.record_ids);
  EXPECT_EQ(back.tag, "dna");
  EXPECT_LT((back.matrix - s.matrix).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_TRUE(std::filesystem::exists(store_sidecar_path(path)));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace tmal
