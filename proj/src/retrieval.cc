#include "tmal/retrieval.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <unordered_set>

namespace tmal {
namespace {

constexpr double kNormTolerance = 1e-6;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::span<const double> row_span(const Matrix& m, Eigen::Index i) {
  return {m.data() + i * m.cols(), static_cast<std::size_t>(m.cols())};
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace

std::string_view key_strategy_name(KeyStrategy s) {
  switch (s) {
    case KeyStrategy::kImage:
      return "image";
    case KeyStrategy::kDna:
      return "dna";
    case KeyStrategy::kText:
      return "text";
    case KeyStrategy::kAvg:
      return "avg";
  }
  return "unknown";
}

KeyStrategy parse_key_strategy(std::string_view name) {
  for (KeyStrategy s : {KeyStrategy::kImage, KeyStrategy::kDna, KeyStrategy::kText, KeyStrategy::kAvg}) {
    if (key_strategy_name(s) == name) return s;
  }
  throw UsageError("unknown key strategy '" + std::string(name) + "'");
}

KeyStrategy strategy_for(Modality m) {
  switch (m) {
    case Modality::kImage:
      return KeyStrategy::kImage;
    case Modality::kDna:
      return KeyStrategy::kDna;
    case Modality::kText:
      return KeyStrategy::kText;
  }
  return KeyStrategy::kImage;
}

KeyIndex KeyIndex::build(const EmbeddingBatch& keys, std::vector<Taxonomy> taxonomies) {
  return build(keys.matrix, keys.record_ids, std::move(taxonomies), strategy_for(keys.modality));
}

KeyIndex KeyIndex::build(const Matrix& keys, std::vector<std::string> record_ids,
                         std::vector<Taxonomy> taxonomies, KeyStrategy strategy) {
  if (keys.rows() == 0) throw UsageError("empty key set");
  const auto n = static_cast<std::size_t>(keys.rows());
  if (record_ids.size() != n || taxonomies.size() != n) {
    throw UsageError("key index: ids/taxonomies do not match key count");
  }
  std::unordered_set<std::string> unique(record_ids.begin(), record_ids.end());
  if (unique.size() != n) throw UsageError("key index: duplicate record ids");
  for (Eigen::Index i = 0; i < keys.rows(); ++i) {
    const double norm = keys.row(i).norm();
    if (!(std::abs(norm - 1.0) <= kNormTolerance)) {
      throw UsageError("key index: key '" + record_ids[static_cast<std::size_t>(i)] +
                       "' is not unit-norm (" + std::to_string(norm) + ")");
    }
  }
  KeyIndex idx;
  idx.dim_ = static_cast<std::size_t>(keys.cols());
  idx.keys_.assign(keys.data(), keys.data() + keys.size());
  idx.ids_ = std::move(record_ids);
  idx.taxonomies_ = std::move(taxonomies);
  idx.strategy_ = strategy;
  return idx;
}

std::optional<std::size_t> KeyIndex::find(const std::string& record_id) const {
  auto it = std::find(ids_.begin(), ids_.end(), record_id);
  if (it == ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ids_.begin());
}

double KeyIndex::similarity(std::span<const double> q, std::size_t key) const {
  return dot(q, row(key));
}

std::vector<Neighbor> KeyIndex::query_topk(std::span<const double> q, std::size_t k) const {
  if (k < 1 || k > size()) {
    throw UsageError("k=" + std::to_string(k) + " out of range [1, " + std::to_string(size()) + "]");
  }
  if (q.size() != dim_) throw UsageError("query dimension does not match key dimension");
  std::vector<double> sims(size());
  for (std::size_t i = 0; i < size(); ++i) sims[i] = similarity(q, i);
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return ids_[a] < ids_[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  std::vector<Neighbor> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j) out.push_back({order[j], ids_[order[j]], sims[order[j]]});
  return out;
}

KeyIndex make_avg_index(const KeyIndex& image_keys, const KeyIndex& dna_keys) {
  if (image_keys.size() != dna_keys.size() || image_keys.dim() != dna_keys.dim()) {
    throw UsageError("average keys: image and DNA key sets differ in size or dimension");
  }
  std::map<std::string, std::size_t> dna_pos;
  for (std::size_t i = 0; i < dna_keys.size(); ++i) dna_pos[dna_keys.record_id(i)] = i;
  Matrix avg(static_cast<Eigen::Index>(image_keys.size()), static_cast<Eigen::Index>(image_keys.dim()));
  std::vector<std::string> ids;
  std::vector<Taxonomy> taxa;
  for (std::size_t i = 0; i < image_keys.size(); ++i) {
    auto it = dna_pos.find(image_keys.record_id(i));
    if (it == dna_pos.end()) {
      throw UsageError("average keys: record '" + image_keys.record_id(i) + "' has no DNA key");
    }
    const auto a = image_keys.row(i);
    const auto b = dna_keys.row(it->second);
    double norm2 = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double m = 0.5 * (a[j] + b[j]);
      avg(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m;
      norm2 += m * m;
    }
    const double norm = std::sqrt(norm2);
    if (norm < 1e-12) {
      throw NumericalError("degenerate average (zero vector) for record '" + image_keys.record_id(i) + "'");
    }
    avg.row(static_cast<Eigen::Index>(i)) /= norm;
    ids.push_back(image_keys.record_id(i));
    taxa.push_back(image_keys.taxonomy(i));
  }
  return KeyIndex::build(avg, std::move(ids), std::move(taxa), KeyStrategy::kAvg);
}

NnPrediction classify_by_nn(const KeyIndex& index, std::span<const double> q, Rank level) {
  if (index.size() == 0) throw UsageError("empty key set");
  NnPrediction p;
  p.nearest = index.query_topk(q, 1).front();
  p.label = index.taxonomy(p.nearest.key).at(level);
  return p;
}

std::string_view branch_name(Branch b) { return b == Branch::kSeen ? "seen" : "unseen"; }

Branch parse_branch(std::string_view name) {
  if (name == "seen") return Branch::kSeen;
  if (name == "unseen") return Branch::kUnseen;
  throw DataError("unknown branch '" + std::string(name) + "'");
}

OpenSetPrediction open_set_classify_nn(std::span<const double> q, const KeyIndex& seen_image_keys,
                                       const KeyIndex& unseen_dna_keys, double t1) {
  const NnPrediction seen = classify_by_nn(seen_image_keys, q, Rank::kSpecies);
  OpenSetPrediction out;
  out.score = seen.nearest.similarity;
  if (out.score >= t1) {
    out.branch = Branch::kSeen;
    out.label = seen.label;
    out.key_record_id = seen.nearest.record_id;
  } else {
    const NnPrediction unseen = classify_by_nn(unseen_dna_keys, q, Rank::kSpecies);
    out.branch = Branch::kUnseen;
    out.label = unseen.label;
    out.key_record_id = unseen.nearest.record_id;
  }
  return out;
}

LinearProbe::LinearProbe(nn::Linear layer, std::vector<std::string> classes)
    : layer_(std::move(layer)), classes_(std::move(classes)) {
  if (static_cast<std::size_t>(layer_.out_dim()) != classes_.size()) {
    throw UsageError("linear probe: output dimension does not match class count");
  }
}

RowVector LinearProbe::probabilities(std::span<const double> q) const {
  if (q.size() != static_cast<std::size_t>(layer_.in_dim())) {
    throw UsageError("linear probe: query dimension mismatch");
  }
  Matrix x(1, static_cast<Eigen::Index>(q.size()));
  for (std::size_t j = 0; j < q.size(); ++j) x(0, static_cast<Eigen::Index>(j)) = q[j];
  RowVector logits = layer_.forward(x).row(0);
  logits.array() -= logits.maxCoeff();
  logits = logits.array().exp();
  return logits / logits.sum();
}

LinearProbe train_linear_probe(const Matrix& embeddings, const std::vector<std::string>& labels,
                               const ProbeOptions& opts) {
  if (embeddings.rows() == 0) throw UsageError("linear probe: no training data");
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) {
    throw UsageError("linear probe: label count mismatch");
  }
  const std::set<std::string> distinct(labels.begin(), labels.end());
  std::vector<std::string> classes(distinct.begin(), distinct.end());
  std::map<std::string, Eigen::Index> class_of;
  for (std::size_t c = 0; c < classes.size(); ++c) class_of[classes[c]] = static_cast<Eigen::Index>(c);

  Rng rng(derive_seed(opts.seed, "linear-probe"));
  nn::Linear layer("probe", static_cast<int>(embeddings.cols()), static_cast<int>(classes.size()), rng);
  std::vector<nn::Param*> params;
  layer.collect(params);
  nn::Adam adam({.lr = opts.lr});

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += bs) {
      const std::size_t end = std::min(order.size(), pos + bs);
      const auto n = static_cast<Eigen::Index>(end - pos);
      Matrix x(n, embeddings.cols());
      for (Eigen::Index i = 0; i < n; ++i) x.row(i) = embeddings.row(static_cast<Eigen::Index>(order[pos + static_cast<std::size_t>(i)]));
      Matrix grad = layer.forward(x);
      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = grad.row(i);
        row.array() -= row.maxCoeff();
        row = row.array().exp();
        row /= row.sum();
        row(class_of.at(labels[order[pos + static_cast<std::size_t>(i)]])) -= 1.0;
      }
      grad /= static_cast<double>(n);
      for (nn::Param* p : params) p->zero_grad();
      layer.backward(x, grad);
      adam.step(params);
    }
  }
  return LinearProbe(std::move(layer), std::move(classes));
}

OpenSetPrediction open_set_classify_linear(std::span<const double> q, const LinearProbe& probe,
                                           double t2, const KeyIndex& unseen_dna_keys) {
  const RowVector probs = probe.probabilities(q);
  Eigen::Index best = 0;
  probs.maxCoeff(&best);
  OpenSetPrediction out;
  out.score = probs(best);
  if (out.score >= t2) {
    out.branch = Branch::kSeen;
    out.label = probe.classes()[static_cast<std::size_t>(best)];
  } else {
    const NnPrediction unseen = classify_by_nn(unseen_dna_keys, q, Rank::kSpecies);
    out.branch = Branch::kUnseen;
    out.label = unseen.label;
    out.key_record_id = unseen.nearest.record_id;
  }
  return out;
}

std::vector<OpenSetScore> open_set_scores_nn(const Matrix& queries, const KeyIndex& seen_image_keys,
                                             const KeyIndex& unseen_dna_keys) {
  std::vector<OpenSetScore> out;
  out.reserve(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const auto q = row_span(queries, i);
    const NnPrediction seen = classify_by_nn(seen_image_keys, q, Rank::kSpecies);
    const NnPrediction unseen = classify_by_nn(unseen_dna_keys, q, Rank::kSpecies);
    out.push_back({seen.nearest.similarity, seen.label, unseen.label});
  }
  return out;
}

std::vector<OpenSetScore> open_set_scores_linear(const Matrix& queries, const LinearProbe& probe,
                                                 const KeyIndex& unseen_dna_keys) {
  std::vector<OpenSetScore> out;
  out.reserve(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const auto q = row_span(queries, i);
    const RowVector probs = probe.probabilities(q);
    Eigen::Index best = 0;
    probs.maxCoeff(&best);
    const NnPrediction unseen = classify_by_nn(unseen_dna_keys, q, Rank::kSpecies);
    out.push_back({probs(best), probe.classes()[static_cast<std::size_t>(best)], unseen.label});
  }
  return out;
}

TuneResult tune_threshold(std::span<const OpenSetScore> scores,
                          std::span<const std::string> gold_species,
                          const std::vector<bool>& gold_seen, std::size_t grid_size) {
  if (grid_size < 2) throw UsageError("threshold grid needs at least 2 points");
  if (scores.size() != gold_species.size() || scores.size() != gold_seen.size()) {
    throw UsageError("tune_threshold: input lengths differ");
  }
  const auto n_seen = static_cast<std::size_t>(std::count(gold_seen.begin(), gold_seen.end(), true));
  const std::size_t n_unseen = gold_seen.size() - n_seen;
  if (n_seen == 0 || n_unseen == 0) throw UsageError("H.M. undefined: need both seen and unseen queries");

  TuneResult best;
  best.hm = -1.0;
  best.curve.resize(grid_size);
  for (std::size_t j = 0; j < grid_size; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(grid_size - 1);
    std::size_t correct_seen = 0, correct_unseen = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const auto& pred = scores[i].score >= t ? scores[i].seen_label : scores[i].unseen_label;
      if (pred && *pred == gold_species[i]) ++(gold_seen[i] ? correct_seen : correct_unseen);
    }
    const double seen_acc = 100.0 * static_cast<double>(correct_seen) / static_cast<double>(n_seen);
    const double unseen_acc = 100.0 * static_cast<double>(correct_unseen) / static_cast<double>(n_unseen);
    const double hm = seen_acc + unseen_acc > 0.0 ? 2.0 * seen_acc * unseen_acc / (seen_acc + unseen_acc) : 0.0;
    best.curve[j] = hm;
    if (hm > best.hm) {
      best.hm = hm;
      best.threshold = t;
      best.seen_accuracy = seen_acc;
      best.unseen_accuracy = unseen_acc;
    }
  }
  return best;
}

std::string store_sidecar_path(const std::string& path) { return path + ".tsv"; }

void save_embedding_store(const EmbeddingStore& store, const std::string& path) {
  if (static_cast<std::size_t>(store.matrix.rows()) != store.record_ids.size()) {
    throw UsageError("embedding store: id count does not match rows");
  }
  FeatureMatrix fm;
  fm.rows = static_cast<std::uint64_t>(store.matrix.rows());
  fm.cols = static_cast<std::uint64_t>(store.matrix.cols());
  fm.values.resize(static_cast<std::size_t>(store.matrix.size()));
  for (Eigen::Index i = 0; i < store.matrix.size(); ++i) {
    fm.values[static_cast<std::size_t>(i)] = static_cast<float>(store.matrix.data()[i]);
  }
  save_feature_matrix(fm, path);
  std::ofstream side(store_sidecar_path(path), std::ios::binary);
  if (!side) throw DataError("cannot open for writing: " + store_sidecar_path(path));
  side << "row\trecord_id\tmodality\n";
  for (std::size_t i = 0; i < store.record_ids.size(); ++i) {
    side << i << '\t' << store.record_ids[i] << '\t' << store.tag << '\n';
  }
}

EmbeddingStore load_embedding_store(const std::string& path) {
  const FeatureMatrix fm = load_feature_matrix(path);
  EmbeddingStore store;
  store.matrix.resize(static_cast<Eigen::Index>(fm.rows), static_cast<Eigen::Index>(fm.cols));
  for (std::size_t i = 0; i < fm.values.size(); ++i) store.matrix.data()[i] = fm.values[i];

  const std::string side_path = store_sidecar_path(path);
  std::ifstream side(side_path);
  if (!side) throw DataError("cannot open: " + side_path);
  std::string line;
  if (!std::getline(side, line) || line != "row\trecord_id\tmodality") {
    throw DataError(side_path + ": expected header row<TAB>record_id<TAB>modality");
  }
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    if (cells.size() != 3) throw DataError(side_path + ": expected 3 columns");
    if (std::stoull(cells[0]) != store.record_ids.size()) throw DataError(side_path + ": rows out of order");
    if (store.tag.empty()) {
      store.tag = cells[2];
    } else if (store.tag != cells[2]) {
      throw DataError(side_path + ": mixed modalities in one store");
    }
    store.record_ids.push_back(cells[1]);
  }
  if (store.record_ids.size() != fm.rows) {
    throw DataError(side_path + ": " + std::to_string(store.record_ids.size()) + " ids for " +
                    std::to_string(fm.rows) + " rows");
  }
  return store;
}

}  // namespace tmal
