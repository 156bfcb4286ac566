#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "tmal/alignment.h"
#include "tmal/corpus.h"
#include "tmal/metrics.h"
#include "tmal/neuralnet.h"
#include "tmal/retrieval.h"
#include "tmal/splitter.h"

namespace {

using json = nlohmann::json;
using namespace tmal;

constexpr const char* kNone = "-";

std::uint64_t env_seed() {
  const char* s = std::getenv("TMAL_SEED");
  if (!s || !*s) return 1;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw UsageError(std::string("TMAL_SEED is not an unsigned integer: ") + s);
  }
}

void need(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string config_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) out += (out.empty() ? "" : ",") + config_scalar(e);
    return out;
  }
  return v.dump();
}

// Config file values become option defaults, so explicit flags still win.
void apply_config(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config: " + path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (!cfg.is_object()) throw DataError(path + ": config must be a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    CLI::Option* opt = sub.get_option_no_throw("--" + flag);
    if (!opt || flag == "config") throw UsageError(path + ": unknown key '" + key + "' for " + sub.get_name());
    opt->default_val(config_scalar(value));
  }
}

void log_resolved(const CLI::App& sub) {
  json j;
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    j[name] = value;
  }
  std::cerr << "config " << json{{"command", sub.get_name()}, {"options", j}}.dump() << '\n';
}

// ---- shared loaders -------------------------------------------------------

RecordSet load_corpus(const std::string& records, const std::string& features) {
  need(records, "--records");
  return load_records(records, features);
}

KeyIndex index_from_store(const EmbeddingStore& store, const RecordSet& corpus) {
  std::vector<Taxonomy> taxa;
  for (const auto& id : store.record_ids) taxa.push_back(corpus.by_id(id).taxonomy);
  return KeyIndex::build(store.matrix, store.record_ids, std::move(taxa), parse_key_strategy(store.tag));
}

EmbeddingStore load_store_tagged(const std::string& path, const char* flag, std::string_view tag) {
  need(path, flag);
  EmbeddingStore s = load_embedding_store(path);
  if (!tag.empty() && s.tag != tag) {
    throw UsageError(std::string(flag) + " expects a " + std::string(tag) + " store, got " + s.tag);
  }
  return s;
}

std::span<const double> row_of(const Matrix& m, std::size_t i) {
  return {m.data() + i * static_cast<std::size_t>(m.cols()), static_cast<std::size_t>(m.cols())};
}

struct ProbeFlags {
  std::string train_store;
  std::size_t epochs = 100;
  double lr = 1e-2;
};

LinearProbe fit_probe(const ProbeFlags& pf, const RecordSet& corpus, std::uint64_t seed) {
  const EmbeddingStore train = load_store_tagged(pf.train_store, "--probe-train", "");
  std::vector<Eigen::Index> keep;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < train.record_ids.size(); ++i) {
    const auto& sp = corpus.by_id(train.record_ids[i]).taxonomy.at(Rank::kSpecies);
    if (!sp) continue;
    keep.push_back(static_cast<Eigen::Index>(i));
    labels.push_back(*sp);
  }
  if (keep.empty()) throw DataError("--probe-train: no labelled records");
  Matrix x(static_cast<Eigen::Index>(keep.size()), train.matrix.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = train.matrix.row(keep[i]);
  ProbeOptions po;
  po.epochs = pf.epochs;
  po.lr = pf.lr;
  po.seed = derive_seed(seed, "probe");
  return train_linear_probe(x, labels, po);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  return out;
}

// ---- generate ---------------------------------------------------------------

struct GenerateArgs {
  std::string out, features;
  SyntheticCorpusOptions opts;
};

int run_generate(const GenerateArgs& a) {
  need(a.out, "--out");
  const RecordSet corpus = generate_synthetic_corpus(a.opts);
  save_records(corpus, a.out, a.features);
  std::cerr << "wrote " << corpus.size() << " records to " << a.out << '\n';
  return 0;
}

// ---- split ------------------------------------------------------------------

struct SplitArgs {
  std::string records, features, out;
  std::uint64_t seed = 1;
};

int run_split(const SplitArgs& a) {
  need(a.out, "--out");
  const RecordSet corpus = load_corpus(a.records, a.features);
  const SplitManifest m = partition(corpus, a.seed);
  const ValidationReport report = validate_manifest(corpus, m);
  if (!report.ok()) {
    std::cerr << report.to_string();
    return 2;
  }
  m.save(a.out);
  const auto counts = m.counts();
  for (std::size_t i = 0; i < kPartitionCount; ++i) {
    std::cerr << partition_name(static_cast<Partition>(i)) << '\t' << counts[i] << '\n';
  }
  if (counts[static_cast<std::size_t>(Partition::kExcluded)] == corpus.size()) {
    std::cerr << "warning: every record was excluded\n";
  }
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string records, features, manifest, out, log;
  std::uint64_t seed = 1;
  std::size_t epochs = 30, batch_size = 64;
  double lr = 1e-3, temperature = 0.07;
  std::string modalities = "image,dna,text";
  std::string reduction = "mean";
  ModelConfig model;
};

int run_train(const TrainArgs& a) {
  need(a.manifest, "--manifest");
  need(a.out, "--out");
  const RecordSet corpus = load_corpus(a.records, a.features);
  const SplitManifest manifest = SplitManifest::load(a.manifest);
  TrainerConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.lr = a.lr;
  tc.temperature = a.temperature;
  tc.seed = a.seed;
  tc.modalities.clear();
  for (const auto& m : split_list(a.modalities)) tc.modalities.push_back(parse_modality(m));
  if (a.reduction == "mean") {
    tc.reduction = Reduction::kMean;
  } else if (a.reduction == "sum") {
    tc.reduction = Reduction::kSum;
  } else {
    throw UsageError("--reduction must be mean or sum");
  }
  tc.validate();

  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!a.log.empty()) {
    log_file = open_out(a.log);
    log = &log_file;
  }
  TrainingResult result;
  const TriModalModel model = train(corpus, manifest, tc, a.model, &result, [&](const EpochLog& e) {
    *log << json{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"wall_ms", e.wall_ms}}.dump() << '\n';
    log->flush();
  });
  const json extra = {{"trainer",
                       {{"epochs", tc.epochs},
                        {"batch_size", tc.batch_size},
                        {"lr", tc.lr},
                        {"temperature", tc.temperature},
                        {"seed", tc.seed},
                        {"modalities", a.modalities},
                        {"reduction", a.reduction}}},
                      {"probe_loss", {{"initial", result.initial_probe_loss}, {"final", result.final_probe_loss}}}};
  std::ofstream out = open_out(a.out);
  nn::write_checkpoint(model.to_checkpoint(extra.dump()), out);
  std::cerr << "probe loss " << result.initial_probe_loss << " -> " << result.final_probe_loss << " after "
            << result.steps << " steps\n";
  return 0;
}

// ---- embed ------------------------------------------------------------------

struct EmbedArgs {
  std::string records, features, checkpoint, modality, out, manifest, partitions;
};

TriModalModel load_model(const std::string& path) {
  need(path, "--checkpoint");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  return TriModalModel::from_checkpoint(nn::read_checkpoint(in));
}

int run_embed(const EmbedArgs& a) {
  need(a.modality, "--modality");
  need(a.out, "--out");
  const RecordSet corpus = load_corpus(a.records, a.features);
  const TriModalModel model = load_model(a.checkpoint);
  const Modality m = parse_modality(a.modality);
  std::vector<std::size_t> rows;
  if (a.partitions.empty()) {
    for (std::size_t i = 0; i < corpus.size(); ++i) rows.push_back(i);
  } else {
    need(a.manifest, "--manifest");
    const SplitManifest manifest = SplitManifest::load(a.manifest);
    std::set<Partition> wanted;
    for (const auto& p : split_list(a.partitions)) wanted.insert(parse_partition(p));
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (wanted.contains(manifest.at(corpus[i].record_id))) rows.push_back(i);
    }
  }
  if (rows.empty()) throw DataError("no records selected for embedding");
  EmbeddingBatch batch = model.embed(m, corpus, rows);
  save_embedding_store({std::move(batch.matrix), std::move(batch.record_ids), std::string(modality_name(m))}, a.out);
  std::cerr << "embedded " << rows.size() << " records (" << modality_name(m) << ")\n";
  return 0;
}

// ---- index ------------------------------------------------------------------

struct IndexArgs {
  std::string image, dna, out;
};

int run_index(const IndexArgs& a) {
  need(a.out, "--out");
  const EmbeddingStore img = load_store_tagged(a.image, "--image", "image");
  const EmbeddingStore dna = load_store_tagged(a.dna, "--dna", "dna");
  const std::vector<Taxonomy> blank_img(img.record_ids.size()), blank_dna(dna.record_ids.size());
  const KeyIndex avg = make_avg_index(KeyIndex::build(img.matrix, img.record_ids, blank_img, KeyStrategy::kImage),
                                      KeyIndex::build(dna.matrix, dna.record_ids, blank_dna, KeyStrategy::kDna));
  EmbeddingStore out{Matrix(static_cast<Eigen::Index>(avg.size()), static_cast<Eigen::Index>(avg.dim())), {}, "avg"};
  for (std::size_t i = 0; i < avg.size(); ++i) {
    const auto r = avg.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) out.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = r[c];
    out.record_ids.push_back(avg.record_id(i));
  }
  save_embedding_store(out, a.out);
  return 0;
}

// ---- classify -----------------------------------------------------------------

struct ClassifyArgs {
  std::string records, features, queries, keys, seen_keys, unseen_keys, strategy = "dna", variant = "nn", out,
      threshold_from;
  double threshold = 0.5;
  std::size_t k = 1;
  unsigned threads = 1;
  std::uint64_t seed = 1;
  ProbeFlags probe;
};

struct PredictionRow {
  std::string predicted = kNone, branch = kNone, key = kNone, neighbors = kNone;
  double score = 0.0;
};

std::string format_neighbors(const std::vector<Neighbor>& ns) {
  std::ostringstream out;
  out << std::setprecision(9);
  for (std::size_t i = 0; i < ns.size(); ++i) out << (i ? "," : "") << ns[i].record_id << ':' << ns[i].similarity;
  return out.str();
}

double threshold_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  try {
    return json::parse(in).at("threshold").get<double>();
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

int run_classify(ClassifyArgs a) {
  need(a.out, "--out");
  if (!a.threshold_from.empty()) a.threshold = threshold_from_file(a.threshold_from);
  const RecordSet corpus = load_corpus(a.records, a.features);
  const EmbeddingStore queries = load_store_tagged(a.queries, "--queries", "");
  std::vector<PredictionRow> rows(queries.record_ids.size());

  if (a.strategy == "is+du") {
    if (a.threshold < 0.0 || a.threshold > 1.0) throw UsageError("--threshold must lie in [0, 1]");
    const KeyIndex seen = index_from_store(load_store_tagged(a.seen_keys, "--seen-keys", "image"), corpus);
    const KeyIndex unseen = index_from_store(load_store_tagged(a.unseen_keys, "--unseen-keys", "dna"), corpus);
    std::optional<LinearProbe> probe;
    if (a.variant == "linear") {
      probe = fit_probe(a.probe, corpus, a.seed);
    } else if (a.variant != "nn") {
      throw UsageError("--variant must be nn or linear");
    }
    parallel_for(rows.size(), a.threads, [&](std::size_t i) {
      const auto q = row_of(queries.matrix, i);
      const OpenSetPrediction p = probe ? open_set_classify_linear(q, *probe, a.threshold, unseen)
                                        : open_set_classify_nn(q, seen, unseen, a.threshold);
      PredictionRow& r = rows[i];
      r.predicted = p.label.value_or(kNone);
      r.branch = std::string(branch_name(p.branch));
      r.key = p.key_record_id.empty() ? kNone : p.key_record_id;
      r.score = p.score;
    });
  } else {
    const KeyStrategy strategy = parse_key_strategy(a.strategy);
    const EmbeddingStore keys = load_store_tagged(a.keys, "--keys", key_strategy_name(strategy));
    const KeyIndex index = index_from_store(keys, corpus);
    if (a.k < 1 || a.k > index.size()) {
      throw UsageError("--k=" + std::to_string(a.k) + " out of range [1, " + std::to_string(index.size()) + "]");
    }
    parallel_for(rows.size(), a.threads, [&](std::size_t i) {
      const auto top = index.query_topk(row_of(queries.matrix, i), a.k);
      PredictionRow& r = rows[i];
      const auto& sp = index.taxonomy(top.front().key).at(Rank::kSpecies);
      r.predicted = sp.value_or(kNone);
      r.key = top.front().record_id;
      r.score = top.front().similarity;
      if (a.k > 1) r.neighbors = format_neighbors(top);
    });
  }

  std::ofstream out = open_out(a.out);
  out << "record_id\tpredicted_species\tbranch\tkey_record_id\tscore\tneighbors\n" << std::setprecision(9);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << queries.record_ids[i] << '\t' << r.predicted << '\t' << r.branch << '\t' << r.key << '\t' << r.score << '\t'
        << r.neighbors << '\n';
  }
  return 0;
}

// ---- tune -------------------------------------------------------------------

struct TuneArgs {
  std::string records, features, manifest, queries, seen_keys, unseen_keys, variant = "nn", out;
  std::size_t grid = 1000;
  std::uint64_t seed = 1;
  ProbeFlags probe;
};

int run_tune(const TuneArgs& a) {
  need(a.manifest, "--manifest");
  const RecordSet corpus = load_corpus(a.records, a.features);
  const SplitManifest manifest = SplitManifest::load(a.manifest);
  const EmbeddingStore queries = load_store_tagged(a.queries, "--queries", "");
  const KeyIndex seen = index_from_store(load_store_tagged(a.seen_keys, "--seen-keys", "image"), corpus);
  const KeyIndex unseen = index_from_store(load_store_tagged(a.unseen_keys, "--unseen-keys", "dna"), corpus);

  std::vector<Eigen::Index> keep;
  std::vector<std::string> gold;
  std::vector<bool> gold_seen;
  for (std::size_t i = 0; i < queries.record_ids.size(); ++i) {
    const auto& sp = corpus.by_id(queries.record_ids[i]).taxonomy.at(Rank::kSpecies);
    if (!sp) continue;
    keep.push_back(static_cast<Eigen::Index>(i));
    gold.push_back(*sp);
    gold_seen.push_back(is_seen_partition(manifest.at(queries.record_ids[i])));
  }
  Matrix q(static_cast<Eigen::Index>(keep.size()), queries.matrix.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) q.row(static_cast<Eigen::Index>(i)) = queries.matrix.row(keep[i]);

  std::vector<OpenSetScore> scores;
  if (a.variant == "nn") {
    scores = open_set_scores_nn(q, seen, unseen);
  } else if (a.variant == "linear") {
    scores = open_set_scores_linear(q, fit_probe(a.probe, corpus, a.seed), unseen);
  } else {
    throw UsageError("--variant must be nn or linear");
  }
  const TuneResult r = tune_threshold(scores, gold, gold_seen, a.grid);
  const json j = {{"variant", a.variant},
                  {"grid", a.grid},
                  {"threshold", r.threshold},
                  {"hm", r.hm},
                  {"seen_accuracy", r.seen_accuracy},
                  {"unseen_accuracy", r.unseen_accuracy}};
  if (a.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    open_out(a.out) << j.dump(2) << '\n';
  }
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string records, features, manifest, predictions, out, text;
};

bool is_key_partition(Partition p) {
  return p == Partition::kKeySeen || p == Partition::kValUnseenKey || p == Partition::kTestUnseenKey;
}

int run_eval(const EvalArgs& a) {
  need(a.predictions, "--predictions");
  need(a.manifest, "--manifest");
  const RecordSet corpus = load_corpus(a.records, a.features);
  const SplitManifest manifest = SplitManifest::load(a.manifest);

  std::map<std::string, std::size_t> key_counts;
  std::map<std::string, Taxonomy> species_taxonomy;
  for (const Record& r : corpus.records()) {
    const auto& sp = r.taxonomy.at(Rank::kSpecies);
    if (!sp) continue;
    species_taxonomy.emplace(*sp, r.taxonomy);
    if (is_key_partition(manifest.at(r.record_id))) ++key_counts[*sp];
  }

  std::ifstream in(a.predictions);
  if (!in) throw DataError("cannot open: " + a.predictions);
  std::string line;
  if (!std::getline(in, line) || line.rfind("record_id\tpredicted_species\tbranch", 0) != 0) {
    throw DataError(a.predictions + ": expected header record_id<TAB>predicted_species<TAB>branch");
  }
  std::vector<EvalItem> items;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) cells.push_back(cell);
    if (cells.size() < 3) throw DataError(a.predictions + ":" + std::to_string(line_no) + ": expected at least 3 columns");
    EvalItem it;
    it.gold = corpus.by_id(cells[0]).taxonomy;
    it.gold_seen = is_seen_partition(manifest.at(cells[0]));
    if (cells[2] == "seen") {
      it.branch_seen = true;
    } else if (cells[2] == "unseen") {
      it.branch_seen = false;
    } else if (cells[2] != kNone) {
      throw DataError(a.predictions + ":" + std::to_string(line_no) + ": unknown branch '" + cells[2] + "'");
    }
    const std::string key = cells.size() > 3 ? cells[3] : kNone;
    if (key != kNone) {
      it.predicted = corpus.by_id(key).taxonomy;
    } else if (cells[1] != kNone) {
      auto found = species_taxonomy.find(cells[1]);
      if (found == species_taxonomy.end()) throw DataError("predicted species '" + cells[1] + "' is not in the corpus");
      it.predicted = found->second;
    }
    items.push_back(std::move(it));
  }
  if (items.empty()) throw DataError(a.predictions + ": no predictions");
  const EvalReport report = evaluate(items, key_counts);
  if (a.out.empty()) {
    std::cout << report_to_json(report) << '\n';
  } else {
    open_out(a.out) << report_to_json(report) << '\n';
  }
  if (!a.text.empty()) open_out(a.text) << report_to_text(report);
  std::cerr << report_to_text(report);
  return 0;
}

// ---- dump -------------------------------------------------------------------

int run_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  in.seekg(0);
  const std::string m(magic, static_cast<std::size_t>(in.gcount() > 0 ? 4 : 0));
  if (m == "TMCK") {
    const nn::Checkpoint ck = nn::read_checkpoint(in);
    for (const auto& t : ck.tensors) {
      std::cout << t.name << '\t';
      for (std::size_t i = 0; i < t.shape.size(); ++i) std::cout << (i ? "x" : "") << t.shape[i];
      std::cout << '\n';
    }
    std::cout << "config\t" << ck.config_json << '\n';
  } else if (m == "TMAF") {
    const FeatureMatrix fm = read_feature_matrix(in);
    std::cout << "rows\t" << fm.rows << "\ncols\t" << fm.cols << '\n';
    std::ifstream side(store_sidecar_path(path));
    if (side) {
      const EmbeddingStore s = load_embedding_store(path);
      std::cout << "modality\t" << s.tag << '\n';
      for (std::size_t i = 0; i < std::min<std::size_t>(5, s.record_ids.size()); ++i) {
        std::cout << i << '\t' << s.record_ids[i] << '\n';
      }
    }
  } else if (m == "# se") {
    const SplitManifest manifest = SplitManifest::read(in);
    std::cout << "seed\t" << manifest.seed() << "\nrecords\t" << manifest.size() << '\n';
    const auto counts = manifest.counts();
    for (std::size_t i = 0; i < kPartitionCount; ++i) {
      std::cout << partition_name(static_cast<Partition>(i)) << '\t' << counts[i] << '\n';
    }
  } else {
    throw DataError(path + ": unrecognised file (expected TMCK, TMAF or a manifest)");
  }
  return 0;
}

void add_records_flags(CLI::App* sub, std::string& records, std::string& features) {
  sub->add_option("--records", records, "record TSV");
  sub->add_option("--features", features, "feature matrix (default <records>.tmaf)");
}

void add_probe_flags(CLI::App* sub, ProbeFlags& p) {
  sub->add_option("--probe-train", p.train_store, "embedding store used to fit the linear head");
  sub->add_option("--probe-epochs", p.epochs);
  sub->add_option("--probe-lr", p.lr);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 1;
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tri-modal alignment toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  std::string config_path;
  const std::uint64_t seed_default = env_seed();

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file of option defaults; flags take precedence");
    return sub;
  };

  GenerateArgs gen;
  gen.opts.seed = seed_default;
  auto* g = with_config(app.add_subcommand("generate", "write a synthetic record corpus"));
  g->add_option("--out", gen.out, "record TSV to write");
  g->add_option("--features", gen.features);
  g->add_option("--species", gen.opts.n_species);
  g->add_option("--per-species", gen.opts.records_per_species);
  g->add_option("--d-img", gen.opts.d_img);
  g->add_option("--noise", gen.opts.noise);
  g->add_option("--barcode-length", gen.opts.barcode_length);
  g->add_option("--seed", gen.opts.seed);

  SplitArgs split;
  split.seed = seed_default;
  auto* s = with_config(app.add_subcommand("split", "partition records into seen/unseen query and key sets"));
  add_records_flags(s, split.records, split.features);
  s->add_option("--out", split.out, "manifest TSV to write");
  s->add_option("--seed", split.seed);

  TrainArgs tr;
  tr.seed = seed_default;
  auto* t = with_config(app.add_subcommand("train", "contrastively align the encoders"));
  add_records_flags(t, tr.records, tr.features);
  t->add_option("--manifest", tr.manifest);
  t->add_option("--out", tr.out, "checkpoint to write");
  t->add_option("--log", tr.log, "JSON-lines epoch log (default stdout)");
  t->add_option("--seed", tr.seed);
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr);
  t->add_option("--temperature", tr.temperature);
  t->add_option("--modalities", tr.modalities, "comma list of image,dna,text");
  t->add_option("--reduction", tr.reduction, "mean or sum");
  t->add_option("--image-patches", tr.model.image_patches);
  t->add_option("--kmer", tr.model.kmer);
  t->add_option("--max-len-nt", tr.model.max_len_nt);
  t->add_option("--text-max-len", tr.model.text_max_len);
  t->add_option("--d-model", tr.model.d_model);
  t->add_option("--hidden", tr.model.hidden);
  t->add_option("--d-shared", tr.model.d_shared);
  t->add_option("--attention", tr.model.attention);
  t->add_option("--lora-rank", tr.model.lora_rank);
  t->add_option("--lora-on-head", tr.model.lora_on_head);

  EmbedArgs em;
  auto* e = with_config(app.add_subcommand("embed", "embed records with one encoder"));
  add_records_flags(e, em.records, em.features);
  e->add_option("--checkpoint", em.checkpoint);
  e->add_option("--modality", em.modality, "image, dna or text");
  e->add_option("--out", em.out, "embedding store to write");
  e->add_option("--manifest", em.manifest);
  e->add_option("--partitions", em.partitions, "comma list of partitions to embed (needs --manifest)");

  IndexArgs ix;
  auto* x = with_config(app.add_subcommand("index", "build averaged image+DNA keys"));
  x->add_option("--image", ix.image);
  x->add_option("--dna", ix.dna);
  x->add_option("--out", ix.out);

  ClassifyArgs cl;
  cl.seed = seed_default;
  auto* c = with_config(app.add_subcommand("classify", "nearest-key or open-set classification"));
  add_records_flags(c, cl.records, cl.features);
  c->add_option("--queries", cl.queries, "query embedding store");
  c->add_option("--keys", cl.keys, "key store (image, dna, text or avg strategies)");
  c->add_option("--strategy", cl.strategy, "image, dna, text, avg or is+du");
  c->add_option("--seen-keys", cl.seen_keys, "image keys of seen species (is+du)");
  c->add_option("--unseen-keys", cl.unseen_keys, "DNA keys of unseen species (is+du)");
  c->add_option("--variant", cl.variant, "nn or linear (is+du)");
  c->add_option("--threshold", cl.threshold, "t1 (nn) or t2 (linear)");
  c->add_option("--threshold-from", cl.threshold_from, "read the threshold from a tune result");
  c->add_option("--k", cl.k, "neighbours listed per query");
  c->add_option("--threads", cl.threads);
  c->add_option("--seed", cl.seed);
  c->add_option("--out", cl.out, "predictions TSV to write");
  add_probe_flags(c, cl.probe);

  TuneArgs tu;
  tu.seed = seed_default;
  auto* u = with_config(app.add_subcommand("tune", "grid-search the open-set threshold"));
  add_records_flags(u, tu.records, tu.features);
  u->add_option("--manifest", tu.manifest);
  u->add_option("--queries", tu.queries);
  u->add_option("--seen-keys", tu.seen_keys);
  u->add_option("--unseen-keys", tu.unseen_keys);
  u->add_option("--variant", tu.variant);
  u->add_option("--grid", tu.grid);
  u->add_option("--seed", tu.seed);
  u->add_option("--out", tu.out, "JSON result (default stdout)");
  add_probe_flags(u, tu.probe);

  EvalArgs ev;
  auto* v = with_config(app.add_subcommand("eval", "score a predictions file"));
  add_records_flags(v, ev.records, ev.features);
  v->add_option("--manifest", ev.manifest);
  v->add_option("--predictions", ev.predictions);
  v->add_option("--out", ev.out, "JSON report (default stdout)");
  v->add_option("--text", ev.text, "plain-text table");

  std::string dump_path;
  auto* d = app.add_subcommand("dump", "describe a checkpoint, embedding store or manifest");
  d->add_option("path", dump_path)->required();

  try {
    // The config file has to be applied before parsing so flags override it.
    for (int i = 1; i + 1 < argc; ++i) {
      const std::string arg = argv[i];
      if (arg == "--config") config_path = argv[i + 1];
    }
    for (int i = 1; i < argc; ++i) {
      const std::string arg = argv[i];
      if (arg.rfind("--config=", 0) == 0) config_path = arg.substr(9);
    }
    if (!config_path.empty() && argc > 1) {
      CLI::App* sub = app.get_subcommand_no_throw(argv[1]);
      if (!sub) throw UsageError("--config must follow a subcommand");
      apply_config(*sub, config_path);
    }
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code_for(err);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (sub != d) log_resolved(*sub);
    if (sub == g) return run_generate(gen);
    if (sub == s) return run_split(split);
    if (sub == t) return run_train(tr);
    if (sub == e) return run_embed(em);
    if (sub == x) return run_index(ix);
    if (sub == c) return run_classify(cl);
    if (sub == u) return run_tune(tu);
    if (sub == v) return run_eval(ev);
    return run_dump(dump_path);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code_for(err);
  }
}
