#include "tmal/alignment.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tmal {
namespace {

using nlohmann::json;

Vector row_logsumexp(const Matrix& s) {
  Vector out(s.rows());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    out(i) = mx + std::log((s.row(i).array() - mx).exp().sum());
  }
  return out;
}

json model_config_json(const ModelConfig& c) {
  return json{{"d_img", c.d_img},         {"image_patches", c.image_patches},
              {"kmer", c.kmer},           {"max_len_nt", c.max_len_nt},
              {"text_max_len", c.text_max_len}, {"d_model", c.d_model},
              {"hidden", c.hidden},       {"d_shared", c.d_shared},
              {"attention", c.attention}, {"lora_rank", c.lora_rank},
              {"lora_on_head", c.lora_on_head}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.d_img = j.at("d_img").get<std::size_t>();
  c.image_patches = j.at("image_patches").get<int>();
  c.kmer = j.at("kmer").get<int>();
  c.max_len_nt = j.at("max_len_nt").get<std::size_t>();
  c.text_max_len = j.at("text_max_len").get<std::size_t>();
  c.d_model = j.at("d_model").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.d_shared = j.at("d_shared").get<int>();
  c.attention = j.at("attention").get<bool>();
  c.lora_rank = j.at("lora_rank").get<int>();
  c.lora_on_head = j.at("lora_on_head").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

nn::EncoderConfig encoder_config(const ModelConfig& c, Modality m, std::size_t vocab_size,
                                 std::size_t kmer_vocab_size) {
  nn::EncoderConfig e;
  e.modality = m;
  e.d_model = c.d_model;
  e.hidden = c.hidden;
  e.d_shared = c.d_shared;
  e.attention = c.attention;
  e.lora_rank = c.lora_rank;
  e.lora_on_head = c.lora_on_head;
  switch (m) {
    case Modality::kImage:
      e.input_dim = static_cast<int>(c.d_img);
      e.seq_len = c.image_patches;
      break;
    case Modality::kDna:
      e.input_dim = static_cast<int>(kmer_vocab_size);
      e.seq_len = static_cast<int>(c.max_len_nt / static_cast<std::size_t>(c.kmer));
      break;
    case Modality::kText:
      e.input_dim = static_cast<int>(vocab_size);
      e.seq_len = static_cast<int>(c.text_max_len);
      break;
  }
  return e;
}

std::vector<Modality> distinct_sorted(std::vector<Modality> ms) {
  std::sort(ms.begin(), ms.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  return ms;
}

}  // namespace

PairLoss ntxent_pair_loss(const Matrix& a, const Matrix& b, double tau, Reduction reduction) {
  if (a.rows() == 0) throw UsageError("contrastive loss: empty batch");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError("contrastive loss: batch shapes differ");
  }
  if (!(tau > 0.0)) throw UsageError("contrastive loss: temperature must be > 0");
  const Eigen::Index n = a.rows();
  const Matrix s = (a * b.transpose()) / tau;
  const Vector row_lse = row_logsumexp(s);
  const Vector col_lse = row_logsumexp(s.transpose());

  PairLoss out;
  for (Eigen::Index i = 0; i < n; ++i) out.loss += (row_lse(i) - s(i, i)) + (col_lse(i) - s(i, i));

  Matrix ds(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < n; ++k) {
      ds(i, k) = std::exp(s(i, k) - row_lse(i)) + std::exp(s(i, k) - col_lse(k));
    }
    ds(i, i) -= 2.0;
  }
  double scale = 1.0 / tau;
  if (reduction == Reduction::kMean) {
    out.loss /= static_cast<double>(n);
    scale /= static_cast<double>(n);
  }
  out.grad_a = (ds * b) * scale;
  out.grad_b = (ds.transpose() * a) * scale;
  return out;
}

PairLoss ntxent_pair_loss(const EmbeddingBatch& a, const EmbeddingBatch& b, double tau,
                          Reduction reduction) {
  if (a.record_ids != b.record_ids) throw UsageError("contrastive loss: mismatched record ids");
  return ntxent_pair_loss(a.matrix, b.matrix, tau, reduction);
}

TriModalLoss trimodal_loss(std::span<const EmbeddingBatch> batches, double tau, Reduction reduction) {
  std::map<Modality, std::size_t> slot;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    if (!slot.emplace(batches[i].modality, i).second) {
      throw UsageError("tri-modal loss: modality given twice");
    }
  }
  if (slot.size() < 2) throw UsageError("tri-modal loss needs at least two modalities");

  TriModalLoss out;
  out.grads.reserve(batches.size());
  for (const auto& b : batches) out.grads.push_back(Matrix::Zero(b.matrix.rows(), b.matrix.cols()));
  constexpr std::array<std::pair<Modality, Modality>, 3> kPairs = {
      std::pair{Modality::kImage, Modality::kDna}, std::pair{Modality::kDna, Modality::kText},
      std::pair{Modality::kImage, Modality::kText}};
  for (const auto& [ma, mb] : kPairs) {
    auto ia = slot.find(ma);
    auto ib = slot.find(mb);
    if (ia == slot.end() || ib == slot.end()) continue;
    PairLoss pl = ntxent_pair_loss(batches[ia->second], batches[ib->second], tau, reduction);
    out.loss += pl.loss;
    out.grads[ia->second] += pl.grad_a;
    out.grads[ib->second] += pl.grad_b;
  }
  return out;
}

TriModalModel::TriModalModel(const ModelConfig& cfg, WordVocab vocab)
    : cfg_(cfg), kmers_(cfg.kmer), words_(std::move(vocab)) {
  if (cfg.max_len_nt < static_cast<std::size_t>(cfg.kmer)) throw UsageError("max_len_nt must be >= kmer");
  for (Modality m : {Modality::kImage, Modality::kDna, Modality::kText}) {
    encoders_[static_cast<std::size_t>(m)] =
        nn::Encoder(encoder_config(cfg, m, words_.size(), kmers_.size()),
                    derive_seed(cfg.seed, std::string("encoder.") + std::string(modality_name(m))));
  }
}

nn::EncoderInput TriModalModel::prepare(Modality m, const RecordSet& corpus,
                                        std::span<const std::size_t> rows) const {
  nn::EncoderInput in;
  in.modality = m;
  switch (m) {
    case Modality::kImage:
      if (corpus.d_img() != cfg_.d_img) {
        throw UsageError("corpus feature dimension " + std::to_string(corpus.d_img()) +
                         " does not match model d_img " + std::to_string(cfg_.d_img));
      }
      in.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cfg_.d_img));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& f = corpus[rows[i]].image_feature;
        for (std::size_t j = 0; j < f.size(); ++j) {
          in.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
        }
      }
      break;
    case Modality::kDna:
      in.tokens.reserve(rows.size());
      for (auto r : rows) in.tokens.push_back(tokenize_dna(corpus[r].dna_barcode, kmers_, cfg_.max_len_nt).seq);
      break;
    case Modality::kText:
      in.tokens.reserve(rows.size());
      for (auto r : rows) {
        in.tokens.push_back(tokenize_text(serialize_taxonomy(corpus[r].taxonomy), words_, cfg_.text_max_len));
      }
      break;
  }
  return in;
}

EmbeddingBatch TriModalModel::embed(Modality m, const RecordSet& corpus,
                                    std::span<const std::size_t> rows) const {
  EmbeddingBatch b;
  b.modality = m;
  b.matrix = encoder(m).forward(prepare(m, corpus, rows));
  b.record_ids.reserve(rows.size());
  for (auto r : rows) b.record_ids.push_back(corpus[r].record_id);
  return b;
}

nn::Checkpoint TriModalModel::to_checkpoint(const std::string& extra_json) const {
  nn::Checkpoint ck;
  for (const auto& enc : encoders_) {
    for (const nn::Param* p : enc.parameters()) ck.tensors.push_back(nn::to_tensor(*p));
  }
  json cfg;
  cfg["model"] = model_config_json(cfg_);
  cfg["word_vocab"] = words_.tokens();
  cfg["extra"] = json::parse(extra_json);
  ck.config_json = cfg.dump();
  return ck;
}

TriModalModel TriModalModel::from_checkpoint(const nn::Checkpoint& ck) {
  json cfg;
  try {
    cfg = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw DataError(std::string("TMCK: bad config blob: ") + e.what());
  }
  ModelConfig mc;
  WordVocab vocab;
  try {
    mc = model_config_from_json(cfg.at("model"));
    const auto words = cfg.at("word_vocab").get<std::vector<std::string>>();
    std::string listing;
    for (std::size_t i = 0; i < words.size(); ++i) listing += words[i] + "\t" + std::to_string(i) + "\n";
    std::istringstream in(listing);
    vocab = WordVocab::read(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("TMCK: incomplete config blob: ") + e.what());
  }
  TriModalModel model(mc, std::move(vocab));
  std::map<std::string, const nn::NamedTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  for (auto& enc : model.encoders_) {
    for (nn::Param* p : enc.parameters()) {
      auto it = by_name.find(p->name);
      if (it == by_name.end()) throw DataError("TMCK: missing tensor '" + p->name + "'");
      nn::assign_tensor(*it->second, *p);
    }
  }
  return model;
}

WordVocab taxonomy_vocab(const RecordSet& corpus, std::span<const std::size_t> rows) {
  std::vector<std::string> texts;
  texts.reserve(rows.size());
  for (auto r : rows) texts.push_back(serialize_taxonomy(corpus[r].taxonomy));
  return WordVocab::build(texts);
}

void TrainerConfig::validate() const {
  if (distinct_sorted(modalities).size() < 2) {
    throw UsageError("training needs at least two modalities");
  }
  if (!(temperature > 0.0)) throw UsageError("temperature must be > 0");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw UsageError("learning rate must be > 0");
}

std::vector<std::size_t> training_pool(const RecordSet& corpus, const SplitManifest& manifest) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto p = manifest.at(corpus[i].record_id);
    if (p == Partition::kPretrain || p == Partition::kTrainSeen) pool.push_back(i);
  }
  return pool;
}

namespace {


double batch_loss(TriModalModel& model, const RecordSet& corpus, std::span<const std::size_t> rows,
                  const std::vector<Modality>& modalities, const TrainerConfig& cfg, bool backprop) {
  std::vector<EmbeddingBatch> batches;
  std::vector<nn::EncoderCache> caches(modalities.size());
  for (std::size_t j = 0; j < modalities.size(); ++j) {
    const Modality m = modalities[j];
    EmbeddingBatch b;
    b.modality = m;
    b.matrix = model.encoder(m).forward(model.prepare(m, corpus, rows), backprop ? &caches[j] : nullptr);
    batches.push_back(std::move(b));
  }
  TriModalLoss tl = trimodal_loss(batches, cfg.temperature, cfg.reduction);
  if (backprop && std::isfinite(tl.loss)) {
    for (std::size_t j = 0; j < modalities.size(); ++j) {
      model.encoder(modalities[j]).backward(caches[j], tl.grads[j]);
    }
  }
  return tl.loss;
}

}  // namespace

TrainingResult train(const RecordSet& corpus, std::span<const std::size_t> pool,
                     const TrainerConfig& config, TriModalModel& model,
                     const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (pool.empty()) throw UsageError("empty training pool");
  const auto modalities = distinct_sorted(config.modalities);

  std::vector<nn::Param*> params;
  for (Modality m : modalities) {
    auto ps = model.encoder(m).parameters();
    params.insert(params.end(), ps.begin(), ps.end());
  }
  nn::Adam adam({.lr = config.lr});

  std::vector<std::size_t> order(pool.begin(), pool.end());
  const std::vector<std::size_t> probe(order.begin(),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(config.batch_size, order.size())));
  TrainingResult result;
  result.initial_probe_loss = batch_loss(model, corpus, probe, modalities, config, false);

  Rng rng(derive_seed(config.seed, "batches"));
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += config.batch_size) {
      const std::size_t end = std::min(order.size(), pos + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + pos, end - pos);
      for (nn::Param* p : params) p->zero_grad();
      const double loss = batch_loss(model, corpus, rows, modalities, config, true);
      ++result.steps;
      if (!std::isfinite(loss)) {
        throw NumericalError("non-finite loss at step " + std::to_string(result.steps) +
                             " (epoch " + std::to_string(epoch) + ")");
      }
      adam.step(params);
      total += loss;
      ++batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = total / static_cast<double>(batches);
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.final_probe_loss = batch_loss(model, corpus, probe, modalities, config, false);
  return result;
}

TriModalModel train(const RecordSet& corpus, const SplitManifest& manifest,
                    const TrainerConfig& config, ModelConfig model_config,
                    TrainingResult* result, const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  const auto pool = training_pool(corpus, manifest);
  if (pool.empty()) throw UsageError("empty training pool");
  model_config.d_img = corpus.d_img();
  model_config.seed = config.seed;
  TriModalModel model(model_config, taxonomy_vocab(corpus, pool));
  TrainingResult r = train(corpus, pool, config, model, on_epoch);
  if (result) *result = std::move(r);
  return model;
}

}  // namespace tmal
