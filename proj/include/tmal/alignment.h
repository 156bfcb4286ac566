#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmal/corpus.h"
#include "tmal/neuralnet.h"
#include "tmal/splitter.h"
#include "tmal/tokenizers.h"

namespace tmal {

// Unit-norm embeddings of one modality; row i belongs to record_ids[i].
struct EmbeddingBatch {
  Matrix matrix;
  Modality modality = Modality::kImage;
  std::vector<std::string> record_ids;

  std::size_t size() const { return static_cast<std::size_t>(matrix.rows()); }
};

enum class Reduction { kSum, kMean };

struct PairLoss {
  double loss = 0.0;
  Matrix grad_a;
  Matrix grad_b;
};

// Symmetric NT-Xent between row-aligned batches:
//   sum_i [ -log softmax_k(a_i . b_k / tau)_i  -log softmax_k(b_i . a_k / tau)_i ]
// divided by n under Reduction::kMean. Gradients are w.r.t. the rows of a, b.
PairLoss ntxent_pair_loss(const Matrix& a, const Matrix& b, double tau,
                          Reduction reduction = Reduction::kSum);
PairLoss ntxent_pair_loss(const EmbeddingBatch& a, const EmbeddingBatch& b, double tau,
                          Reduction reduction = Reduction::kSum);

struct TriModalLoss {
  double loss = 0.0;
  // Aligned with the input batches.
  std::vector<Matrix> grads;
};

// Sum of pair losses over every unordered modality pair present, in the order
// (image, dna), (dna, text), (image, text).
TriModalLoss trimodal_loss(std::span<const EmbeddingBatch> batches, double tau,
                           Reduction reduction = Reduction::kSum);

struct ModelConfig {
  std::size_t d_img = 32;
  int image_patches = 4;
  int kmer = 5;
  std::size_t max_len_nt = 660;
  std::size_t text_max_len = 16;
  int d_model = 32;
  int hidden = 64;
  int d_shared = 32;
  bool attention = true;
  int lora_rank = 4;
  bool lora_on_head = false;
  std::uint64_t seed = 1;
};

// The three encoders plus the tokenizers that feed them.
class TriModalModel {
 public:
  TriModalModel(const ModelConfig& cfg, WordVocab vocab);

  const ModelConfig& config() const { return cfg_; }
  const KmerVocab& kmer_vocab() const { return kmers_; }
  const WordVocab& word_vocab() const { return words_; }
  nn::Encoder& encoder(Modality m) { return encoders_[static_cast<std::size_t>(m)]; }
  const nn::Encoder& encoder(Modality m) const { return encoders_[static_cast<std::size_t>(m)]; }

  nn::EncoderInput prepare(Modality m, const RecordSet& corpus, std::span<const std::size_t> rows) const;
  // Inference pass; safe to call concurrently.
  EmbeddingBatch embed(Modality m, const RecordSet& corpus, std::span<const std::size_t> rows) const;

  nn::Checkpoint to_checkpoint(const std::string& extra_json = "{}") const;
  static TriModalModel from_checkpoint(const nn::Checkpoint& ck);

 private:
  ModelConfig cfg_;
  KmerVocab kmers_;
  WordVocab words_;
  std::array<nn::Encoder, 3> encoders_;
};

// Word vocabulary over the serialized taxonomies of the given rows.
WordVocab taxonomy_vocab(const RecordSet& corpus, std::span<const std::size_t> rows);

struct TrainerConfig {
  double temperature = 0.07;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::vector<Modality> modalities = {Modality::kImage, Modality::kDna, Modality::kText};
  Reduction reduction = Reduction::kMean;

  // Throws UsageError when fewer than two distinct modalities or bad values.
  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainingResult {
  std::vector<EpochLog> epochs;
  double initial_probe_loss = 0.0;
  double final_probe_loss = 0.0;
  std::size_t steps = 0;
};

// Records usable for contrastive training: pretrain plus train_seen.
std::vector<std::size_t> training_pool(const RecordSet& corpus, const SplitManifest& manifest);

// Fits the selected encoders of `model` in place. Single-threaded and
// deterministic for a fixed config. Throws NumericalError on a non-finite
// loss, naming the step.
TrainingResult train(const RecordSet& corpus, std::span<const std::size_t> pool,
                     const TrainerConfig& config, TriModalModel& model,
                     const std::function<void(const EpochLog&)>& on_epoch = {});

// Convenience: builds a model sized for `corpus`, with the vocabulary taken
// from the training pool, and trains it.
TriModalModel train(const RecordSet& corpus, const SplitManifest& manifest,
                    const TrainerConfig& config, ModelConfig model_config,
                    TrainingResult* result = nullptr,
                    const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace tmal
