#pragma once

#include <string>
#include <vector>

#include "tmal/alignment.h"
#include "tmal/metrics.h"
#include "tmal/retrieval.h"
#include "tmal/splitter.h"

namespace tmal::testing {

struct BenchmarkResult {
  double untrained = 0.0;
  double trained = 0.0;
  double final_epoch_loss = 0.0;
  double first_epoch_loss = 0.0;
};

// Image queries from test_seen_query against DNA keys of the test key set
// (key_seen plus test_unseen_key); species-level micro accuracy.
inline double image_to_dna_accuracy(const TriModalModel& model, const RecordSet& corpus,
                                    const SplitManifest& manifest) {
  std::vector<std::size_t> queries, keys;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Partition p = manifest.at(corpus.records()[i].record_id);
    if (p == Partition::kTestSeenQuery) queries.push_back(i);
    if (p == Partition::kKeySeen || p == Partition::kTestUnseenKey) keys.push_back(i);
  }
  std::vector<Taxonomy> taxa;
  for (std::size_t k : keys) taxa.push_back(corpus.records()[k].taxonomy);
  const KeyIndex index = KeyIndex::build(model.embed(Modality::kDna, corpus, keys), taxa);
  const EmbeddingBatch q = model.embed(Modality::kImage, corpus, queries);
  std::vector<Label> preds, golds;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Matrix row = q.matrix.row(static_cast<Eigen::Index>(i));
    preds.push_back(classify_by_nn(index, {row.data(), static_cast<std::size_t>(row.size())}, Rank::kSpecies).label);
    golds.push_back(corpus.records()[queries[i]].taxonomy.at(Rank::kSpecies));
  }
  return micro_accuracy(preds, golds);
}

inline BenchmarkResult run_alignment_benchmark(std::uint64_t seed, std::vector<Modality> modalities,
                                               std::size_t epochs = 30) {
  SyntheticCorpusOptions co;
  co.n_species = 20;
  co.records_per_species = 50;
  co.noise = 0.1;
  co.seed = seed;
  const RecordSet corpus = generate_synthetic_corpus(co);
  const SplitManifest manifest = partition(corpus, seed);
  TrainerConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 64;
  tc.temperature = 0.07;
  tc.seed = seed;
  tc.modalities = std::move(modalities);
  ModelConfig mc;
  mc.seed = seed;
  mc.d_img = corpus.d_img();
  BenchmarkResult out;
  const TriModalModel fresh(mc, taxonomy_vocab(corpus, training_pool(corpus, manifest)));
  out.untrained = image_to_dna_accuracy(fresh, corpus, manifest);
  TrainingResult tr;
  const TriModalModel trained = train(corpus, manifest, tc, mc, &tr);
  out.trained = image_to_dna_accuracy(trained, corpus, manifest);
  out.first_epoch_loss = tr.epochs.front().mean_loss;
  out.final_epoch_loss = tr.epochs.back().mean_loss;
  return out;
}

}  // namespace tmal::testing
