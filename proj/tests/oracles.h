#pragma once

// Independent reference implementations shared by the unit and acceptance
// suites. Written with plain loops; no library code beyond data types.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "tmal/common.h"
#include "tmal/corpus.h"

namespace tmal::testing {

// Explicit two-direction softmax cross-entropy over the similarity matrix.
inline double brute_force_loss(const Matrix& a, const Matrix& b, double tau) {
  const auto n = a.rows();
  double total = 0.0;
  for (int dir = 0; dir < 2; ++dir) {
    const Matrix& p = dir == 0 ? a : b;
    const Matrix& q = dir == 0 ? b : a;
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      for (Eigen::Index k = 0; k < n; ++k) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < p.cols(); ++c) s += p(i, c) * q(k, c);
        logits[static_cast<std::size_t>(k)] = s / tau;
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double l : logits) z += std::exp(l - mx);
      total -= logits[static_cast<std::size_t>(i)] - mx - std::log(z);
    }
  }
  return total;
}

// Full scan, full sort, ties by ascending id.
inline std::vector<std::pair<std::string, double>> naive_topk(const Matrix& keys, const std::vector<std::string>& ids,
                                                              const double* q, std::size_t k) {
  std::vector<std::pair<std::string, double>> all;
  for (Eigen::Index i = 0; i < keys.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < keys.cols(); ++c) s += keys(i, c) * q[c];
    all.emplace_back(ids[static_cast<std::size_t>(i)], s);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  all.resize(k);
  return all;
}

// sizes[s] records for species s, then `unlabelled` records without a
// species label.
inline RecordSet corpus_with_sizes(const std::vector<std::size_t>& sizes, std::size_t unlabelled = 0) {
  std::vector<Record> records;
  std::size_t next = 0;
  auto add = [&](Taxonomy t) {
    char id[32];
    std::snprintf(id, sizeof id, "r%07zu", next++);
    records.push_back(Record{id, {0.0f}, "ACGT", std::move(t)});
  };
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    const std::string genus = "G" + std::to_string(s / 3);
    for (std::size_t i = 0; i < sizes[s]; ++i) add(Taxonomy("O", "F", genus, genus + " sp" + std::to_string(s)));
  }
  for (std::size_t i = 0; i < unlabelled; ++i) add(Taxonomy("O", i % 2 ? "F" : "", "", ""));
  return RecordSet(std::move(records), 1);
}

// Pareto-like species sizes: mostly tiny, a few with hundreds of records.
inline std::vector<std::size_t> heavy_tailed_sizes(std::size_t n_species, Rng& rng) {
  std::vector<std::size_t> sizes;
  for (std::size_t s = 0; s < n_species; ++s) {
    const double u = std::max(rng.uniform(), 1e-9);
    sizes.push_back(std::min<std::size_t>(400, static_cast<std::size_t>(std::pow(u, -1.3))));
  }
  return sizes;
}

}  // namespace tmal::testing
