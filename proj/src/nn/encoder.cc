#include <cmath>

#include "tmal/neuralnet.h"

namespace tmal::nn {
namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double sigma, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.normal();
  return m;
}

// Real-token count; an all-PAD sequence is read as a single PAD token so that
// empty inputs (unlabelled taxonomy text) still embed to something.
std::size_t effective_length(const TokenSeq& seq) {
  std::size_t m = 0;
  while (m < seq.mask.size() && seq.mask[m]) ++m;
  for (std::size_t i = m; i < seq.mask.size(); ++i) {
    if (seq.mask[i]) throw UsageError("token mask is not a contiguous true-prefix");
  }
  return m == 0 ? 1 : m;
}

}  // namespace

std::size_t EncoderInput::size() const {
  return modality == Modality::kImage ? static_cast<std::size_t>(features.rows()) : tokens.size();
}

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.input_dim < 1 || cfg.seq_len < 1 || cfg.d_model < 1 || cfg.hidden < 1 ||
      cfg.d_shared < 1) {
    throw UsageError("encoder dimensions must be positive");
  }
  Rng rng(seed);
  const std::string prefix(modality_name(cfg.modality));
  if (cfg.modality == Modality::kImage) {
    if (cfg.input_dim % cfg.seq_len != 0) {
      throw UsageError("image feature dimension " + std::to_string(cfg.input_dim) +
                       " is not divisible into " + std::to_string(cfg.seq_len) + " patches");
    }
    input_proj_ = Linear(prefix + ".input_proj", cfg.input_dim / cfg.seq_len, cfg.d_model, rng);
  } else {
    token_embedding_ = Param(prefix + ".token_embedding", gaussian(cfg.input_dim, cfg.d_model, 0.5, rng));
  }
  position_ = Param(prefix + ".position", gaussian(cfg.seq_len, cfg.d_model, 0.1, rng));
  if (cfg.attention) {
    attention_.emplace(prefix + ".attn", cfg.d_model, rng);
    if (cfg.lora_rank > 0) {
      attention_->query.wrap(cfg.lora_rank, derive_seed(seed, "lora.query"));
      attention_->key.wrap(cfg.lora_rank, derive_seed(seed, "lora.key"));
    }
  }
  head_in_ = Linear(prefix + ".head_in", cfg.d_model, cfg.hidden, rng);
  head_out_ = Linear(prefix + ".head_out", cfg.hidden, cfg.d_shared, rng);
  if (cfg.lora_on_head && cfg.lora_rank > 0) {
    head_in_.wrap(cfg.lora_rank, derive_seed(seed, "lora.head_in"));
    head_out_.wrap(cfg.lora_rank, derive_seed(seed, "lora.head_out"));
  }
}

Matrix Encoder::embed_sample(const EncoderInput& input, std::size_t i,
                             EncoderCache::Sample* s) const {
  Matrix h;
  if (cfg_.modality == Modality::kImage) {
    const auto patch = cfg_.input_dim / cfg_.seq_len;
    Matrix patches(cfg_.seq_len, patch);
    for (int p = 0; p < cfg_.seq_len; ++p) {
      patches.row(p) = input.features.row(static_cast<Eigen::Index>(i)).segment(p * patch, patch);
    }
    h = input_proj_.forward(patches);
    h += position_.value;
    if (s) {
      s->patches = std::move(patches);
      s->length = static_cast<std::size_t>(cfg_.seq_len);
    }
  } else {
    const TokenSeq& seq = input.tokens[i];
    if (seq.ids.size() != seq.mask.size()) throw UsageError("token ids/mask length mismatch");
    const std::size_t m = effective_length(seq);
    if (m > static_cast<std::size_t>(cfg_.seq_len)) {
      throw UsageError("token sequence longer than encoder seq_len");
    }
    h.resize(static_cast<Eigen::Index>(m), cfg_.d_model);
    std::vector<std::int32_t> ids(m);
    for (std::size_t t = 0; t < m; ++t) {
      const std::int32_t id = t < seq.ids.size() ? seq.ids[t] : kPadId;
      if (id < 0 || id >= cfg_.input_dim) throw UsageError("token id out of vocabulary range");
      ids[t] = id;
      h.row(static_cast<Eigen::Index>(t)) =
          token_embedding_.value.row(id) + position_.value.row(static_cast<Eigen::Index>(t));
    }
    if (s) {
      s->ids = std::move(ids);
      s->length = m;
    }
  }
  return h;
}

Matrix Encoder::forward(const EncoderInput& input, EncoderCache* cache) const {
  if (input.modality != cfg_.modality) {
    throw UsageError("encoder for " + std::string(modality_name(cfg_.modality)) + " received " +
                     std::string(modality_name(input.modality)) + " input");
  }
  const std::size_t n = input.size();
  if (n == 0) throw UsageError("empty batch");
  if (cfg_.modality == Modality::kImage && input.features.cols() != cfg_.input_dim) {
    throw UsageError("image feature dimension mismatch: expected " +
                     std::to_string(cfg_.input_dim) + ", got " +
                     std::to_string(input.features.cols()));
  }
  if (cache) {
    cache->samples.assign(n, {});
  }
  Matrix pooled(static_cast<Eigen::Index>(n), cfg_.d_model);
  for (std::size_t i = 0; i < n; ++i) {
    EncoderCache::Sample* s = cache ? &cache->samples[i] : nullptr;
    Matrix h = embed_sample(input, i, s);
    if (attention_) h = attention_->forward(h, s ? &s->attn : nullptr);
    pooled.row(static_cast<Eigen::Index>(i)) = h.colwise().mean();
  }
  Matrix pre = head_in_.forward(pooled);
  Matrix post = pre.unaryExpr([](double v) { return gelu(v); });
  Matrix z = head_out_.forward(post);
  Vector norms;
  Matrix y = l2_normalize_rows(z, &norms);
  if (cache) {
    cache->pooled = std::move(pooled);
    cache->hidden_pre = std::move(pre);
    cache->hidden_post = std::move(post);
    cache->output = y;
    cache->norms = std::move(norms);
  }
  return y;
}

void Encoder::backward(const EncoderCache& cache, const Matrix& d_output) {
  if (cache.samples.empty() || cache.output.size() == 0) {
    throw UsageError("backward without a recorded forward pass");
  }
  if (d_output.rows() != cache.output.rows() || d_output.cols() != cache.output.cols()) {
    throw UsageError("backward: gradient shape does not match encoder output");
  }
  const Matrix dz = l2_normalize_backward(cache.output, cache.norms, d_output);
  const Matrix d_post = head_out_.backward(cache.hidden_post, dz);
  const Matrix d_pre =
      d_post.cwiseProduct(cache.hidden_pre.unaryExpr([](double v) { return gelu_grad(v); }));
  const Matrix d_pooled = head_in_.backward(cache.pooled, d_pre);

  for (std::size_t i = 0; i < cache.samples.size(); ++i) {
    const auto& s = cache.samples[i];
    const auto m = static_cast<Eigen::Index>(s.length);
    Matrix dh = d_pooled.row(static_cast<Eigen::Index>(i)).replicate(m, 1) / static_cast<double>(m);
    if (attention_) dh = attention_->backward(s.attn, dh);
    if (position_.trainable) position_.grad.topRows(m) += dh;
    if (cfg_.modality == Modality::kImage) {
      input_proj_.backward(s.patches, dh);
    } else if (token_embedding_.trainable) {
      for (Eigen::Index t = 0; t < m; ++t) token_embedding_.grad.row(s.ids[static_cast<std::size_t>(t)]) += dh.row(t);
    }
  }
}

std::vector<Param*> Encoder::parameters() {
  std::vector<Param*> out;
  if (cfg_.modality == Modality::kImage) {
    input_proj_.collect(out);
  } else {
    out.push_back(&token_embedding_);
  }
  out.push_back(&position_);
  if (attention_) attention_->collect(out);
  head_in_.collect(out);
  head_out_.collect(out);
  return out;
}

std::vector<const Param*> Encoder::parameters() const {
  auto mut = const_cast<Encoder*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t Encoder::trainable_count() const {
  std::size_t n = 0;
  for (const Param* p : parameters()) n += p->trainable ? p->count() : 0;
  return n;
}

void Encoder::zero_grad() {
  for (Param* p : parameters()) p->zero_grad();
}

}  // namespace tmal::nn
