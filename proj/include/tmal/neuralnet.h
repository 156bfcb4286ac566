#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tmal/common.h"
#include "tmal/tokenizers.h"

namespace tmal::nn {

// A named tensor. Frozen parameters carry no gradient buffer.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Matrix v, bool train = true);

  void zero_grad();
  void freeze();
  std::size_t count() const { return static_cast<std::size_t>(value.size()); }
};

// y = x W + b, W is in x out.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng);
  Linear(const std::string& name, Matrix weight, RowVector bias);

  int in_dim() const { return static_cast<int>(weight.value.rows()); }
  int out_dim() const { return static_cast<int>(weight.value.cols()); }

  Matrix forward(const Matrix& x) const;
  // Accumulates parameter gradients and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(std::vector<Param*>& out);
  std::size_t trainable_count() const;

  Param weight;
  Param bias;
};

// Frozen base plus a trainable rank-r residual: y = x (W + A B) + b with
// A in x r and B r x out. B starts at zero so the wrapped layer initially
// computes exactly what the base computes.
class LoRALinear {
 public:
  LoRALinear() = default;

  int in_dim() const { return base.in_dim(); }
  int out_dim() const { return base.out_dim(); }
  int rank() const { return static_cast<int>(down.value.cols()); }

  Matrix forward(const Matrix& x) const;
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(std::vector<Param*>& out);
  std::size_t trainable_count() const { return down.count() + up.count(); }
  // W + A B as a dense matrix.
  Matrix merged_weight() const;

  Linear base;
  Param down;  // A, in x r
  Param up;    // B, r x out
};

// Throws UsageError unless 1 <= r < min(in, out).
LoRALinear lora_wrap(Linear layer, int rank, std::uint64_t seed);

// Either a plain or an adapted projection; attention and heads hold these.
class Projector {
 public:
  Projector() = default;
  Projector(Linear l) : impl_(std::move(l)) {}
  Projector(LoRALinear l) : impl_(std::move(l)) {}

  Matrix forward(const Matrix& x) const;
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(std::vector<Param*>& out);
  std::size_t trainable_count() const;
  bool is_lora() const { return std::holds_alternative<LoRALinear>(impl_); }
  const LoRALinear& lora() const { return std::get<LoRALinear>(impl_); }
  const Linear& linear() const { return std::get<Linear>(impl_); }
  // Wraps in place; no-op when already adapted.
  void wrap(int rank, std::uint64_t seed);

 private:
  std::variant<Linear, LoRALinear> impl_;
};

// Single-head scaled dot-product self-attention with a residual:
// out = x + softmax(q k^T / sqrt(d)) v W_out.
class AttentionBlock {
 public:
  struct Cache {
    Matrix x, q, k, v, probs, mixed;
  };

  AttentionBlock() = default;
  AttentionBlock(const std::string& name, int d_model, Rng& rng);

  // x holds only real tokens (m x d, m >= 1).
  Matrix forward(const Matrix& x, Cache* cache) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(std::vector<Param*>& out);

  Projector query, key, value;
  Linear output;
};

// Applies the block to the mask-true prefix of x; padded rows pass through.
// Throws UsageError on an empty or non-contiguous mask.
Matrix attention_forward(const AttentionBlock& block, const Matrix& x,
                         const std::vector<bool>& mask);

// Mean of mask-true rows. Throws UsageError on an empty mask.
RowVector masked_mean_pool(const Matrix& h, const std::vector<bool>& mask);

double gelu(double x);
double gelu_grad(double x);

// Row-wise l2 normalisation and its Jacobian-vector product.
Matrix l2_normalize_rows(const Matrix& z, Vector* norms = nullptr);
Matrix l2_normalize_backward(const Matrix& y, const Vector& norms, const Matrix& dy);

struct EncoderConfig {
  Modality modality = Modality::kImage;
  // Feature dimension for images; vocabulary size for token modalities.
  int input_dim = 32;
  // Image patches, or maximum token count.
  int seq_len = 4;
  int d_model = 32;
  int hidden = 64;
  int d_shared = 32;
  bool attention = true;
  // 0 disables adapters.
  int lora_rank = 4;
  bool lora_on_head = false;
};

struct EncoderInput {
  Modality modality = Modality::kImage;
  Matrix features;               // image: n x d_img
  std::vector<TokenSeq> tokens;  // dna/text

  std::size_t size() const;
};

// Recorded activations for one batch, consumed by Encoder::backward.
struct EncoderCache {
  struct Sample {
    Matrix patches;  // image only
    std::vector<std::int32_t> ids;
    AttentionBlock::Cache attn;
    std::size_t length = 0;
  };
  std::vector<Sample> samples;
  Matrix pooled, hidden_pre, hidden_post, output;
  Vector norms;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  Modality modality() const { return cfg_.modality; }

  // Rows of the result are unit-norm. Pass a cache to enable backward.
  Matrix forward(const EncoderInput& input, EncoderCache* cache = nullptr) const;
  // Accumulates gradients from dL/d(output). Throws UsageError when the
  // cache is empty.
  void backward(const EncoderCache& cache, const Matrix& d_output);

  // Every parameter, frozen ones included, in a stable order.
  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  Matrix embed_sample(const EncoderInput& input, std::size_t i, EncoderCache::Sample* s) const;

  EncoderConfig cfg_;
  Linear input_proj_;  // image only
  Param token_embedding_;  // token modalities only
  Param position_;
  std::optional<AttentionBlock> attention_;
  Projector head_in_, head_out_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are keyed by parameter position, so the
// same parameter list (order and shapes) must be passed on every step.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  // Throws NumericalError naming the first parameter with a non-finite
  // gradient; no parameter is touched in that case.
  void step(std::span<Param* const> params);
  std::uint64_t steps() const { return step_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  std::uint64_t step_ = 0;
  std::vector<Matrix> m_, v_;
};

// `TMCK` checkpoint: named float32 tensors plus a JSON config blob.
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::string config_json;
};

void write_checkpoint(const Checkpoint& ck, std::ostream& out);
Checkpoint read_checkpoint(std::istream& in);

NamedTensor to_tensor(const Param& p);
// Copies a tensor into a parameter of identical shape.
void assign_tensor(const NamedTensor& t, Param& p);

}  // namespace tmal::nn
