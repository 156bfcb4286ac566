#include <cmath>

#include "tmal/neuralnet.h"

namespace tmal::nn {
namespace {

Matrix gaussian(int rows, int cols, double sigma, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.normal();
  return m;
}

void check_input(const Matrix& x, int expected_cols, const std::string& name) {
  if (x.cols() != expected_cols) {
    throw UsageError(name + ": shape mismatch, expected " + std::to_string(expected_cols) +
                     " input columns, got " + std::to_string(x.cols()));
  }
}

}  // namespace

Param::Param(std::string n, Matrix v, bool train)
    : name(std::move(n)), value(std::move(v)), trainable(train) {
  if (trainable) grad = Matrix::Zero(value.rows(), value.cols());
}

void Param::zero_grad() {
  if (trainable) grad.setZero();
}

void Param::freeze() {
  trainable = false;
  grad.resize(0, 0);
}

Linear::Linear(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
      bias(name + ".bias", Matrix::Zero(1, out)) {}

Linear::Linear(const std::string& name, Matrix w, RowVector b)
    : weight(name + ".weight", std::move(w)), bias(name + ".bias", Matrix(b)) {
  if (bias.value.cols() != weight.value.cols()) throw UsageError(name + ": bias/weight mismatch");
}

Matrix Linear::forward(const Matrix& x) const {
  check_input(x, in_dim(), weight.name);
  Matrix y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  if (weight.trainable) weight.grad.noalias() += x.transpose() * dy;
  if (bias.trainable) bias.grad.row(0) += dy.colwise().sum();
  return dy * weight.value.transpose();
}

void Linear::collect(std::vector<Param*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

std::size_t Linear::trainable_count() const {
  return (weight.trainable ? weight.count() : 0) + (bias.trainable ? bias.count() : 0);
}

Matrix LoRALinear::forward(const Matrix& x) const {
  Matrix y = base.forward(x);
  // Added last so a zero adapter leaves the base output bit-for-bit intact.
  y.noalias() += (x * down.value) * up.value;
  return y;
}

Matrix LoRALinear::backward(const Matrix& x, const Matrix& dy) {
  const Matrix xa = x * down.value;
  const Matrix dy_bt = dy * up.value.transpose();
  up.grad.noalias() += xa.transpose() * dy;
  down.grad.noalias() += x.transpose() * dy_bt;
  Matrix dx = dy * base.weight.value.transpose();
  dx.noalias() += dy_bt * down.value.transpose();
  return dx;
}

void LoRALinear::collect(std::vector<Param*>& out) {
  base.collect(out);
  out.push_back(&down);
  out.push_back(&up);
}

Matrix LoRALinear::merged_weight() const { return base.weight.value + down.value * up.value; }

LoRALinear lora_wrap(Linear layer, int rank, std::uint64_t seed) {
  const int in = layer.in_dim();
  const int out = layer.out_dim();
  if (rank < 1 || rank >= std::min(in, out)) {
    throw UsageError("LoRA rank " + std::to_string(rank) + " too large for a " +
                     std::to_string(in) + "x" + std::to_string(out) + " layer");
  }
  const std::string prefix = layer.weight.name.substr(0, layer.weight.name.rfind(".weight"));
  Rng rng(seed);
  LoRALinear l;
  l.base = std::move(layer);
  l.base.weight.freeze();
  l.base.bias.freeze();
  l.down = Param(prefix + ".lora_down", gaussian(in, rank, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  l.up = Param(prefix + ".lora_up", Matrix::Zero(rank, out));
  return l;
}

Matrix Projector::forward(const Matrix& x) const {
  return std::visit([&](const auto& l) { return l.forward(x); }, impl_);
}

Matrix Projector::backward(const Matrix& x, const Matrix& dy) {
  return std::visit([&](auto& l) { return l.backward(x, dy); }, impl_);
}

void Projector::collect(std::vector<Param*>& out) {
  std::visit([&](auto& l) { l.collect(out); }, impl_);
}

std::size_t Projector::trainable_count() const {
  return std::visit([](const auto& l) { return l.trainable_count(); }, impl_);
}

void Projector::wrap(int rank, std::uint64_t seed) {
  if (is_lora()) return;
  impl_ = lora_wrap(std::get<Linear>(std::move(impl_)), rank, seed);
}

AttentionBlock::AttentionBlock(const std::string& name, int d_model, Rng& rng)
    : query(Linear(name + ".query", d_model, d_model, rng)),
      key(Linear(name + ".key", d_model, d_model, rng)),
      value(Linear(name + ".value", d_model, d_model, rng)),
      output(name + ".output", d_model, d_model, rng) {}

Matrix AttentionBlock::forward(const Matrix& x, Cache* cache) const {
  if (x.rows() < 1) throw UsageError("attention: no real tokens");
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Matrix q = query.forward(x);
  Matrix k = key.forward(x);
  Matrix v = value.forward(x);
  Matrix probs = (q * k.transpose()) * scale;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    auto row = probs.row(i);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  Matrix mixed = probs * v;
  Matrix y = x + output.forward(mixed);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->mixed = std::move(mixed);
  }
  return y;
}

Matrix AttentionBlock::backward(const Cache& c, const Matrix& dy) {
  if (c.x.size() == 0) throw UsageError("attention backward without forward");
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.x.cols()));
  Matrix dx = dy;
  const Matrix d_mixed = output.backward(c.mixed, dy);
  const Matrix d_probs = d_mixed * c.v.transpose();
  const Matrix dv = c.probs.transpose() * d_mixed;
  Matrix d_scores = c.probs.cwiseProduct(d_probs);
  const Vector row_dot = d_scores.rowwise().sum();
  d_scores -= c.probs.cwiseProduct(row_dot.replicate(1, c.probs.cols()));
  d_scores *= scale;
  const Matrix dq = d_scores * c.k;
  const Matrix dk = d_scores.transpose() * c.q;
  dx += query.backward(c.x, dq);
  dx += key.backward(c.x, dk);
  dx += value.backward(c.x, dv);
  return dx;
}

void AttentionBlock::collect(std::vector<Param*>& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  output.collect(out);
}

namespace {

std::size_t prefix_length(const std::vector<bool>& mask) {
  std::size_t m = 0;
  while (m < mask.size() && mask[m]) ++m;
  for (std::size_t i = m; i < mask.size(); ++i) {
    if (mask[i]) throw UsageError("mask is not a contiguous true-prefix");
  }
  if (m == 0) throw UsageError("empty mask");
  return m;
}

}  // namespace

Matrix attention_forward(const AttentionBlock& block, const Matrix& x,
                         const std::vector<bool>& mask) {
  if (static_cast<std::size_t>(x.rows()) != mask.size()) {
    throw UsageError("attention: mask length does not match token count");
  }
  const auto m = static_cast<Eigen::Index>(prefix_length(mask));
  Matrix y = x;
  y.topRows(m) = block.forward(x.topRows(m), nullptr);
  return y;
}

RowVector masked_mean_pool(const Matrix& h, const std::vector<bool>& mask) {
  if (static_cast<std::size_t>(h.rows()) != mask.size()) {
    throw UsageError("pool: mask length does not match row count");
  }
  RowVector sum = RowVector::Zero(h.cols());
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    sum += h.row(static_cast<Eigen::Index>(i));
    ++n;
  }
  if (n == 0) throw UsageError("empty mask");
  return sum / static_cast<double>(n);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix l2_normalize_rows(const Matrix& z, Vector* norms) {
  Matrix y(z.rows(), z.cols());
  Vector n(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    n(i) = z.row(i).norm();
    if (!(n(i) > 0.0) || !std::isfinite(n(i))) {
      throw NumericalError("degenerate embedding at row " + std::to_string(i));
    }
    y.row(i) = z.row(i) / n(i);
  }
  if (norms) *norms = std::move(n);
  return y;
}

Matrix l2_normalize_backward(const Matrix& y, const Vector& norms, const Matrix& dy) {
  Matrix dz(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double proj = y.row(i).dot(dy.row(i));
    dz.row(i) = (dy.row(i) - proj * y.row(i)) / norms(i);
  }
  return dz;
}

}  // namespace tmal::nn
