#include <cmath>

#include "tmal/neuralnet.h"

namespace tmal::nn {

void Adam::step(std::span<Param* const> params) {
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Param* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw UsageError("Adam: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param& p = *params[i];
    if (p.value.rows() != m_[i].rows() || p.value.cols() != m_[i].cols()) {
      throw UsageError("Adam: shape of '" + p.name + "' changed between steps");
    }
    if (p.trainable && !p.grad.allFinite()) {
      throw NumericalError("non-finite gradient in parameter '" + p.name + "' at step " +
                           std::to_string(step_ + 1));
    }
  }

  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(opts_.beta1, t);
  const double c2 = 1.0 - std::pow(opts_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (!p.trainable) continue;
    auto m = m_[i].array();
    auto v = v_[i].array();
    const auto g = p.grad.array();
    m = opts_.beta1 * m + (1.0 - opts_.beta1) * g;
    v = opts_.beta2 * v + (1.0 - opts_.beta2) * g.square();
    p.value.array() -= opts_.lr * (m / c1) / ((v / c2).sqrt() + opts_.eps);
  }
}

}  // namespace tmal::nn
