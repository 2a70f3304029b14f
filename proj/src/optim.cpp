#include "smoothtail/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace smoothtail {

void scale_gradients(std::vector<Parameter>& params, float factor) {
  for (auto& p : params) {
    if (p.trainable && p.grad.size() != 0) p.grad *= factor;
  }
}

double AdamW::step(std::vector<Parameter>& params, double lr) {
  if (first_moment_.empty()) {
    first_moment_.resize(params.size());
    second_moment_.resize(params.size());
  } else if (first_moment_.size() != params.size()) {
    throw std::logic_error("AdamW: parameter list changed between steps");
  }

  double sq = 0.0;
  for (const auto& p : params) {
    if (p.trainable && p.grad.size() != 0) sq += p.grad.cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip = config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm
                          ? config_.max_grad_norm / (norm + 1e-6)
                          : 1.0;

  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, steps_);
  const double bc2 = 1.0 - std::pow(config_.beta2, steps_);
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(config_.eps);
  const auto decay = static_cast<float>(1.0 - lr * config_.weight_decay);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.trainable) continue;
    Matrix& m = first_moment_[i];
    Matrix& v = second_moment_[i];
    if (m.size() == 0) {
      m = Matrix::Zero(p.value.rows(), p.value.cols());
      v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    const Matrix g = p.grad * static_cast<float>(clip);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    p.value *= decay;
    p.value.array() -=
        step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
    p.grad.setZero();
  }
  return norm;
}

}  // namespace smoothtail
