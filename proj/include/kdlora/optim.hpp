#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kdlora/common.hpp"
#include "kdlora/tensor.hpp"

namespace kdlora {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam update on a single tensor. `step` is the
/// 1-based step count used for bias correction. The decay term applies even
/// when the gradient is zero.
template <typename T>
void adamw_step(Tensor<T>& param, const std::vector<T>& grad, std::vector<T>& m,
                std::vector<T>& v, std::size_t step, double lr, double weight_decay,
                const AdamWConfig& cfg = {}) {
  if (grad.size() != param.size() || m.size() != param.size() ||
      v.size() != param.size()) {
    throw ShapeError("adamw_step: grad/state sizes must match the parameter");
  }
  if (step == 0) throw ParameterError("adamw_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / bc1;
    const double v_hat = vi / bc2;
    const double update =
        m_hat / (std::sqrt(v_hat) + cfg.eps) + weight_decay * static_cast<double>(param[i]);
    param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * update);
  }
}

/// AdamW over a fixed set of trainable tensors. Frozen tensors must not be
/// handed in; tensors whose grad buffer was never allocated in a step are
/// skipped entirely for that step.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double lr, double weight_decay,
        AdamWConfig cfg = {})
      : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), cfg_(cfg) {
    if (!(lr > 0.0)) throw ParameterError("AdamW: learning rate must be positive");
    if (weight_decay < 0.0) throw ParameterError("AdamW: weight decay must be >= 0");
    for (const Tensor<T>& p : params_) {
      if (!p.requires_grad()) {
        throw StateError("AdamW: received a frozen tensor");
      }
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::size_t step_count() const { return step_; }

  void step() {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      adamw_step(params_[i], params_[i].grad(), m_[i], v_[i], step_, lr_, weight_decay_,
                 cfg_);
    }
  }

  void zero_grad() {
    for (Tensor<T>& p : params_) p.drop_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_;
  double weight_decay_;
  AdamWConfig cfg_;
  std::size_t step_ = 0;
};

}  // namespace kdlora
