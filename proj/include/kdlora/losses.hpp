#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "kdlora/common.hpp"
#include "kdlora/tensor.hpp"

namespace kdlora {

/// Mean negative log-likelihood over the batch, computed via log-sum-exp
/// (never an explicit softmax followed by log).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be [batch, classes], got " +
                     shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy: got " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  auto lse = std::make_shared<std::vector<T>>(batch);
  T total = T(0);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::int32_t label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DataError("cross_entropy: label " + std::to_string(label) +
                      " out of range [0, " + std::to_string(classes) + ") at row " +
                      std::to_string(i));
    }
    const T* row = logits.data() + i * classes;
    T mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const T row_lse = mx + std::log(sum);
    (*lse)[i] = row_lse;
    total += row_lse - row[static_cast<std::size_t>(label)];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(batch));
  detail::check_finite(out, "cross_entropy");
  if (detail::grad_wanted<T>({&logits})) {
    out.set_requires_grad(true);
    auto ls = logits.storage(), os = out.storage();
    auto labels_copy =
        std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
    active_tape<T>()->record([ls, os, lse, labels_copy, batch, classes] {
      if (os->grad.empty() || !ls->requires_grad) return;
      ls->ensure_grad();
      const T g = os->grad[0] / static_cast<T>(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        const T* row = ls->values.data() + i * classes;
        T* grow = ls->grad.data() + i * classes;
        for (std::size_t c = 0; c < classes; ++c) {
          T p = std::exp(row[c] - (*lse)[i]);
          if (c == static_cast<std::size_t>((*labels_copy)[i])) p -= T(1);
          grow[c] += g * p;
        }
      }
    });
  }
  return out;
}

/// Distillation loss: T^2 * mean over the batch of
/// KL( softmax(z_teacher / T) || softmax(z_student / T) ).
/// Teacher logits are treated as constants; the gradient flows to the student
/// logits only.
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                  double temperature) {
  if (student_logits.rank() != 2 || student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("kd_loss: logits shapes differ, " +
                     shape_str(student_logits.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  }
  if (!(temperature > 0.0)) {
    throw ParameterError("kd_loss: temperature must be positive");
  }
  const std::size_t batch = student_logits.dim(0), classes = student_logits.dim(1);
  const double t = temperature;

  auto softened = [&](const T* row, std::vector<double>& probs) {
    double mx = static_cast<double>(row[0]) / t;
    for (std::size_t c = 1; c < classes; ++c) {
      mx = std::max(mx, static_cast<double>(row[c]) / t);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[c] = std::exp(static_cast<double>(row[c]) / t - mx);
      sum += probs[c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[c] /= sum;
  };

  auto teacher_probs = std::make_shared<std::vector<double>>(batch * classes);
  auto student_probs = std::make_shared<std::vector<double>>(batch * classes);
  std::vector<double> p(classes), q(classes);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    softened(teacher_logits.data() + i * classes, p);
    softened(student_logits.data() + i * classes, q);
    double kl = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      (*teacher_probs)[i * classes + c] = p[c];
      (*student_probs)[i * classes + c] = q[c];
      if (p[c] > 0.0) kl += p[c] * (std::log(p[c]) - std::log(q[c]));
    }
    total += kl;
  }
  Tensor<T> out =
      Tensor<T>::scalar(static_cast<T>(t * t * total / static_cast<double>(batch)));
  detail::check_finite(out, "kd_loss");
  if (detail::grad_wanted<T>({&student_logits})) {
    out.set_requires_grad(true);
    auto ss = student_logits.storage(), os = out.storage();
    active_tape<T>()->record([ss, os, teacher_probs, student_probs, batch, classes, t] {
      if (os->grad.empty() || !ss->requires_grad) return;
      ss->ensure_grad();
      // d/dz_S of T^2 * KL/B is (T/B) * (q - p)
      const double g = static_cast<double>(os->grad[0]) * t / static_cast<double>(batch);
      for (std::size_t i = 0; i < batch * classes; ++i) {
        ss->grad[i] +=
            static_cast<T>(g * ((*student_probs)[i] - (*teacher_probs)[i]));
      }
    });
  }
  return out;
}

template <typename T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> task;
  Tensor<T> kd;
};

/// alpha-weighted mix of task cross-entropy and distillation loss.
template <typename T>
LossParts<T> total_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                        std::span<const std::int32_t> labels, double alpha,
                        double temperature) {
  if (alpha < 0.0 || alpha > 1.0) {
    throw ParameterError("total_loss: alpha must lie in [0, 1]");
  }
  LossParts<T> parts;
  parts.task = cross_entropy(student_logits, labels);
  parts.kd = kd_loss(student_logits, teacher_logits, temperature);
  parts.total = add(scale(parts.task, static_cast<T>(alpha)),
                    scale(parts.kd, static_cast<T>(1.0 - alpha)));
  return parts;
}

}  // namespace kdlora
