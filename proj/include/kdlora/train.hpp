#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kdlora/common.hpp"
#include "kdlora/data.hpp"
#include "kdlora/lora.hpp"
#include "kdlora/losses.hpp"
#include "kdlora/metrics.hpp"
#include "kdlora/model.hpp"
#include "kdlora/optim.hpp"
#include "kdlora/report.hpp"

namespace kdlora {

enum class LrSchedule { kConstant, kLinearDecay };

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "linear" || s == "linear-decay") return LrSchedule::kLinearDecay;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant or linear)");
}

struct TrainConfig {
  double learning_rate = 3e-4;  // adapter-scale default; full fine-tuning wants less
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate on the validation set per epoch only
  LrSchedule schedule = LrSchedule::kConstant;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
  }
};

/// Distillation knobs plus the trained teacher (held in eval mode throughout).
template <typename T>
struct DistillSpec {
  double alpha = 0.5;
  double temperature = 2.0;
  const EncoderModel<T>* teacher = nullptr;

  void validate(const EncoderModel<T>& student) const {
    if (teacher == nullptr) throw ConfigError("distill: teacher model is required");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("distill: alpha must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be > 0");
    if (teacher->config().n_classes != student.config().n_classes) {
      throw ConfigError("distill: teacher has " +
                        std::to_string(teacher->config().n_classes) +
                        " classes, student has " +
                        std::to_string(student.config().n_classes));
    }
  }
};

template <typename T>
std::vector<std::int32_t> predict(const EncoderModel<T>& model, const Dataset& data,
                                  std::size_t batch_size) {
  std::vector<std::int32_t> preds;
  preds.reserve(data.size());
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < data.size(); ++i) {
    indices.push_back(i);
    if (indices.size() == batch_size || i + 1 == data.size()) {
      const Batch batch = make_batch(data, indices);
      const Tensor<T> logits = model.forward(batch, Mode::kEval, nullptr);
      const std::size_t classes = logits.dim(1);
      for (std::size_t row = 0; row < batch.batch_size; ++row) {
        const T* p = logits.data() + row * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
          if (p[c] > p[best]) best = c;
        }
        preds.push_back(static_cast<std::int32_t>(best));
      }
      indices.clear();
    }
  }
  return preds;
}

template <typename T>
double evaluate_accuracy(const EncoderModel<T>& model, const Dataset& data,
                         std::size_t batch_size) {
  std::vector<std::int32_t> labels;
  labels.reserve(data.size());
  for (const Example& ex : data.examples) labels.push_back(ex.label);
  return accuracy(predict(model, data, batch_size), labels);
}

namespace detail {

// Distinct derived streams so that adding/removing a consumer of one never
// shifts another.
inline constexpr std::uint64_t kShuffleStream = 0x9e3779b97f4a7c15ULL;
inline constexpr std::uint64_t kDropoutStream = 0xbf58476d1ce4e5b9ULL;

template <typename T>
std::size_t resident_scalars(const EncoderModel<T>& model) {
  std::size_t n = model.parameter_count();
  for (const auto& [name, ad] : model.adapters()) n += ad.a.size() + ad.b.size();
  return n;
}

/// Shared epoch/batch loop. The loss recipe is the only thing that differs
/// between full fine-tuning, plain adapter training and distillation.
template <typename T>
RunReport run_training(EncoderModel<T>& model, const Dataset& train, const Dataset& val,
                       const TrainConfig& cfg, Method method,
                       const DistillSpec<T>* distill) {
  cfg.validate();
  if (train.size() == 0) throw DataError("train: training set is empty");
  if (train.n_classes != model.config().n_classes) {
    throw ConfigError("train: dataset has " + std::to_string(train.n_classes) +
                      " classes, model expects " +
                      std::to_string(model.config().n_classes));
  }

  Rng shuffle_rng(cfg.seed ^ kShuffleStream);
  Rng dropout_rng(cfg.seed ^ kDropoutStream);

  const TrainableSummary trainable = lora_trainable_params(model);
  AdamW<T> optimizer(collect_trainable_tensors(model), cfg.learning_rate,
                     cfg.weight_decay);

  RunReport report;
  report.method = method_name(method);
  report.seed = cfg.seed;
  report.trainable_params = trainable.total;
  report.total_params = resident_scalars(model);
  {
    const double activations = static_cast<double>(cfg.batch_size) *
                               static_cast<double>(train.seq_len) *
                               static_cast<double>(model.config().d_model) *
                               static_cast<double>(model.config().n_layers) * 16.0;
    report.peak_memory_estimate_bytes =
        (report.total_params + 3 * trainable.total +
         static_cast<std::size_t>(activations)) *
        sizeof(T);
  }

  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t begin = 0; begin < train.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(train.size(), begin + cfg.batch_size);
      const std::vector<std::size_t> indices(order.begin() + static_cast<long>(begin),
                                             order.begin() + static_cast<long>(end));
      const Batch batch = make_batch(train, indices);

      if (cfg.schedule == LrSchedule::kLinearDecay) {
        const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
        optimizer.set_lr(cfg.learning_rate * std::max(0.0, 1.0 - frac));
      }

      // Teacher logits are produced outside the tape: no recording, no
      // gradient flow, and eval mode consumes no randomness.
      Tensor<T> teacher_logits;
      if (method == Method::kKdLora) {
        teacher_logits = distill->teacher->forward(batch, Mode::kEval, nullptr);
      }

      StepRecord rec;
      rec.step = step + 1;
      {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> logits = model.forward(batch, Mode::kTrain, &dropout_rng);
        if (method == Method::kKdLora) {
          LossParts<T> parts = total_loss(logits, teacher_logits, batch.labels,
                                          distill->alpha, distill->temperature);
          rec.task_component = static_cast<double>(parts.task.value());
          rec.kd_component = static_cast<double>(parts.kd.value());
          // logged total is recomposed in double so the component identity
          // holds exactly at any storage precision
          rec.train_loss = distill->alpha * rec.task_component +
                           (1.0 - distill->alpha) * *rec.kd_component;
          backward(parts.total, tape);
        } else {
          Tensor<T> loss = cross_entropy(logits, batch.labels);
          rec.task_component = static_cast<double>(loss.value());
          rec.train_loss = rec.task_component;
          backward(loss, tape);
        }
      }
      optimizer.step();
      optimizer.zero_grad();
      ++step;

      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
        rec.eval_metric = evaluate_accuracy(model, val, cfg.batch_size);
      }
      report.steps.push_back(rec);
    }
    const auto epoch_stop = std::chrono::steady_clock::now();
    report.epoch_seconds.push_back(
        std::chrono::duration<double>(epoch_stop - epoch_start).count());
    if (cfg.eval_every == 0 && val.size() > 0) {
      report.steps.back().eval_metric = evaluate_accuracy(model, val, cfg.batch_size);
    }
  }

  if (val.size() > 0) {
    if (!report.steps.back().eval_metric) {
      report.steps.back().eval_metric = evaluate_accuracy(model, val, cfg.batch_size);
    }
    report.final_metrics["accuracy"] = *report.steps.back().eval_metric;
  }
  return report;
}

}  // namespace detail

/// Full fine-tuning on the task objective; every parameter is updated.
template <typename T>
RunReport train_teacher(EncoderModel<T>& model, const Dataset& train, const Dataset& val,
                        const TrainConfig& cfg) {
  if (model.adapted()) {
    throw StateError("train_teacher: model has adapters attached; merge them first");
  }
  model.set_all_trainable(true);
  return detail::run_training<T>(model, train, val, cfg, Method::kFft, nullptr);
}

/// Adapter-only baseline: same loop, but only the injected low-rank factors
/// and the head receive updates. Base weights are bit-identical afterwards.
template <typename T>
RunReport train_lora(EncoderModel<T>& model, const Dataset& train, const Dataset& val,
                     const TrainConfig& cfg) {
  if (!model.adapted()) {
    throw StateError("train_lora: inject adapters before training");
  }
  return detail::run_training<T>(model, train, val, cfg, Method::kLora, nullptr);
}

/// Distillation into an adapted student: per batch, the teacher's logits are
/// computed without gradient tracking and the student's adapters plus head
/// step on the alpha-mixed loss. Both loss components land in the report.
template <typename T>
RunReport train_kd_lora(EncoderModel<T>& student, const Dataset& train,
                        const Dataset& val, const TrainConfig& cfg,
                        const DistillSpec<T>& spec) {
  if (!student.adapted()) {
    throw StateError("train_kd_lora: inject adapters before training");
  }
  spec.validate(student);
  return detail::run_training(student, train, val, cfg, Method::kKdLora, &spec);
}

}  // namespace kdlora
