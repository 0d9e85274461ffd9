#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlora/common.hpp"
#include "kdlora/data.hpp"
#include "kdlora/lora.hpp"
#include "kdlora/model.hpp"
#include "kdlora/report.hpp"

namespace kdlora {

/// Closed-form count of every named parameter:
/// (vocab + max_seq_len) * d  +  n_layers * (4d^2 + 4d + 2*d*d_ff + d_ff + d + 4d)
/// + d * classes + classes.
inline std::size_t count_full_params(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t embeddings = (c.vocab_size + c.max_seq_len) * d;
  const std::size_t attn = 4 * d * d + 4 * d;
  const std::size_t ffn = 2 * d * c.d_ff + c.d_ff + d;
  const std::size_t norms = 4 * d;
  const std::size_t head = d * c.n_classes + c.n_classes;
  return embeddings + c.n_layers * (attn + ffn + norms) + head;
}

/// Adapter parameter count: sum of rank * (d_in + d_out) over every matched
/// weight matrix, plus the head when it is counted as trainable.
inline std::size_t count_lora_params(const ModelConfig& config, const LoraConfig& lora,
                                     bool include_head = false) {
  lora.validate();
  std::size_t total = 0;
  for (const detail::WeightShape& w : detail::matched_weights(config, lora)) {
    total += lora.rank * (w.d_in + w.d_out);
  }
  if (include_head) total += config.d_model * config.n_classes + config.n_classes;
  return total;
}

inline constexpr double kTrainActivationFactor = 16.0;
inline constexpr double kInferActivationFactor = 4.0;

/// Analytic training-state footprint:
///   params*bpe + trainable*bpe (grads) + 2*trainable*bpe (Adam moments)
///   + batch*seq*d_model*n_layers*c*bpe (activations, c = 16).
/// An estimate of ordering and ratios, not of absolute resident bytes.
inline std::size_t estimate_train_memory(const ModelConfig& config, Method method,
                                         const std::optional<LoraConfig>& lora,
                                         std::size_t bytes_per_el = 4,
                                         std::size_t batch_size = 32,
                                         std::size_t seq_len = 0) {
  if (seq_len == 0) seq_len = config.max_seq_len;
  const std::size_t params = count_full_params(config);
  std::size_t trainable = params;
  if (method != Method::kFft) {
    if (!lora.has_value()) {
      throw ConfigError("estimate_train_memory: " + method_name(method) +
                        " requires a lora config");
    }
    trainable = count_lora_params(config, *lora, /*include_head=*/true);
  }
  const double activations = static_cast<double>(batch_size) *
                             static_cast<double>(seq_len) *
                             static_cast<double>(config.d_model) *
                             static_cast<double>(config.n_layers) *
                             kTrainActivationFactor;
  return (params + 3 * trainable) * bytes_per_el +
         static_cast<std::size_t>(activations) * bytes_per_el;
}

/// Inference-state estimate: weights plus transient activations (c = 4).
inline std::size_t estimate_infer_memory(const ModelConfig& config,
                                         std::size_t bytes_per_el = 4,
                                         std::size_t batch_size = 32,
                                         std::size_t seq_len = 0) {
  if (seq_len == 0) seq_len = config.max_seq_len;
  const double activations = static_cast<double>(batch_size) *
                             static_cast<double>(seq_len) *
                             static_cast<double>(config.d_model) *
                             kInferActivationFactor;
  return count_full_params(config) * bytes_per_el +
         static_cast<std::size_t>(activations) * bytes_per_el;
}

inline const char* memory_formula_doc() {
  return "train: (params + 3*trainable)*bpe + batch*seq*d_model*n_layers*16*bpe; "
         "infer: params*bpe + batch*seq*d_model*4*bpe";
}

// ---------------------------------------------------------------------------
// Wall-clock inference benchmark

struct BenchResult {
  double mean_seconds = 0.0;
  double stddev_seconds = 0.0;
  double per_example_seconds = 0.0;
  std::size_t n_runs = 0;
  std::size_t n_warmup = 0;
  std::size_t n_examples = 0;
};

/// Times eval-mode forward passes over a fixed batched copy of the dataset.
/// Single-threaded, monotonic clock, 3 warm-up runs excluded. Stddev is the
/// population deviation, so n_runs = 1 reports 0.
template <typename T>
BenchResult bench_inference(const EncoderModel<T>& model, const Dataset& data,
                            std::size_t n_runs, std::size_t batch_size = 32) {
  if (n_runs < 1) throw ParameterError("bench_inference: n_runs must be >= 1");
  if (data.size() == 0) throw DataError("bench_inference: dataset is empty");
  ScopedMathThreads single(1);

  std::vector<Batch> batches;
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < data.size(); ++i) {
    indices.push_back(i);
    if (indices.size() == batch_size || i + 1 == data.size()) {
      batches.push_back(make_batch(data, indices));
      indices.clear();
    }
  }

  constexpr std::size_t kWarmup = 3;
  auto run_once = [&] {
    for (const Batch& b : batches) model.forward(b, Mode::kEval, nullptr);
  };
  for (std::size_t i = 0; i < kWarmup; ++i) run_once();

  std::vector<double> seconds(n_runs);
  for (std::size_t r = 0; r < n_runs; ++r) {
    const auto start = std::chrono::steady_clock::now();
    run_once();
    const auto stop = std::chrono::steady_clock::now();
    seconds[r] = std::chrono::duration<double>(stop - start).count();
  }
  double mean = 0.0;
  for (double s : seconds) mean += s;
  mean /= static_cast<double>(n_runs);
  double var = 0.0;
  for (double s : seconds) var += (s - mean) * (s - mean);
  var /= static_cast<double>(n_runs);

  BenchResult result;
  result.mean_seconds = mean;
  result.stddev_seconds = std::sqrt(var);
  result.per_example_seconds = mean / static_cast<double>(data.size());
  result.n_runs = n_runs;
  result.n_warmup = kWarmup;
  result.n_examples = data.size();
  return result;
}

// ---------------------------------------------------------------------------
// Cost reports

struct CostReport {
  Method method = Method::kFft;
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  std::size_t est_train_memory_bytes = 0;
  std::size_t est_infer_memory_bytes = 0;
  double inference_seconds = 0.0;
  double inference_stddev_seconds = 0.0;
  std::size_t n_runs = 0;

  void validate() const {
    if (trainable_params > total_params) {
      throw StateError("cost report: trainable_params exceeds total_params");
    }
  }
};

inline CostReport make_cost_report(Method method, const ModelConfig& config,
                                   const std::optional<LoraConfig>& lora,
                                   std::size_t bytes_per_el = 4,
                                   std::size_t batch_size = 32,
                                   std::size_t seq_len = 0,
                                   const std::optional<BenchResult>& bench = {}) {
  CostReport report;
  report.method = method;
  report.total_params = count_full_params(config);
  if (method != Method::kFft && !lora.has_value()) {
    throw ConfigError("cost report: " + method_name(method) + " needs a lora config");
  }
  report.trainable_params =
      method == Method::kFft
          ? report.total_params
          : count_lora_params(config, *lora, /*include_head=*/true);
  report.est_train_memory_bytes =
      estimate_train_memory(config, method, lora, bytes_per_el, batch_size, seq_len);
  report.est_infer_memory_bytes =
      estimate_infer_memory(config, bytes_per_el, batch_size, seq_len);
  if (bench) {
    report.inference_seconds = bench->mean_seconds;
    report.inference_stddev_seconds = bench->stddev_seconds;
    report.n_runs = bench->n_runs;
  }
  report.validate();
  return report;
}

inline nlohmann::json cost_report_json(const CostReport& r) {
  return nlohmann::json{{"method", method_name(r.method)},
                        {"total_params", r.total_params},
                        {"trainable_params", r.trainable_params},
                        {"est_train_memory_bytes", r.est_train_memory_bytes},
                        {"est_infer_memory_bytes", r.est_infer_memory_bytes},
                        {"memory_formula", memory_formula_doc()},
                        {"inference_seconds", r.inference_seconds},
                        {"inference_stddev_seconds", r.inference_stddev_seconds},
                        {"n_runs", r.n_runs}};
}

/// Aligned-column text table, one row per method.
inline std::string cost_table_text(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Method" << std::right << std::setw(14)
     << "Total" << std::setw(14) << "Trainable" << std::setw(18) << "TrainMem(est)"
     << std::setw(18) << "InferMem(est)" << std::setw(14) << "Infer(s)" << '\n';
  for (const CostReport& r : reports) {
    os << std::left << std::setw(10) << method_name(r.method) << std::right
       << std::setw(14) << r.total_params << std::setw(14) << r.trainable_params
       << std::setw(18) << r.est_train_memory_bytes << std::setw(18)
       << r.est_infer_memory_bytes << std::setw(14) << std::fixed
       << std::setprecision(4) << r.inference_seconds << '\n';
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

/// Long-format convergence log for plotting loss/metric against step:
/// method,step,loss,metric (one row per logged step of every report).
inline void emit_convergence_csv(const std::vector<RunReport>& reports,
                                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("emit_convergence_csv: cannot write " + path);
  out << "method,step,loss,metric\n";
  for (const RunReport& report : reports) {
    for (const StepRecord& rec : report.steps) {
      out << report.method << ',' << rec.step << ','
          << detail::csv_double(rec.train_loss) << ',';
      if (rec.eval_metric) out << detail::csv_double(*rec.eval_metric);
      out << '\n';
    }
  }
}

}  // namespace kdlora
