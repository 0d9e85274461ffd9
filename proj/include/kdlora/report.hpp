#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlora/common.hpp"

namespace kdlora {

enum class Method { kFft, kLora, kKdLora };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kFft: return "FFT";
    case Method::kLora: return "LoRA";
    case Method::kKdLora: return "KD-LoRA";
  }
  throw StateError("unknown method");
}

inline Method parse_method(const std::string& s) {
  if (s == "fft" || s == "FFT") return Method::kFft;
  if (s == "lora" || s == "LoRA") return Method::kLora;
  if (s == "kd-lora" || s == "KD-LoRA" || s == "kdlora") return Method::kKdLora;
  throw ConfigError("unknown method '" + s + "' (expected fft, lora or kd-lora)");
}

struct StepRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double task_component = 0.0;
  // zero and absent-from-CSV for runs without a distillation term
  std::optional<double> kd_component;
  std::optional<double> eval_metric;
};

/// Everything one training run produces besides the weights: per-step losses,
/// final metrics and the cost accounting.
struct RunReport {
  std::string method;
  std::vector<StepRecord> steps;
  std::map<std::string, double> final_metrics;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::vector<double> epoch_seconds;
  std::size_t peak_memory_estimate_bytes = 0;
  std::uint64_t seed = 0;
};

namespace detail {
inline std::string csv_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
}  // namespace detail

/// Step-level log: step,train_loss,task_loss,kd_loss,eval_metric. Optional
/// fields are left empty. No wall-clock columns, so re-runs are byte-stable.
inline void write_steps_csv(const RunReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_steps_csv: cannot write " + path);
  out << "step,train_loss,task_loss,kd_loss,eval_metric\n";
  for (const StepRecord& rec : report.steps) {
    out << rec.step << ',' << detail::csv_double(rec.train_loss) << ','
        << detail::csv_double(rec.task_component) << ',';
    if (rec.kd_component) out << detail::csv_double(*rec.kd_component);
    out << ',';
    if (rec.eval_metric) out << detail::csv_double(*rec.eval_metric);
    out << '\n';
  }
}

inline nlohmann::json report_summary_json(const RunReport& report) {
  nlohmann::json j;
  j["method"] = report.method;
  j["seed"] = report.seed;
  j["steps"] = report.steps.size();
  j["final_metrics"] = report.final_metrics;
  j["trainable_params"] = report.trainable_params;
  j["total_params"] = report.total_params;
  j["epoch_seconds"] = report.epoch_seconds;  // timing: excluded from byte-stability
  j["peak_memory_estimate_bytes"] = report.peak_memory_estimate_bytes;
  if (!report.steps.empty()) j["final_train_loss"] = report.steps.back().train_loss;
  return j;
}

inline void write_summary_json(const RunReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_summary_json: cannot write " + path);
  out << report_summary_json(report).dump(2) << '\n';
}

}  // namespace kdlora
