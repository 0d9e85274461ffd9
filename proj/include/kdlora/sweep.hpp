#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kdlora/accounting.hpp"
#include "kdlora/common.hpp"
#include "kdlora/data.hpp"
#include "kdlora/lora.hpp"
#include "kdlora/model.hpp"
#include "kdlora/report.hpp"
#include "kdlora/train.hpp"

namespace kdlora {

namespace detail {

inline constexpr std::uint64_t kLoraStream = 0x94d049bb133111ebULL;

/// Sets a dotted path ("lora.rank") inside a JSON object, creating
/// intermediate objects as needed.
inline void set_json_path(nlohmann::json& root, const std::string& path,
                          const nlohmann::json& value) {
  nlohmann::json* node = &root;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot - begin);
    if (key.empty()) throw ConfigError("sweep: empty key in vary path '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    begin = dot + 1;
  }
}

inline TrainConfig parse_train_config(const nlohmann::json& j, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.eval_every = j.value("eval_every", cfg.eval_every);
  if (j.contains("lr_schedule")) {
    cfg.schedule = parse_lr_schedule(j.at("lr_schedule").get<std::string>());
  }
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

inline SynthSplit load_sweep_task(const nlohmann::json& task) {
  if (task.contains("kind")) {
    return synth_task(parse_synth_kind(task.at("kind").get<std::string>()),
                      task.value("n_examples", std::size_t{2000}),
                      task.value("vocab_size", std::size_t{32}),
                      task.value("seq_len", std::size_t{16}),
                      task.value("seed", std::uint64_t{0}),
                      task.value("val_fraction", 0.2));
  }
  if (!task.contains("train_tsv") || !task.contains("val_tsv")) {
    throw ConfigError("sweep: task needs either a synthetic 'kind' or "
                      "'train_tsv'/'val_tsv' paths");
  }
  TsvSchema schema;
  schema.text_cols = task.value("text_cols", std::vector<std::string>{"sentence"});
  schema.label_col = task.value("label_col", std::string("label"));
  schema.label_values = task.value("labels", std::vector<std::string>{});
  const std::size_t max_len = task.value("max_len", std::size_t{32});
  const std::size_t max_vocab = task.value("max_vocab", std::size_t{1000});

  const RawDataset raw_train = load_tsv(task.at("train_tsv").get<std::string>(), schema);
  TsvSchema val_schema = schema;
  val_schema.label_values = raw_train.label_values;  // no leakage from val
  const RawDataset raw_val = load_tsv(task.at("val_tsv").get<std::string>(), val_schema);
  const Vocab vocab = build_vocab(collect_texts(raw_train), max_vocab);
  SynthSplit split;
  split.train = encode_dataset(raw_train, vocab, max_len);
  split.val = encode_dataset(raw_val, vocab, max_len);
  return split;
}

inline LoraConfig parse_lora_config(const nlohmann::json& j) {
  LoraConfig cfg;
  if (j.contains("rank")) cfg.rank = j.at("rank").get<std::size_t>();
  cfg.lora_alpha = j.value("lora_alpha", cfg.lora_alpha);
  cfg.lora_dropout = j.value("lora_dropout", cfg.lora_dropout);
  if (j.contains("target_modules")) {
    cfg.target_modules = j.at("target_modules").get<std::set<std::string>>();
  }
  cfg.validate();
  return cfg;
}

}  // namespace detail

struct SweepRunResult {
  std::size_t index = 0;
  std::string method;
  std::string directory;
  nlohmann::json overrides;
  RunReport report;
};

struct SweepResult {
  std::vector<SweepRunResult> runs;
  nlohmann::json summary;
  std::string convergence_csv_path;
};

/// Executes one resolved configuration for one method and returns its report.
template <typename T>
RunReport run_sweep_config(Method method, const nlohmann::json& resolved) {
  const std::uint64_t seed = resolved.value("seed", std::uint64_t{0});
  const SynthSplit data = detail::load_sweep_task(resolved.at("task"));
  const TrainConfig train_cfg =
      detail::parse_train_config(resolved.value("train", nlohmann::json::object()), seed);

  ModelConfig teacher_cfg = resolved.at("teacher_config").get<ModelConfig>();
  teacher_cfg.validate();

  if (method == Method::kFft) {
    EncoderModel<T> model = init_model<T>(teacher_cfg, seed);
    return train_teacher(model, data.train, data.val, train_cfg);
  }

  const LoraConfig lora_cfg =
      detail::parse_lora_config(resolved.value("lora", nlohmann::json::object()));

  if (method == Method::kLora) {
    EncoderModel<T> model = init_model<T>(teacher_cfg, seed);
    inject_lora(model, lora_cfg, seed ^ detail::kLoraStream);
    return train_lora(model, data.train, data.val, train_cfg);
  }

  // kd-lora: train a fresh teacher, derive the student, distill
  if (!resolved.contains("student_config")) {
    throw ConfigError("sweep: kd-lora needs a student_config");
  }
  ModelConfig student_cfg = resolved.at("student_config").get<ModelConfig>();
  student_cfg.validate();
  EncoderModel<T> teacher = init_model<T>(teacher_cfg, seed);
  train_teacher(teacher, data.train, data.val, train_cfg);

  const StudentInit init =
      parse_student_init(resolved.value("init", std::string("even-layers")));
  EncoderModel<T> student = init_student_from_teacher(teacher, student_cfg, init, seed);
  inject_lora(student, lora_cfg, seed ^ detail::kLoraStream);

  DistillSpec<T> spec;
  const nlohmann::json distill = resolved.value("distill", nlohmann::json::object());
  spec.alpha = distill.value("alpha", 0.5);
  spec.temperature = distill.value("temperature", 2.0);
  spec.teacher = &teacher;
  return train_kd_lora(student, data.train, data.val, train_cfg, spec);
}

/// Expands the grid's vary axes to a cartesian product, runs every
/// (configuration x method) combination into its own subdirectory, and writes
/// a combined convergence CSV plus a median-of-top-k summary (ranked by
/// validation accuracy).
template <typename T>
SweepResult run_sweep(const nlohmann::json& grid, const std::string& out_dir,
                      std::size_t jobs = 1) {
  namespace fs = std::filesystem;
  std::vector<std::string> methods;
  for (const auto& m : grid.value("methods", std::vector<std::string>{"kd-lora"})) {
    methods.push_back(m);
  }
  const std::size_t top_k = grid.value("top_k", std::size_t{6});

  // cartesian product over the vary axes, keys in sorted order
  const nlohmann::json vary = grid.value("vary", nlohmann::json::object());
  std::vector<std::string> keys;
  for (auto it = vary.begin(); it != vary.end(); ++it) keys.push_back(it.key());
  std::vector<nlohmann::json> combos{nlohmann::json::object()};
  for (const std::string& key : keys) {
    std::vector<nlohmann::json> next;
    for (const nlohmann::json& combo : combos) {
      for (const nlohmann::json& value : vary.at(key)) {
        nlohmann::json ext = combo;
        ext[key] = value;
        next.push_back(std::move(ext));
      }
    }
    combos = std::move(next);
  }

  fs::create_directories(out_dir);
  std::vector<SweepRunResult> runs;
  for (const nlohmann::json& combo : combos) {
    for (const std::string& method : methods) {
      SweepRunResult run;
      run.index = runs.size();
      run.method = method;
      run.overrides = combo;
      char dirname[64];
      std::snprintf(dirname, sizeof(dirname), "run_%03zu_%s", run.index,
                    method.c_str());
      run.directory = (fs::path(out_dir) / dirname).string();
      runs.push_back(std::move(run));
    }
  }

  auto execute = [&](SweepRunResult& run) {
    nlohmann::json resolved = grid;
    resolved.erase("vary");
    resolved.erase("methods");
    for (auto it = run.overrides.begin(); it != run.overrides.end(); ++it) {
      detail::set_json_path(resolved, it.key(), it.value());
    }
    run.report = run_sweep_config<T>(parse_method(run.method), resolved);
    fs::create_directories(run.directory);
    write_steps_csv(run.report, (fs::path(run.directory) / "steps.csv").string());
    write_summary_json(run.report, (fs::path(run.directory) / "summary.json").string());
  };

  if (jobs <= 1) {
    for (SweepRunResult& run : runs) execute(run);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const std::size_t n_workers = std::min(jobs, runs.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
      workers.emplace_back([&] {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= runs.size()) break;
          execute(runs[i]);
        }
      });
    }
    for (std::thread& worker : workers) worker.join();
  }

  // combined convergence curves for plotting
  std::vector<RunReport> reports;
  for (const SweepRunResult& run : runs) reports.push_back(run.report);
  const std::string convergence_path = (fs::path(out_dir) / "convergence.csv").string();
  emit_convergence_csv(reports, convergence_path);

  // rank by validation accuracy, keep top k, report per-metric medians
  std::vector<std::size_t> ranked(runs.size());
  std::iota(ranked.begin(), ranked.end(), std::size_t{0});
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    const auto& ma = runs[a].report.final_metrics;
    const auto& mb = runs[b].report.final_metrics;
    const double va = ma.count("accuracy") ? ma.at("accuracy") : 0.0;
    const double vb = mb.count("accuracy") ? mb.at("accuracy") : 0.0;
    return va > vb;
  });
  const std::size_t kept = std::min(top_k, ranked.size());
  std::map<std::string, std::vector<double>> metric_values;
  for (std::size_t i = 0; i < kept; ++i) {
    for (const auto& [name, value] : runs[ranked[i]].report.final_metrics) {
      metric_values[name].push_back(value);
    }
  }
  nlohmann::json medians = nlohmann::json::object();
  for (auto& [name, values] : metric_values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    medians[name] = n % 2 == 1 ? values[n / 2]
                               : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  }

  nlohmann::json summary;
  summary["top_k"] = top_k;
  summary["median_of_top_k"] = medians;
  summary["runs"] = nlohmann::json::array();
  for (const SweepRunResult& run : runs) {
    summary["runs"].push_back({{"index", run.index},
                               {"method", run.method},
                               {"directory", run.directory},
                               {"overrides", run.overrides},
                               {"final_metrics", run.report.final_metrics}});
  }
  std::ofstream out((fs::path(out_dir) / "summary.json").string());
  if (!out) throw IoError("sweep: cannot write summary in " + out_dir);
  out << summary.dump(2) << '\n';

  SweepResult result;
  result.runs = std::move(runs);
  result.summary = std::move(summary);
  result.convergence_csv_path = convergence_path;
  return result;
}

}  // namespace kdlora
