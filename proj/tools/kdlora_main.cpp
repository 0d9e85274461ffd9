// Command-line front end: teacher fine-tuning, adapter baselines,
// distillation, evaluation, cost reporting, benchmarking and grid sweeps.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdlora/kdlora.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DataFlags {
  std::string train_path;
  std::string val_path;
  std::string text_cols = "sentence";
  std::string label_col = "label";
  std::string labels;  // comma-separated fixed label order; empty = derive
  std::size_t max_len = 32;
  std::size_t max_vocab = 4096;
};

void add_data_flags(CLI::App* cmd, DataFlags& flags, bool require_train = true) {
  auto* train = cmd->add_option("--train", flags.train_path, "training TSV");
  if (require_train) train->required();
  cmd->add_option("--val", flags.val_path, "validation TSV");
  cmd->add_option("--text-cols", flags.text_cols,
                  "text column name(s), comma-separated (1 or 2)");
  cmd->add_option("--label-col", flags.label_col, "label column name");
  cmd->add_option("--labels", flags.labels,
                  "fixed label order, comma-separated (default: sorted unique)");
  cmd->add_option("--max-len", flags.max_len, "padded sequence length");
  cmd->add_option("--max-vocab", flags.max_vocab, "vocabulary cap");
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

kdlora::TsvSchema make_schema(const DataFlags& flags) {
  kdlora::TsvSchema schema;
  schema.text_cols = split_list(flags.text_cols, ',');
  schema.label_col = flags.label_col;
  if (!flags.labels.empty()) schema.label_values = split_list(flags.labels, ',');
  return schema;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw kdlora::IoError("cannot open " + path);
  json j;
  in >> j;
  return j;
}

kdlora::ModelConfig load_model_config(const std::string& path) {
  auto config = load_json_file(path).get<kdlora::ModelConfig>();
  config.validate();
  return config;
}

/// "rank=4,alpha=16,dropout=0.0,targets=wq;wv" (rank/r both accepted).
kdlora::LoraConfig parse_lora_flag(const std::string& s) {
  kdlora::LoraConfig cfg;
  for (const std::string& item : split_list(s, ',')) {
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos) {
      throw kdlora::ConfigError("--lora: expected key=value, got '" + item + "'");
    }
    const std::string key = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    try {
      if (key == "r" || key == "rank") {
        cfg.rank = std::stoul(value);
      } else if (key == "alpha") {
        cfg.lora_alpha = std::stod(value);
      } else if (key == "dropout") {
        cfg.lora_dropout = std::stod(value);
      } else if (key == "targets") {
        cfg.target_modules.clear();
        for (const std::string& t : split_list(value, ';')) cfg.target_modules.insert(t);
      } else {
        throw kdlora::ConfigError("--lora: unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw kdlora::ConfigError("--lora: '" + value + "' is not a number for '" + key +
                                "'");
    } catch (const std::out_of_range&) {
      throw kdlora::ConfigError("--lora: '" + value + "' is out of range for '" + key +
                                "'");
    }
  }
  cfg.validate();
  return cfg;
}

struct LoadedData {
  kdlora::Dataset train;
  kdlora::Dataset val;
  kdlora::Vocab vocab;
  std::vector<std::string> label_names;
};

/// Loads TSVs against a fresh vocabulary built from the training split,
/// capped so that every id stays below the model's vocab_size.
LoadedData load_data_fresh_vocab(const DataFlags& flags, std::size_t model_vocab_size) {
  LoadedData data;
  const kdlora::TsvSchema schema = make_schema(flags);
  const kdlora::RawDataset raw_train = kdlora::load_tsv(flags.train_path, schema);
  data.vocab = kdlora::build_vocab(kdlora::collect_texts(raw_train),
                                   std::min(flags.max_vocab, model_vocab_size));
  data.train = kdlora::encode_dataset(raw_train, data.vocab, flags.max_len);
  data.label_names = raw_train.label_values;
  if (!flags.val_path.empty()) {
    kdlora::TsvSchema val_schema = schema;
    val_schema.label_values = raw_train.label_values;
    const kdlora::RawDataset raw_val = kdlora::load_tsv(flags.val_path, val_schema);
    data.val = kdlora::encode_dataset(raw_val, data.vocab, flags.max_len);
  }
  return data;
}

/// Loads TSVs against a vocabulary and label order that came from a
/// checkpoint, so tokenization matches the original run.
LoadedData load_data_with_vocab(const DataFlags& flags, const kdlora::Vocab& vocab,
                                const std::vector<std::string>& label_names) {
  LoadedData data;
  data.vocab = vocab;
  data.label_names = label_names;
  kdlora::TsvSchema schema = make_schema(flags);
  if (schema.label_values.empty()) schema.label_values = label_names;
  const kdlora::RawDataset raw_train = kdlora::load_tsv(flags.train_path, schema);
  data.train = kdlora::encode_dataset(raw_train, vocab, flags.max_len);
  if (!flags.val_path.empty()) {
    const kdlora::RawDataset raw_val = kdlora::load_tsv(flags.val_path, schema);
    data.val = kdlora::encode_dataset(raw_val, vocab, flags.max_len);
  }
  return data;
}

std::optional<kdlora::Vocab> vocab_from_metadata(const json& metadata) {
  if (!metadata.contains("vocab")) return std::nullopt;
  return kdlora::Vocab::from_json(metadata.at("vocab"));
}

std::vector<std::string> labels_from_metadata(const json& metadata) {
  return metadata.value("labels", std::vector<std::string>{});
}

template <typename F>
auto with_dtype(const std::string& dtype, F&& f) {
  if (dtype == "f32") return f(float{});
  if (dtype == "f64") return f(double{});
  throw kdlora::ConfigError("unknown dtype '" + dtype + "' (expected f32 or f64)");
}

void write_run_outputs(const kdlora::RunReport& report, const std::string& out_prefix,
                       kdlora::RunManifest& manifest) {
  kdlora::write_steps_csv(report, out_prefix + ".steps.csv");
  kdlora::write_summary_json(report, out_prefix + ".summary.json");
  manifest.output_paths.push_back(out_prefix + ".steps.csv");
  manifest.output_paths.push_back(out_prefix + ".summary.json");
}

struct TrainFlags {
  double learning_rate = 3e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::string schedule = "constant";
  std::string dtype = "f32";
};

void add_train_flags(CLI::App* cmd, TrainFlags& flags) {
  cmd->add_option("--lr", flags.learning_rate, "learning rate");
  cmd->add_option("--batch-size", flags.batch_size, "batch size");
  cmd->add_option("--epochs", flags.epochs, "epochs");
  cmd->add_option("--weight-decay", flags.weight_decay, "decoupled weight decay");
  cmd->add_option("--seed", flags.seed, "run seed");
  cmd->add_option("--eval-every", flags.eval_every,
                  "evaluate every N steps (0: per epoch)");
  cmd->add_option("--lr-schedule", flags.schedule, "constant or linear");
  cmd->add_option("--dtype", flags.dtype, "f32 or f64");
}

kdlora::TrainConfig make_train_config(const TrainFlags& flags) {
  kdlora::TrainConfig cfg;
  cfg.learning_rate = flags.learning_rate;
  cfg.batch_size = flags.batch_size;
  cfg.epochs = flags.epochs;
  cfg.weight_decay = flags.weight_decay;
  cfg.seed = flags.seed;
  cfg.eval_every = flags.eval_every;
  cfg.schedule = kdlora::parse_lr_schedule(flags.schedule);
  cfg.validate();
  return cfg;
}

json train_config_json(const kdlora::TrainConfig& cfg, const std::string& dtype) {
  return json{{"learning_rate", cfg.learning_rate},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"weight_decay", cfg.weight_decay},
              {"seed", cfg.seed},
              {"eval_every", cfg.eval_every},
              {"lr_schedule", cfg.schedule == kdlora::LrSchedule::kConstant
                                  ? "constant"
                                  : "linear"},
              {"dtype", dtype}};
}

// ---------------------------------------------------------------------------

int cmd_train_teacher(const std::string& config_path, const DataFlags& data_flags,
                      const TrainFlags& train_flags, const std::string& out_prefix) {
  const kdlora::ModelConfig config = load_model_config(config_path);
  DataFlags clamped = data_flags;
  clamped.max_len = std::min(clamped.max_len, config.max_seq_len);
  const LoadedData data = load_data_fresh_vocab(clamped, config.vocab_size);
  const kdlora::TrainConfig train_cfg = make_train_config(train_flags);

  kdlora::RunManifest manifest;
  manifest.command = "train-teacher";
  manifest.seed = train_cfg.seed;
  manifest.resolved_config = {{"model_config", config},
                              {"train", train_config_json(train_cfg, train_flags.dtype)}};
  manifest.add_input(config_path);
  manifest.add_input(data_flags.train_path);
  if (!data_flags.val_path.empty()) manifest.add_input(data_flags.val_path);

  with_dtype(train_flags.dtype, [&](auto tag) {
    using T = decltype(tag);
    kdlora::EncoderModel<T> model = kdlora::init_model<T>(config, train_cfg.seed);
    const kdlora::RunReport report =
        kdlora::train_teacher(model, data.train, data.val, train_cfg);
    kdlora::save_model(model, out_prefix + ".kdlr", data.vocab, data.label_names);
    write_run_outputs(report, out_prefix, manifest);
    return 0;
  });
  data.vocab.save(out_prefix + ".vocab.json");
  manifest.output_paths.push_back(out_prefix + ".kdlr");
  manifest.output_paths.push_back(out_prefix + ".vocab.json");
  manifest.write(out_prefix + ".manifest.json");
  std::cout << "wrote " << out_prefix << ".kdlr\n";
  return 0;
}

enum class EmitKind { kAdapters, kMerged, kBoth };

EmitKind parse_emit(const std::string& s) {
  if (s == "adapters") return EmitKind::kAdapters;
  if (s == "merged") return EmitKind::kMerged;
  if (s == "both") return EmitKind::kBoth;
  throw kdlora::ConfigError("--emit must be adapters, merged or both");
}

template <typename T>
void emit_student(kdlora::EncoderModel<T>& model, const kdlora::LoraConfig& lora_cfg,
                  EmitKind emit, const std::string& out_prefix,
                  const kdlora::Vocab& vocab, const std::vector<std::string>& labels,
                  kdlora::RunManifest& manifest) {
  if (emit == EmitKind::kAdapters || emit == EmitKind::kBoth) {
    kdlora::save_adapters(model, lora_cfg, out_prefix + ".adapters.kdlr");
    manifest.output_paths.push_back(out_prefix + ".adapters.kdlr");
  }
  if (emit == EmitKind::kMerged || emit == EmitKind::kBoth) {
    kdlora::merge_lora(model);
    kdlora::save_model(model, out_prefix + ".merged.kdlr", vocab, labels);
    manifest.output_paths.push_back(out_prefix + ".merged.kdlr");
  }
}

int cmd_train_lora(const std::string& config_path, const std::string& base_ckpt,
                   const std::string& lora_flag, const DataFlags& data_flags,
                   const TrainFlags& train_flags, const std::string& emit_flag,
                   const std::string& out_prefix) {
  if (config_path.empty() == base_ckpt.empty()) {
    throw kdlora::ConfigError("train-lora: pass exactly one of --config or --base");
  }
  const kdlora::LoraConfig lora_cfg = parse_lora_flag(lora_flag);
  const kdlora::TrainConfig train_cfg = make_train_config(train_flags);
  const EmitKind emit = parse_emit(emit_flag);

  kdlora::RunManifest manifest;
  manifest.command = "train-lora";
  manifest.seed = train_cfg.seed;
  manifest.add_input(data_flags.train_path);
  if (!data_flags.val_path.empty()) manifest.add_input(data_flags.val_path);

  auto run = [&](auto tag, kdlora::EncoderModel<decltype(tag)> model,
                 const LoadedData& data) {
    using T = decltype(tag);
    kdlora::inject_lora(model, lora_cfg, train_cfg.seed ^ kdlora::detail::kLoraStream);
    const kdlora::RunReport report =
        kdlora::train_lora(model, data.train, data.val, train_cfg);
    emit_student<T>(model, lora_cfg, emit, out_prefix, data.vocab, data.label_names,
                    manifest);
    write_run_outputs(report, out_prefix, manifest);
  };

  if (!config_path.empty()) {
    const kdlora::ModelConfig config = load_model_config(config_path);
    manifest.add_input(config_path);
    DataFlags clamped = data_flags;
    clamped.max_len = std::min(clamped.max_len, config.max_seq_len);
    const LoadedData data = load_data_fresh_vocab(clamped, config.vocab_size);
    manifest.resolved_config = {
        {"model_config", config},
        {"lora", lora_cfg},
        {"train", train_config_json(train_cfg, train_flags.dtype)}};
    with_dtype(train_flags.dtype, [&](auto tag) {
      run(tag, kdlora::init_model<decltype(tag)>(config, train_cfg.seed), data);
      return 0;
    });
  } else {
    manifest.add_input(base_ckpt);
    const json metadata = kdlora::read_checkpoint_metadata(base_ckpt);
    const std::string dtype = metadata.at("dtype").get<std::string>();
    const auto vocab = vocab_from_metadata(metadata);
    if (!vocab) throw kdlora::ConfigError("base checkpoint carries no vocabulary");
    DataFlags clamped = data_flags;
    clamped.max_len = std::min(
        clamped.max_len,
        metadata.at("model_config").get<kdlora::ModelConfig>().max_seq_len);
    const LoadedData data =
        load_data_with_vocab(clamped, *vocab, labels_from_metadata(metadata));
    manifest.resolved_config = {
        {"base", base_ckpt},
        {"lora", lora_cfg},
        {"train", train_config_json(train_cfg, dtype)}};
    with_dtype(dtype, [&](auto tag) {
      run(tag, kdlora::load_model<decltype(tag)>(base_ckpt), data);
      return 0;
    });
  }
  manifest.write(out_prefix + ".manifest.json");
  std::cout << "wrote " << out_prefix << ".*\n";
  return 0;
}

int cmd_distill(const std::string& teacher_ckpt, const std::string& student_config_path,
                const std::string& init_flag, const std::string& lora_flag, double alpha,
                double temperature, const DataFlags& data_flags,
                const TrainFlags& train_flags, const std::string& emit_flag,
                const std::string& out_prefix) {
  const kdlora::LoraConfig lora_cfg = parse_lora_flag(lora_flag);
  const kdlora::TrainConfig train_cfg = make_train_config(train_flags);
  const kdlora::StudentInit init = kdlora::parse_student_init(init_flag);
  const EmitKind emit = parse_emit(emit_flag);
  const kdlora::ModelConfig student_config = load_model_config(student_config_path);

  const json metadata = kdlora::read_checkpoint_metadata(teacher_ckpt);
  const std::string dtype = metadata.at("dtype").get<std::string>();
  const auto vocab = vocab_from_metadata(metadata);
  if (!vocab) throw kdlora::ConfigError("teacher checkpoint carries no vocabulary");
  DataFlags clamped = data_flags;
  clamped.max_len = std::min(
      {clamped.max_len, student_config.max_seq_len,
       metadata.at("model_config").get<kdlora::ModelConfig>().max_seq_len});
  const LoadedData data =
      load_data_with_vocab(clamped, *vocab, labels_from_metadata(metadata));

  kdlora::RunManifest manifest;
  manifest.command = "distill";
  manifest.seed = train_cfg.seed;
  manifest.resolved_config = {{"teacher", teacher_ckpt},
                              {"student_config", student_config},
                              {"init", init_flag},
                              {"lora", lora_cfg},
                              {"alpha", alpha},
                              {"temperature", temperature},
                              {"train", train_config_json(train_cfg, dtype)}};
  manifest.add_input(teacher_ckpt);
  manifest.add_input(student_config_path);
  manifest.add_input(data_flags.train_path);
  if (!data_flags.val_path.empty()) manifest.add_input(data_flags.val_path);

  with_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    const kdlora::EncoderModel<T> teacher = kdlora::load_model<T>(teacher_ckpt);
    kdlora::EncoderModel<T> student =
        kdlora::init_student_from_teacher(teacher, student_config, init, train_cfg.seed);
    kdlora::inject_lora(student, lora_cfg, train_cfg.seed ^ kdlora::detail::kLoraStream);
    kdlora::DistillSpec<T> spec;
    spec.alpha = alpha;
    spec.temperature = temperature;
    spec.teacher = &teacher;
    const kdlora::RunReport report =
        kdlora::train_kd_lora(student, data.train, data.val, train_cfg, spec);
    emit_student<T>(student, lora_cfg, emit, out_prefix, data.vocab, data.label_names,
                    manifest);
    write_run_outputs(report, out_prefix, manifest);
    return 0;
  });
  manifest.write(out_prefix + ".manifest.json");
  std::cout << "wrote " << out_prefix << ".*\n";
  return 0;
}

int cmd_eval(const std::string& model_ckpt, const std::string& data_path,
             const std::string& metrics_flag, const DataFlags& data_flags,
             const std::string& out_path) {
  const json metadata = kdlora::read_checkpoint_metadata(model_ckpt);
  const std::string dtype = metadata.at("dtype").get<std::string>();
  const auto vocab = vocab_from_metadata(metadata);
  if (!vocab) throw kdlora::ConfigError("checkpoint carries no vocabulary");

  DataFlags flags = data_flags;
  flags.train_path = data_path;
  flags.val_path.clear();
  flags.max_len = std::min(
      flags.max_len, metadata.at("model_config").get<kdlora::ModelConfig>().max_seq_len);
  const LoadedData data =
      load_data_with_vocab(flags, *vocab, labels_from_metadata(metadata));

  std::vector<std::int32_t> labels;
  for (const kdlora::Example& ex : data.train.examples) labels.push_back(ex.label);

  const std::vector<std::int32_t> preds = with_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    const kdlora::EncoderModel<T> model = kdlora::load_model<T>(model_ckpt);
    return kdlora::predict(model, data.train, 32);
  });

  json result;
  for (const std::string& metric : split_list(metrics_flag, ',')) {
    if (metric == "accuracy") {
      result["accuracy"] = kdlora::accuracy(preds, labels);
    } else if (metric == "f1") {
      result["f1"] = kdlora::f1_binary(preds, labels);
    } else if (metric == "mcc") {
      result["mcc"] = kdlora::matthews_corr(preds, labels);
    } else if (metric == "pearson" || metric == "spearman") {
      // correlations over predicted class indices; regression heads are not
      // trained here, the metrics exist for completeness
      std::vector<double> p(preds.begin(), preds.end()), l(labels.begin(), labels.end());
      result[metric] =
          metric == "pearson" ? kdlora::pearson(p, l) : kdlora::spearman(p, l);
    } else {
      throw kdlora::ConfigError("unknown metric '" + metric + "'");
    }
  }
  // paired metrics are also reported as their mean
  if (result.contains("accuracy") && result.contains("f1")) {
    result["accuracy_f1_mean"] =
        0.5 * (result["accuracy"].get<double>() + result["f1"].get<double>());
  }
  if (result.contains("pearson") && result.contains("spearman")) {
    result["pearson_spearman_mean"] =
        0.5 * (result["pearson"].get<double>() + result["spearman"].get<double>());
  }
  std::cout << result.dump(2) << '\n';
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw kdlora::IoError("cannot write " + out_path);
    out << result.dump(2) << '\n';
    kdlora::RunManifest manifest;
    manifest.command = "eval";
    manifest.resolved_config = {{"model", model_ckpt}, {"metrics", metrics_flag}};
    manifest.add_input(model_ckpt);
    manifest.add_input(data_path);
    manifest.output_paths.push_back(out_path);
    manifest.write(out_path + ".manifest.json");
  }
  return 0;
}

int cmd_report(const std::string& config_path, const std::string& student_config_path,
               const std::string& lora_flag, const std::string& methods_flag,
               std::size_t batch_size, std::size_t bytes_per_el,
               const std::string& out_prefix) {
  const kdlora::ModelConfig teacher_config = load_model_config(config_path);
  std::optional<kdlora::ModelConfig> student_config;
  if (!student_config_path.empty()) {
    student_config = load_model_config(student_config_path);
  }
  std::optional<kdlora::LoraConfig> lora_cfg;
  if (!lora_flag.empty()) lora_cfg = parse_lora_flag(lora_flag);

  std::vector<kdlora::CostReport> reports;
  for (const std::string& name : split_list(methods_flag, ',')) {
    const kdlora::Method method = kdlora::parse_method(name);
    const kdlora::ModelConfig& config =
        method == kdlora::Method::kKdLora && student_config ? *student_config
                                                            : teacher_config;
    reports.push_back(kdlora::make_cost_report(method, config, lora_cfg, bytes_per_el,
                                               batch_size));
  }
  const std::string table = kdlora::cost_table_text(reports);
  std::cout << table;
  if (!out_prefix.empty()) {
    json all = json::array();
    for (const kdlora::CostReport& r : reports) all.push_back(kdlora::cost_report_json(r));
    std::ofstream jout(out_prefix + ".cost.json");
    if (!jout) throw kdlora::IoError("cannot write " + out_prefix + ".cost.json");
    jout << all.dump(2) << '\n';
    std::ofstream tout(out_prefix + ".cost.txt");
    tout << table;
    kdlora::RunManifest manifest;
    manifest.command = "report";
    manifest.resolved_config = {{"methods", methods_flag},
                                {"batch_size", batch_size},
                                {"bytes_per_el", bytes_per_el}};
    manifest.add_input(config_path);
    if (!student_config_path.empty()) manifest.add_input(student_config_path);
    manifest.output_paths = {out_prefix + ".cost.json", out_prefix + ".cost.txt"};
    manifest.write(out_prefix + ".manifest.json");
  }
  return 0;
}

int cmd_bench(const std::string& model_ckpt, const std::string& data_path,
              std::size_t runs, std::size_t batch_size, const DataFlags& data_flags,
              const std::string& out_path) {
  const json metadata = kdlora::read_checkpoint_metadata(model_ckpt);
  const std::string dtype = metadata.at("dtype").get<std::string>();
  const auto vocab = vocab_from_metadata(metadata);
  if (!vocab) throw kdlora::ConfigError("checkpoint carries no vocabulary");

  DataFlags flags = data_flags;
  flags.train_path = data_path;
  flags.val_path.clear();
  flags.max_len = std::min(
      flags.max_len, metadata.at("model_config").get<kdlora::ModelConfig>().max_seq_len);
  const LoadedData data =
      load_data_with_vocab(flags, *vocab, labels_from_metadata(metadata));

  const kdlora::BenchResult result = with_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    const kdlora::EncoderModel<T> model = kdlora::load_model<T>(model_ckpt);
    return kdlora::bench_inference(model, data.train, runs, batch_size);
  });

  const json j = {{"mean_seconds", result.mean_seconds},
                  {"stddev_seconds", result.stddev_seconds},
                  {"per_example_seconds", result.per_example_seconds},
                  {"n_runs", result.n_runs},
                  {"n_warmup", result.n_warmup},
                  {"n_examples", result.n_examples}};
  std::cout << j.dump(2) << '\n';
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw kdlora::IoError("cannot write " + out_path);
    out << j.dump(2) << '\n';
    kdlora::RunManifest manifest;
    manifest.command = "bench";
    manifest.resolved_config = {{"model", model_ckpt},
                                {"runs", runs},
                                {"batch_size", batch_size}};
    manifest.add_input(model_ckpt);
    manifest.add_input(data_path);
    manifest.output_paths.push_back(out_path);
    manifest.write(out_path + ".manifest.json");
  }
  return 0;
}

int cmd_sweep(const std::string& grid_path, const std::string& out_dir,
              std::size_t jobs) {
  const json grid = load_json_file(grid_path);
  const std::string dtype = grid.value("dtype", "f32");
  with_dtype(dtype, [&](auto tag) {
    return kdlora::run_sweep<decltype(tag)>(grid, out_dir, jobs);
  });
  kdlora::RunManifest manifest;
  manifest.command = "sweep";
  manifest.resolved_config = grid;
  manifest.add_input(grid_path);
  manifest.output_paths = {out_dir + "/summary.json", out_dir + "/convergence.csv"};
  manifest.write((fs::path(out_dir) / "manifest.json").string());
  std::cout << "sweep complete: " << out_dir << "/summary.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"low-rank adapter fine-tuning and distillation toolkit"};
  app.require_subcommand(1);

  // train-teacher
  auto* teacher = app.add_subcommand("train-teacher", "full fine-tuning run");
  std::string teacher_config, teacher_out;
  DataFlags teacher_data;
  TrainFlags teacher_train;
  teacher->add_option("--config", teacher_config, "model config JSON")->required();
  add_data_flags(teacher, teacher_data);
  add_train_flags(teacher, teacher_train);
  teacher->add_option("--out", teacher_out, "output path prefix")->required();

  // train-lora
  auto* lora = app.add_subcommand("train-lora", "adapter-only baseline");
  std::string lora_config, lora_base, lora_spec = "rank=8,alpha=16,dropout=0.0";
  std::string lora_emit = "both", lora_out;
  DataFlags lora_data;
  TrainFlags lora_train;
  lora->add_option("--config", lora_config, "model config JSON (fresh init)");
  lora->add_option("--base", lora_base, "base model checkpoint to adapt");
  lora->add_option("--lora", lora_spec, "rank=INT,alpha=REAL,dropout=REAL[,targets=a;b]");
  add_data_flags(lora, lora_data);
  add_train_flags(lora, lora_train);
  lora->add_option("--emit", lora_emit, "adapters, merged or both");
  lora->add_option("--out", lora_out, "output path prefix")->required();

  // distill
  auto* distill = app.add_subcommand("distill", "distill a teacher into an adapted student");
  std::string distill_teacher, distill_student_config, distill_init = "even-layers";
  std::string distill_lora = "rank=8,alpha=16,dropout=0.0", distill_emit = "both";
  std::string distill_out;
  double distill_alpha = 0.5, distill_temperature = 2.0;
  DataFlags distill_data;
  TrainFlags distill_train;
  distill->add_option("--teacher", distill_teacher, "teacher checkpoint")->required();
  distill->add_option("--student-config", distill_student_config, "student config JSON")
      ->required();
  distill->add_option("--init", distill_init, "random or even-layers");
  distill->add_option("--lora", distill_lora,
                      "rank=INT,alpha=REAL,dropout=REAL[,targets=a;b]");
  distill->add_option("--alpha", distill_alpha, "task-loss weight in [0,1]");
  distill->add_option("--temperature", distill_temperature, "softening temperature");
  add_data_flags(distill, distill_data);
  add_train_flags(distill, distill_train);
  distill->add_option("--emit", distill_emit, "adapters, merged or both");
  distill->add_option("--out", distill_out, "output path prefix")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a TSV");
  std::string eval_model, eval_data, eval_metrics = "accuracy", eval_out;
  DataFlags eval_flags;
  eval->add_option("--model", eval_model, "model checkpoint")->required();
  eval->add_option("--data", eval_data, "TSV to evaluate")->required();
  eval->add_option("--metrics", eval_metrics,
                   "comma list of accuracy,f1,mcc,pearson,spearman");
  eval->add_option("--text-cols", eval_flags.text_cols, "text column name(s)");
  eval->add_option("--label-col", eval_flags.label_col, "label column name");
  eval->add_option("--max-len", eval_flags.max_len, "padded sequence length");
  eval->add_option("--out", eval_out, "write metrics JSON here");

  // report
  auto* report = app.add_subcommand("report", "cost table (params/memory estimates)");
  std::string report_config, report_student_config, report_lora, report_out;
  std::string report_methods = "fft,lora,kd-lora";
  std::size_t report_batch = 32, report_bpe = 4;
  report->add_option("--config", report_config, "teacher/base model config JSON")
      ->required();
  report->add_option("--student-config", report_student_config,
                     "student config JSON (kd-lora rows)");
  report->add_option("--lora", report_lora, "adapter spec for lora/kd-lora rows");
  report->add_option("--methods", report_methods, "comma list of fft,lora,kd-lora");
  report->add_option("--batch-size", report_batch, "batch size for the memory model");
  report->add_option("--bytes-per-el", report_bpe, "element width in bytes");
  report->add_option("--out", report_out, "output path prefix");

  // bench
  auto* bench = app.add_subcommand("bench", "inference wall-clock benchmark");
  std::string bench_model, bench_data, bench_out;
  std::size_t bench_runs = 100, bench_batch = 32;
  DataFlags bench_flags;
  bench->add_option("--model", bench_model, "model checkpoint")->required();
  bench->add_option("--data", bench_data, "TSV to run")->required();
  bench->add_option("--runs", bench_runs, "timed runs (3 warm-ups excluded)");
  bench->add_option("--batch-size", bench_batch, "batch size");
  bench->add_option("--text-cols", bench_flags.text_cols, "text column name(s)");
  bench->add_option("--label-col", bench_flags.label_col, "label column name");
  bench->add_option("--max-len", bench_flags.max_len, "padded sequence length");
  bench->add_option("--out", bench_out, "write timing JSON here");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "grid of runs + median-of-top-k summary");
  std::string sweep_grid, sweep_out;
  std::size_t sweep_jobs = 1;
  sweep->add_option("--grid", sweep_grid, "grid JSON")->required();
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--jobs", sweep_jobs, "parallel workers");

  CLI11_PARSE(app, argc, argv);

  try {
    if (teacher->parsed()) {
      return cmd_train_teacher(teacher_config, teacher_data, teacher_train, teacher_out);
    }
    if (lora->parsed()) {
      return cmd_train_lora(lora_config, lora_base, lora_spec, lora_data, lora_train,
                            lora_emit, lora_out);
    }
    if (distill->parsed()) {
      return cmd_distill(distill_teacher, distill_student_config, distill_init,
                         distill_lora, distill_alpha, distill_temperature, distill_data,
                         distill_train, distill_emit, distill_out);
    }
    if (eval->parsed()) {
      return cmd_eval(eval_model, eval_data, eval_metrics, eval_flags, eval_out);
    }
    if (report->parsed()) {
      return cmd_report(report_config, report_student_config, report_lora,
                        report_methods, report_batch, report_bpe, report_out);
    }
    if (bench->parsed()) {
      return cmd_bench(bench_model, bench_data, bench_runs, bench_batch, bench_flags,
                       bench_out);
    }
    if (sweep->parsed()) {
      return cmd_sweep(sweep_grid, sweep_out, sweep_jobs);
    }
  } catch (const kdlora::Error& e) {
    std::cerr << nlohmann::json{{"error", e.code()}, {"message", e.what()}}.dump()
              << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal_error"}, {"message", e.what()}}.dump()
              << '\n';
    return 1;
  }
  return 1;
}
