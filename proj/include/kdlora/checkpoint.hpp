#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlora/common.hpp"
#include "kdlora/data.hpp"
#include "kdlora/lora.hpp"
#include "kdlora/model.hpp"
#include "kdlora/tensor.hpp"

namespace kdlora {

// KDLR container, version 1, little-endian throughout:
//   "KDLR" | u32 version | u64 json_len | json bytes (UTF-8 metadata)
//   | u64 tensor_count | per tensor:
//       u64 name_len | name bytes | u8 dtype (0 = f32, 1 = f64) | u8 rank
//       | rank x u64 dims | raw element data
// Round-trips are bit-exact.

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'K', 'D', 'L', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
inline constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) {
    return 0;
  } else {
    static_assert(std::is_same_v<T, double>, "checkpoint supports f32 and f64 only");
    return 1;
  }
}

inline std::string dtype_name(std::uint8_t code) {
  if (code == 0) return "f32";
  if (code == 1) return "f64";
  throw IoError("checkpoint: unknown dtype code " + std::to_string(code));
}

namespace detail {

template <typename V>
void write_le(std::ofstream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V read_le(std::ifstream& in) {
  V value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!in) throw IoError("checkpoint: truncated file");
  return value;
}

inline void write_bytes(std::ofstream& out, const void* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_tensor_entry(std::ofstream& out, const std::string& name,
                        const Tensor<T>& tensor) {
  write_le<std::uint64_t>(out, name.size());
  write_bytes(out, name.data(), name.size());
  write_le<std::uint8_t>(out, dtype_code<T>());
  write_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) write_le<std::uint64_t>(out, d);
  write_bytes(out, tensor.data(), tensor.size() * sizeof(T));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor_entry(std::ifstream& in,
                                                    const std::string& path) {
  const auto name_len = read_le<std::uint64_t>(in);
  std::string name(name_len, '\0');
  in.read(name.data(), static_cast<std::streamsize>(name_len));
  const auto dtype = read_le<std::uint8_t>(in);
  if (dtype != dtype_code<T>()) {
    throw IoError("checkpoint: tensor '" + name + "' in " + path + " is " +
                  dtype_name(dtype) + ", requested " + dtype_name(dtype_code<T>()));
  }
  const auto rank = read_le<std::uint8_t>(in);
  std::vector<std::size_t> shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(read_le<std::uint64_t>(in));
  }
  Tensor<T> tensor(shape);
  in.read(reinterpret_cast<char*>(tensor.data()),
          static_cast<std::streamsize>(tensor.size() * sizeof(T)));
  if (!in) throw IoError("checkpoint: truncated tensor data in " + path);
  return {std::move(name), std::move(tensor)};
}

inline void write_container(const std::string& path, const nlohmann::json& metadata,
                            const std::function<void(std::ofstream&)>& write_tensors,
                            std::uint64_t tensor_count) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 4);
  write_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string json = metadata.dump();
  write_le<std::uint64_t>(out, json.size());
  write_bytes(out, json.data(), json.size());
  write_le<std::uint64_t>(out, tensor_count);
  write_tensors(out);
  if (!out) throw IoError("checkpoint: failed writing " + path);
}

struct ContainerHeader {
  nlohmann::json metadata;
  std::uint64_t tensor_count = 0;
};

inline ContainerHeader read_header(std::ifstream& in, const std::string& path) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint: " + path + " is not a KDLR container");
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported container version " +
                  std::to_string(version) + " in " + path);
  }
  const auto json_len = read_le<std::uint64_t>(in);
  std::string json(json_len, '\0');
  in.read(json.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw IoError("checkpoint: truncated metadata in " + path);
  ContainerHeader header;
  header.metadata = nlohmann::json::parse(json);
  header.tensor_count = read_le<std::uint64_t>(in);
  return header;
}

}  // namespace detail

/// Peeks at a container's metadata without loading tensors (the CLI uses this
/// to pick the element type before dispatching).
inline nlohmann::json read_checkpoint_metadata(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  return detail::read_header(in, path).metadata;
}

/// Saves a model (and any attached adapters) with its config; optional vocab
/// and label names travel in the metadata so checkpoints are self-contained.
template <typename T>
void save_model(const EncoderModel<T>& model, const std::string& path,
                const std::optional<Vocab>& vocab = {},
                const std::vector<std::string>& label_names = {}) {
  nlohmann::json metadata;
  metadata["kind"] = "model";
  metadata["dtype"] = dtype_name(dtype_code<T>());
  metadata["model_config"] = model.config();
  if (vocab) metadata["vocab"] = vocab->to_json();
  if (!label_names.empty()) metadata["labels"] = label_names;
  if (model.adapted()) {
    nlohmann::json adapters = nlohmann::json::array();
    for (const auto& [name, ad] : model.adapters()) {
      adapters.push_back({{"base_name", ad.base_name},
                          {"scaling", ad.scaling},
                          {"dropout_p", ad.dropout_p},
                          {"enabled", ad.enabled}});
    }
    metadata["adapters"] = adapters;
  }

  const std::uint64_t count = model.parameters().size() + 2 * model.adapters().size();
  detail::write_container(path, metadata, [&](std::ofstream& out) {
    for (const auto& [name, tensor] : model.parameters()) {
      detail::write_tensor_entry(out, name, tensor);
    }
    for (const auto& [name, ad] : model.adapters()) {
      detail::write_tensor_entry(out, "adapter." + name + ".A", ad.a);
      detail::write_tensor_entry(out, "adapter." + name + ".B", ad.b);
    }
  }, count);
}

template <typename T>
EncoderModel<T> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  const detail::ContainerHeader header = detail::read_header(in, path);
  if (header.metadata.value("kind", "model") != "model") {
    throw IoError("checkpoint: " + path + " holds '" +
                  header.metadata.value("kind", "?") + "', expected a model");
  }
  ModelConfig config = header.metadata.at("model_config").get<ModelConfig>();
  EncoderModel<T> model(config);

  std::map<std::string, Tensor<T>> adapter_tensors;
  for (std::uint64_t i = 0; i < header.tensor_count; ++i) {
    auto [name, tensor] = detail::read_tensor_entry<T>(in, path);
    if (name.rfind("adapter.", 0) == 0) {
      adapter_tensors.emplace(std::move(name), std::move(tensor));
    } else {
      model.add_param(name, std::move(tensor));
    }
  }

  // shape contract: every config-derived parameter must be present and sized
  const EncoderModel<T> reference = init_model<T>(config, 0);
  for (const auto& [name, ref] : reference.parameters()) {
    const Tensor<T>& loaded = model.param(name);
    if (loaded.shape() != ref.shape()) {
      throw IoError("checkpoint: parameter '" + name + "' has shape " +
                    shape_str(loaded.shape()) + ", config implies " +
                    shape_str(ref.shape()));
    }
  }
  if (model.parameters().size() != reference.parameters().size()) {
    throw IoError("checkpoint: unexpected parameter set in " + path);
  }
  model.set_all_trainable(true);

  if (header.metadata.contains("adapters")) {
    for (const nlohmann::json& meta : header.metadata.at("adapters")) {
      LoraAdapter<T> adapter;
      adapter.base_name = meta.at("base_name").get<std::string>();
      adapter.scaling = meta.at("scaling").get<double>();
      adapter.dropout_p = meta.at("dropout_p").get<double>();
      adapter.enabled = meta.at("enabled").get<bool>();
      adapter.a = adapter_tensors.at("adapter." + adapter.base_name + ".A");
      adapter.b = adapter_tensors.at("adapter." + adapter.base_name + ".B");
      adapter.a.set_requires_grad(true);
      adapter.b.set_requires_grad(true);
      model.adapters().emplace(adapter.base_name, std::move(adapter));
    }
    // restore adapter freeze semantics
    for (auto& [name, tensor] : model.parameters()) {
      tensor.set_requires_grad(model.is_head_param(name));
    }
  }
  return model;
}

/// Adapter-only container: the low-rank factors plus the adapter config,
/// loadable onto any base model with matching weight shapes.
template <typename T>
void save_adapters(const EncoderModel<T>& model, const LoraConfig& cfg,
                   const std::string& path) {
  if (!model.adapted()) throw StateError("save_adapters: model has no adapters");
  nlohmann::json metadata;
  metadata["kind"] = "adapters";
  metadata["dtype"] = dtype_name(dtype_code<T>());
  metadata["lora_config"] = cfg;
  nlohmann::json adapters = nlohmann::json::array();
  for (const auto& [name, ad] : model.adapters()) {
    adapters.push_back({{"base_name", ad.base_name},
                        {"scaling", ad.scaling},
                        {"dropout_p", ad.dropout_p},
                        {"enabled", ad.enabled}});
  }
  metadata["adapters"] = adapters;
  detail::write_container(path, metadata, [&](std::ofstream& out) {
    for (const auto& [name, ad] : model.adapters()) {
      detail::write_tensor_entry(out, "adapter." + name + ".A", ad.a);
      detail::write_tensor_entry(out, "adapter." + name + ".B", ad.b);
    }
  }, 2 * model.adapters().size());
}

/// Attaches saved adapters to a compatible base model (shape-checked).
template <typename T>
LoraConfig load_adapters(EncoderModel<T>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  const detail::ContainerHeader header = detail::read_header(in, path);
  if (header.metadata.value("kind", "") != "adapters") {
    throw IoError("checkpoint: " + path + " does not hold adapters");
  }
  const LoraConfig cfg = header.metadata.at("lora_config").get<LoraConfig>();

  std::map<std::string, Tensor<T>> tensors;
  for (std::uint64_t i = 0; i < header.tensor_count; ++i) {
    auto [name, tensor] = detail::read_tensor_entry<T>(in, path);
    tensors.emplace(std::move(name), std::move(tensor));
  }
  for (const nlohmann::json& meta : header.metadata.at("adapters")) {
    LoraAdapter<T> adapter;
    adapter.base_name = meta.at("base_name").get<std::string>();
    adapter.scaling = meta.at("scaling").get<double>();
    adapter.dropout_p = meta.at("dropout_p").get<double>();
    adapter.enabled = meta.at("enabled").get<bool>();
    adapter.a = tensors.at("adapter." + adapter.base_name + ".A");
    adapter.b = tensors.at("adapter." + adapter.base_name + ".B");

    const Tensor<T>& base = model.param(adapter.base_name);  // throws if unknown
    if (base.rank() != 2 || adapter.a.dim(0) != base.dim(0) ||
        adapter.b.dim(1) != base.dim(1) || adapter.a.dim(1) != adapter.b.dim(0)) {
      throw ConfigError("load_adapters: adapter for '" + adapter.base_name +
                        "' (A " + shape_str(adapter.a.shape()) + ", B " +
                        shape_str(adapter.b.shape()) + ") does not fit weight " +
                        shape_str(base.shape()));
    }
    if (model.adapters().count(adapter.base_name)) {
      throw StateError("load_adapters: '" + adapter.base_name +
                       "' already has an adapter");
    }
    adapter.a.set_requires_grad(true);
    adapter.b.set_requires_grad(true);
    model.adapters().emplace(adapter.base_name, std::move(adapter));
  }
  for (auto& [name, tensor] : model.parameters()) {
    tensor.set_requires_grad(model.is_head_param(name));
  }
  return cfg;
}

}  // namespace kdlora
