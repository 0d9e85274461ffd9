#pragma once

#include <string>
#include <vector>

#include "kdlora/common.hpp"
#include "kdlora/model.hpp"
#include "kdlora/rng.hpp"
#include "kdlora/tensor.hpp"

namespace kdlora {

namespace detail {

// Pattern semantics: substring match against the names of the model's 2-D
// weight matrices (biases and layernorm parameters are never candidates).
inline bool pattern_matches(const std::string& pattern, const std::string& name) {
  return name.find(pattern) != std::string::npos;
}

inline std::vector<WeightShape> matched_weights(const ModelConfig& config,
                                                const LoraConfig& lora) {
  std::vector<WeightShape> matched;
  for (const WeightShape& w : named_weight_shapes(config)) {
    for (const std::string& pattern : lora.target_modules) {
      if (pattern_matches(pattern, w.name)) {
        matched.push_back(w);
        break;
      }
    }
  }
  return matched;
}

}  // namespace detail

/// Attaches a rank-r adapter to every weight matrix matched by the config's
/// target patterns (A gaussian, B zero), freezes every base parameter except
/// the classifier head, and leaves the adapters plus head trainable. The
/// adapted forward is identical to the base forward until B moves away from
/// zero.
template <typename T>
void inject_lora(EncoderModel<T>& model, const LoraConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.target_modules.empty()) {
    throw ConfigError("inject_lora: target_modules must not be empty");
  }
  const std::vector<detail::WeightShape> matched =
      detail::matched_weights(model.config(), cfg);
  for (const std::string& pattern : cfg.target_modules) {
    bool hit = false;
    for (const detail::WeightShape& w : matched) {
      if (detail::pattern_matches(pattern, w.name)) {
        hit = true;
        break;
      }
    }
    if (!hit) {
      throw ConfigError("inject_lora: target pattern '" + pattern +
                        "' matches no weight matrix");
    }
  }
  for (const detail::WeightShape& w : matched) {
    if (model.adapters().count(w.name)) {
      throw StateError("inject_lora: '" + w.name + "' already has an adapter");
    }
  }

  Rng rng(seed);
  for (const detail::WeightShape& w : matched) {
    LoraAdapter<T> adapter;
    adapter.base_name = w.name;
    adapter.a = detail::gaussian_tensor<T>({w.d_in, cfg.rank}, kInitStd, rng);
    adapter.b = Tensor<T>({cfg.rank, w.d_out}, T(0));
    adapter.a.set_requires_grad(true);
    adapter.b.set_requires_grad(true);
    adapter.scaling = cfg.scaling();
    adapter.dropout_p = cfg.lora_dropout;
    model.adapters().emplace(w.name, std::move(adapter));
  }

  // freeze the base; only the task head stays trainable
  for (auto& [name, tensor] : model.parameters()) {
    tensor.set_requires_grad(model.is_head_param(name));
  }
}

/// Folds scaling*A*B into each adapted base weight and removes the adapters,
/// returning the model to plain (fully trainable) form. Inference afterwards
/// carries no extra matmuls.
template <typename T>
void merge_lora(EncoderModel<T>& model) {
  if (!model.adapted()) {
    throw StateError("merge_lora: model has no adapters attached");
  }
  for (auto& [name, adapter] : model.adapters()) {
    Tensor<T>& base = model.param(name);
    const std::size_t d_in = adapter.a.dim(0);
    const std::size_t r = adapter.a.dim(1);
    const std::size_t d_out = adapter.b.dim(1);
    std::vector<T> delta(d_in * d_out);
    detail::gemm_nn(adapter.a.data(), adapter.b.data(), delta.data(), d_in, r, d_out);
    const T s = static_cast<T>(adapter.scaling);
    for (std::size_t i = 0; i < delta.size(); ++i) base[i] += s * delta[i];
  }
  model.adapters().clear();
  model.set_all_trainable(true);
}

struct TrainableSummary {
  std::vector<std::pair<std::string, std::size_t>> named;  // name -> scalar count
  std::size_t total = 0;
};

/// Enumerates exactly the tensors with requires_grad set (base parameters and
/// adapter factors), in name order.
template <typename T>
TrainableSummary lora_trainable_params(const EncoderModel<T>& model) {
  TrainableSummary summary;
  for (const auto& [name, tensor] : model.parameters()) {
    if (tensor.requires_grad()) summary.named.emplace_back(name, tensor.size());
  }
  for (const auto& [name, adapter] : model.adapters()) {
    if (adapter.a.requires_grad()) {
      summary.named.emplace_back("adapter." + name + ".A", adapter.a.size());
    }
    if (adapter.b.requires_grad()) {
      summary.named.emplace_back("adapter." + name + ".B", adapter.b.size());
    }
  }
  for (const auto& [name, count] : summary.named) summary.total += count;
  return summary;
}

/// Gathers the trainable tensors themselves (optimizer input), in name order.
template <typename T>
std::vector<Tensor<T>> collect_trainable_tensors(EncoderModel<T>& model) {
  std::vector<Tensor<T>> out;
  for (auto& [name, tensor] : model.parameters()) {
    if (tensor.requires_grad()) out.push_back(tensor);
  }
  for (auto& [name, adapter] : model.adapters()) {
    if (adapter.a.requires_grad()) out.push_back(adapter.a);
    if (adapter.b.requires_grad()) out.push_back(adapter.b);
  }
  return out;
}

}  // namespace kdlora
