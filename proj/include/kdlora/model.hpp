#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlora/common.hpp"
#include "kdlora/data.hpp"
#include "kdlora/rng.hpp"
#include "kdlora/tensor.hpp"

namespace kdlora {

/// Additive attention bias for masked key positions. Large enough that the
/// masked weights underflow to exactly zero after softmax, small enough to
/// stay finite in f32.
inline constexpr double kMaskBias = -1e9;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_ff = 0;
  std::size_t max_seq_len = 0;
  std::size_t n_classes = 2;
  double dropout_p = 0.1;
  std::int32_t padding_token_id = kPadId;

  void validate() const {
    if (vocab_size < 1 || d_model < 2 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq_len < 1) {
      throw ConfigError("model config: all dimensions must be positive (d_model >= 2)");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) +
                        ")");
    }
    if (n_classes < 2) throw ConfigError("model config: n_classes must be >= 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
      throw ConfigError("model config: dropout_p must lie in [0, 1)");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
                     {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
                     {"n_classes", c.n_classes},     {"dropout_p", c.dropout_p},
                     {"padding_token_id", c.padding_token_id}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
  c.n_classes = j.value("n_classes", std::size_t{2});
  c.dropout_p = j.value("dropout_p", 0.1);
  c.padding_token_id = j.value("padding_token_id", kPadId);
}

// ---------------------------------------------------------------------------
// Low-rank adapter types. Injection/merge live in lora.hpp.

struct LoraConfig {
  std::size_t rank = 8;
  double lora_alpha = 16.0;
  double lora_dropout = 0.0;
  std::set<std::string> target_modules = {"wq", "wv"};

  double scaling() const { return lora_alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank < 1) throw ConfigError("lora config: rank must be >= 1");
    if (!(lora_alpha > 0.0) || !std::isfinite(scaling())) {
      throw ConfigError("lora config: lora_alpha must be positive and finite");
    }
    if (lora_dropout < 0.0 || lora_dropout >= 1.0) {
      throw ConfigError("lora config: lora_dropout must lie in [0, 1)");
    }
    // an empty target set is valid for counting (head-only); injection
    // additionally requires at least one matching pattern
  }
};

inline void to_json(nlohmann::json& j, const LoraConfig& c) {
  j = nlohmann::json{{"rank", c.rank},
                     {"lora_alpha", c.lora_alpha},
                     {"lora_dropout", c.lora_dropout},
                     {"target_modules", c.target_modules}};
}

inline void from_json(const nlohmann::json& j, LoraConfig& c) {
  j.at("rank").get_to(c.rank);
  c.lora_alpha = j.value("lora_alpha", 16.0);
  c.lora_dropout = j.value("lora_dropout", 0.0);
  if (j.contains("target_modules")) {
    c.target_modules = j.at("target_modules").get<std::set<std::string>>();
  }
}

/// Low-rank pair attached to one base weight matrix W [d_in, d_out]:
/// the adapted product is x*W + scaling * dropout(x)*A*B. A and B are the only
/// trainable tensors an adapter introduces; the base weight stays frozen while
/// the adapter is attached.
template <typename T>
struct LoraAdapter {
  std::string base_name;
  Tensor<T> a;  // [d_in, rank]
  Tensor<T> b;  // [rank, d_out]
  double scaling = 1.0;
  double dropout_p = 0.0;
  bool enabled = true;
};

// ---------------------------------------------------------------------------

enum class Mode { kTrain, kEval };

/// Encoder-only transformer classifier (post-layernorm, learned absolute
/// positions, CLS pooling with a single linear head). Both teacher and student
/// are instances of this, at different configs.
template <typename T>
class EncoderModel {
 public:
  EncoderModel() = default;
  explicit EncoderModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }

  const std::map<std::string, Tensor<T>>& parameters() const { return params_; }
  std::map<std::string, Tensor<T>>& parameters() { return params_; }

  std::map<std::string, LoraAdapter<T>>& adapters() { return adapters_; }
  const std::map<std::string, LoraAdapter<T>>& adapters() const { return adapters_; }
  bool adapted() const { return !adapters_.empty(); }

  Tensor<T>& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }

  void add_param(const std::string& name, Tensor<T> tensor) {
    if (!params_.emplace(name, std::move(tensor)).second) {
      throw StateError("duplicate parameter name '" + name + "'");
    }
  }

  /// Total scalar count across named parameters (adapters excluded).
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void set_all_trainable(bool trainable) {
    for (auto& [name, t] : params_) t.set_requires_grad(trainable);
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.drop_grad();
    for (auto& [name, ad] : adapters_) {
      ad.a.drop_grad();
      ad.b.drop_grad();
    }
  }

  bool is_head_param(const std::string& name) const {
    return name.rfind("head.", 0) == 0;
  }

  /// Runs the encoder over a token batch and returns logits [B, n_classes].
  /// Masked (padding) key positions receive a -1e9 bias before softmax, so
  /// they contribute exactly nothing to attention. Classification reads the
  /// position-0 hidden state. `rng` is only consumed in training mode.
  Tensor<T> forward(std::span<const std::int32_t> token_ids,
                    std::span<const std::uint8_t> attn_mask, std::size_t batch,
                    std::size_t seq_len, Mode mode = Mode::kEval,
                    Rng* rng = nullptr) const {
    if (token_ids.size() != batch * seq_len || attn_mask.size() != batch * seq_len) {
      throw ShapeError("forward: ids/mask must both be batch*seq_len = " +
                       std::to_string(batch * seq_len) + " long");
    }
    if (seq_len > config_.max_seq_len) {
      throw DataError("forward: sequence length " + std::to_string(seq_len) +
                      " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    const bool training = mode == Mode::kTrain;
    if (training && rng == nullptr) {
      bool needs_rng = config_.dropout_p > 0.0;
      for (const auto& [name, adapter] : adapters_) {
        needs_rng |= adapter.enabled && adapter.dropout_p > 0.0;
      }
      if (needs_rng) {
        throw StateError("forward: training mode with dropout requires an rng");
      }
    }

    const std::size_t d = config_.d_model;
    const std::size_t heads = config_.n_heads;
    const std::size_t dh = d / heads;

    // embeddings
    Tensor<T> x = lookup("embed.token", token_ids, batch, seq_len, training, rng);
    std::vector<std::int32_t> positions(batch * seq_len);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < seq_len; ++j) {
        positions[i * seq_len + j] = static_cast<std::int32_t>(j);
      }
    }
    x = add(x, lookup("embed.position", positions, batch, seq_len, training, rng));
    x = apply_dropout(x, training, rng);

    const Tensor<T> attn_bias = make_attention_bias(attn_mask, batch, seq_len, heads);
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    for (std::size_t layer = 0; layer < config_.n_layers; ++layer) {
      const std::string prefix = "layer." + std::to_string(layer) + ".";
      Tensor<T> x2d = reshape(x, {batch * seq_len, d});

      Tensor<T> q = linear(x2d, prefix + "attn.wq", training, rng);
      Tensor<T> k = linear(x2d, prefix + "attn.wk", training, rng);
      Tensor<T> v = linear(x2d, prefix + "attn.wv", training, rng);

      q = split_heads(q, batch, seq_len, heads, dh);
      k = split_heads(k, batch, seq_len, heads, dh);
      v = split_heads(v, batch, seq_len, heads, dh);

      Tensor<T> scores = scale(batched_matmul(q, transpose_last2(k)), inv_sqrt_dh);
      scores = add(scores, attn_bias);
      Tensor<T> probs = softmax(scores, -1);
      Tensor<T> ctx = merge_heads(batched_matmul(probs, v), batch, seq_len, heads, dh);

      Tensor<T> attn_out = linear(ctx, prefix + "attn.wo", training, rng);
      attn_out = apply_dropout(attn_out, training, rng);
      x = add(x, reshape(attn_out, {batch, seq_len, d}));
      x = layernorm(x, param(prefix + "ln1.gain"), param(prefix + "ln1.bias"),
                    static_cast<T>(kLayerNormEps));

      x2d = reshape(x, {batch * seq_len, d});
      Tensor<T> hidden = gelu(linear(x2d, prefix + "ffn.w1", training, rng));
      Tensor<T> ffn_out = linear(hidden, prefix + "ffn.w2", training, rng);
      ffn_out = apply_dropout(ffn_out, training, rng);
      x = add(x, reshape(ffn_out, {batch, seq_len, d}));
      x = layernorm(x, param(prefix + "ln2.gain"), param(prefix + "ln2.bias"),
                    static_cast<T>(kLayerNormEps));
    }

    Tensor<T> cls = select_position(x, 0);
    return linear(cls, "head", training, rng);
  }

  Tensor<T> forward(const Batch& batch, Mode mode = Mode::kEval,
                    Rng* rng = nullptr) const {
    return forward(batch.token_ids, batch.attn_mask, batch.batch_size, batch.seq_len,
                   mode, rng);
  }

  static constexpr double kLayerNormEps = 1e-5;

 private:
  /// x * W (+ adapter path) + bias, for parameter pair <name>.weight/.bias.
  Tensor<T> linear(const Tensor<T>& x, const std::string& name, bool training,
                   Rng* rng) const {
    Tensor<T> y = matmul(x, param(name + ".weight"));
    auto it = adapters_.find(name + ".weight");
    if (it != adapters_.end() && it->second.enabled) {
      const LoraAdapter<T>& ad = it->second;
      Tensor<T> path = x;
      if (training && ad.dropout_p > 0.0) {
        path = dropout(path, ad.dropout_p, true, *rng);
      }
      Tensor<T> delta = matmul(matmul(path, ad.a), ad.b);
      y = add(y, scale(delta, static_cast<T>(ad.scaling)));
    }
    return add_bias(y, param(name + ".bias"));
  }

  /// Embedding-table gather; a targeted table gets the adapter path
  /// gather(A)*B with elementwise dropout on the gathered adapter rows.
  Tensor<T> lookup(const std::string& name, std::span<const std::int32_t> ids,
                   std::size_t rows, std::size_t cols, bool training, Rng* rng) const {
    Tensor<T> y = embedding(param(name), ids, rows, cols);
    auto it = adapters_.find(name);
    if (it != adapters_.end() && it->second.enabled) {
      const LoraAdapter<T>& ad = it->second;
      Tensor<T> a_rows = embedding(ad.a, ids, rows, cols);
      if (training && ad.dropout_p > 0.0) {
        a_rows = dropout(a_rows, ad.dropout_p, true, *rng);
      }
      const std::size_t r = ad.a.dim(1);
      Tensor<T> delta = matmul(reshape(a_rows, {rows * cols, r}), ad.b);
      delta = reshape(delta, {rows, cols, ad.b.dim(1)});
      y = add(y, scale(delta, static_cast<T>(ad.scaling)));
    }
    return y;
  }

  Tensor<T> apply_dropout(const Tensor<T>& x, bool training, Rng* rng) const {
    if (!training || config_.dropout_p == 0.0) return x;
    return dropout(x, config_.dropout_p, true, *rng);
  }

  static Tensor<T> split_heads(const Tensor<T>& x2d, std::size_t batch,
                               std::size_t seq_len, std::size_t heads, std::size_t dh) {
    Tensor<T> x4 = reshape(x2d, {batch, seq_len, heads, dh});
    x4 = permute(x4, {0, 2, 1, 3});  // [B, H, L, dh]
    return reshape(x4, {batch * heads, seq_len, dh});
  }

  static Tensor<T> merge_heads(const Tensor<T>& x3, std::size_t batch,
                               std::size_t seq_len, std::size_t heads, std::size_t dh) {
    Tensor<T> x4 = reshape(x3, {batch, heads, seq_len, dh});
    x4 = permute(x4, {0, 2, 1, 3});  // [B, L, H, dh]
    return reshape(x4, {batch * seq_len, heads * dh});
  }

  Tensor<T> make_attention_bias(std::span<const std::uint8_t> mask, std::size_t batch,
                                std::size_t seq_len, std::size_t heads) const {
    Tensor<T> bias({batch * heads, seq_len, seq_len});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        T* block = bias.data() + (b * heads + h) * seq_len * seq_len;
        for (std::size_t i = 0; i < seq_len; ++i) {
          for (std::size_t j = 0; j < seq_len; ++j) {
            block[i * seq_len + j] =
                mask[b * seq_len + j] ? T(0) : static_cast<T>(kMaskBias);
          }
        }
      }
    }
    return bias;
  }

  ModelConfig config_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, LoraAdapter<T>> adapters_;
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

struct WeightShape {
  std::string name;
  std::size_t d_in;
  std::size_t d_out;
};

/// The 2-D matrices eligible for adaptation, in canonical creation order.
inline std::vector<WeightShape> named_weight_shapes(const ModelConfig& c) {
  std::vector<WeightShape> shapes;
  shapes.push_back({"embed.token", c.vocab_size, c.d_model});
  shapes.push_back({"embed.position", c.max_seq_len, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string prefix = "layer." + std::to_string(l) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      shapes.push_back({prefix + w + std::string(".weight"), c.d_model, c.d_model});
    }
    shapes.push_back({prefix + "ffn.w1.weight", c.d_model, c.d_ff});
    shapes.push_back({prefix + "ffn.w2.weight", c.d_ff, c.d_model});
  }
  shapes.push_back({"head.weight", c.d_model, c.n_classes});
  return shapes;
}

template <typename T>
Tensor<T> gaussian_tensor(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(rng.gaussian(0.0, stddev));
  }
  return t;
}

}  // namespace detail

inline constexpr double kInitStd = 0.02;

/// Fresh model with Gaussian(0, 0.02) embeddings and linear weights, zero
/// biases, unit layernorm gains. Deterministic per (config, seed); everything
/// starts trainable.
template <typename T>
EncoderModel<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  EncoderModel<T> model(config);
  Rng rng(seed);
  const std::size_t d = config.d_model;

  auto add_gaussian = [&](const std::string& name, std::vector<std::size_t> shape) {
    model.add_param(name, detail::gaussian_tensor<T>(std::move(shape), kInitStd, rng));
  };
  auto add_const = [&](const std::string& name, std::vector<std::size_t> shape, T v) {
    model.add_param(name, Tensor<T>(std::move(shape), v));
  };

  add_gaussian("embed.token", {config.vocab_size, d});
  add_gaussian("embed.position", {config.max_seq_len, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string prefix = "layer." + std::to_string(l) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      add_gaussian(prefix + w + std::string(".weight"), {d, d});
      add_const(prefix + w + std::string(".bias"), {d}, T(0));
    }
    add_gaussian(prefix + "ffn.w1.weight", {d, config.d_ff});
    add_const(prefix + "ffn.w1.bias", {config.d_ff}, T(0));
    add_gaussian(prefix + "ffn.w2.weight", {config.d_ff, d});
    add_const(prefix + "ffn.w2.bias", {d}, T(0));
    add_const(prefix + "ln1.gain", {d}, T(1));
    add_const(prefix + "ln1.bias", {d}, T(0));
    add_const(prefix + "ln2.gain", {d}, T(1));
    add_const(prefix + "ln2.bias", {d}, T(0));
  }
  add_gaussian("head.weight", {d, config.n_classes});
  add_const("head.bias", {config.n_classes}, T(0));

  model.set_all_trainable(true);
  return model;
}

enum class StudentInit { kRandom, kEvenLayers };

inline StudentInit parse_student_init(const std::string& s) {
  if (s == "random") return StudentInit::kRandom;
  if (s == "even-layers") return StudentInit::kEvenLayers;
  throw ConfigError("unknown student init '" + s + "' (expected random or even-layers)");
}

/// Builds a student. "random" is a fresh init_model; "even-layers" copies
/// teacher layer 2i into student layer i, plus embeddings and head, and
/// requires matching dimensions (n_layers strictly smaller).
template <typename T>
EncoderModel<T> init_student_from_teacher(const EncoderModel<T>& teacher,
                                          const ModelConfig& student_config,
                                          StudentInit strategy, std::uint64_t seed) {
  student_config.validate();
  const ModelConfig& tc = teacher.config();
  if (student_config.n_layers >= tc.n_layers) {
    throw ConfigError("student must have fewer layers than the teacher (" +
                      std::to_string(student_config.n_layers) + " vs " +
                      std::to_string(tc.n_layers) + ")");
  }
  if (strategy == StudentInit::kRandom) {
    return init_model<T>(student_config, seed);
  }

  if (student_config.d_model != tc.d_model || student_config.n_heads != tc.n_heads ||
      student_config.d_ff != tc.d_ff || student_config.vocab_size != tc.vocab_size ||
      student_config.n_classes != tc.n_classes) {
    throw ConfigError(
        "even-layers init requires matching d_model/n_heads/d_ff/vocab/classes");
  }
  if (student_config.max_seq_len > tc.max_seq_len) {
    throw ConfigError("even-layers init: student max_seq_len exceeds teacher's");
  }
  if (2 * (student_config.n_layers - 1) >= tc.n_layers) {
    throw ConfigError("even-layers init: teacher has too few layers to donate layer " +
                      std::to_string(2 * (student_config.n_layers - 1)));
  }

  EncoderModel<T> student = init_model<T>(student_config, seed);
  auto copy_param = [&](const std::string& dst, const std::string& src) {
    const Tensor<T>& from = teacher.param(src);
    Tensor<T>& to = student.param(dst);
    std::copy(from.data(), from.data() + to.size(), to.data());
  };
  copy_param("embed.token", "embed.token");
  copy_param("embed.position", "embed.position");  // row-prefix when shorter
  copy_param("head.weight", "head.weight");
  copy_param("head.bias", "head.bias");
  for (std::size_t l = 0; l < student_config.n_layers; ++l) {
    const std::string dst = "layer." + std::to_string(l) + ".";
    const std::string src = "layer." + std::to_string(2 * l) + ".";
    for (const char* suffix :
         {"attn.wq.weight", "attn.wq.bias", "attn.wk.weight", "attn.wk.bias",
          "attn.wv.weight", "attn.wv.bias", "attn.wo.weight", "attn.wo.bias",
          "ffn.w1.weight", "ffn.w1.bias", "ffn.w2.weight", "ffn.w2.bias", "ln1.gain",
          "ln1.bias", "ln2.gain", "ln2.bias"}) {
      copy_param(dst + suffix, src + suffix);
    }
  }
  return student;
}

}  // namespace kdlora
