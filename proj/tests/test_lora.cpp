#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <vector>

#include "kdlora/accounting.hpp"
#include "kdlora/lora.hpp"
#include "kdlora/model.hpp"

using namespace kdlora;

namespace {

ModelConfig tiny_config() {
  ModelConfig config;
  config.vocab_size = 24;
  config.d_model = 8;
  config.n_layers = 2;
  config.n_heads = 2;
  config.d_ff = 16;
  config.max_seq_len = 12;
  config.n_classes = 2;
  config.dropout_p = 0.0;
  return config;
}

Batch make_inputs(std::size_t batch, std::size_t seq_len, std::size_t vocab,
                  std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.batch_size = batch;
  b.seq_len = seq_len;
  for (std::size_t i = 0; i < batch * seq_len; ++i) {
    b.token_ids.push_back(static_cast<std::int32_t>(4 + rng.integer(vocab - 4)));
    b.attn_mask.push_back(1);
  }
  for (std::size_t i = 0; i < batch; ++i) {
    b.token_ids[i * seq_len] = kClsId;
    b.labels.push_back(static_cast<std::int32_t>(rng.integer(2)));
  }
  return b;
}

template <typename T>
void randomize_adapter_b(EncoderModel<T>& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, adapter] : model.adapters()) {
    for (std::size_t i = 0; i < adapter.b.size(); ++i) {
      adapter.b[i] = static_cast<T>(rng.gaussian(0.0, 0.05));
    }
  }
}

}  // namespace

TEST_CASE("injection freezes the base and keeps the head trainable") {
  EncoderModel<double> model = init_model<double>(tiny_config(), 1);
  LoraConfig cfg;
  cfg.rank = 2;
  inject_lora(model, cfg, 7);

  CHECK(model.adapters().size() == 4);  // wq, wv on 2 layers
  for (const auto& [name, tensor] : model.parameters()) {
    CHECK(tensor.requires_grad() == model.is_head_param(name));
  }
  for (const auto& [name, adapter] : model.adapters()) {
    CHECK(adapter.a.requires_grad());
    CHECK(adapter.b.requires_grad());
    for (std::size_t i = 0; i < adapter.b.size(); ++i) CHECK(adapter.b[i] == 0.0);
  }
}

TEST_CASE("zero-initialized adapters leave the forward unchanged") {
  const ModelConfig config = tiny_config();
  EncoderModel<double> plain = init_model<double>(config, 2);
  EncoderModel<double> adapted = init_model<double>(config, 2);
  LoraConfig cfg;
  cfg.rank = 4;
  inject_lora(adapted, cfg, 9);

  const Batch batch = make_inputs(3, 6, config.vocab_size, 5);
  const Tensor<double> a = plain.forward(batch);
  const Tensor<double> b = adapted.forward(batch);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK_THAT(b[i], Catch::Matchers::WithinAbs(a[i], 1e-7));
  }
}

TEST_CASE("injection error paths") {
  EncoderModel<double> model = init_model<double>(tiny_config(), 3);
  LoraConfig bad;
  bad.target_modules = {"nonexistent"};
  CHECK_THROWS_AS(inject_lora(model, bad, 1), ConfigError);

  LoraConfig cfg;
  inject_lora(model, cfg, 1);
  CHECK_THROWS_AS(inject_lora(model, cfg, 1), StateError);
}

TEST_CASE("trainable counts follow the closed form") {
  const ModelConfig config = tiny_config();
  EncoderModel<double> model = init_model<double>(config, 4);
  LoraConfig cfg;
  cfg.rank = 2;
  inject_lora(model, cfg, 11);

  const TrainableSummary summary = lora_trainable_params(model);
  const std::size_t head = config.d_model * config.n_classes + config.n_classes;
  const std::size_t adapters = 4 * cfg.rank * (8 + 8);
  CHECK(summary.total == adapters + head);
  CHECK(summary.total == count_lora_params(config, cfg, /*include_head=*/true));

  // doubling the rank doubles the adapter-only count
  LoraConfig doubled = cfg;
  doubled.rank = 4;
  CHECK(count_lora_params(config, doubled) == 2 * count_lora_params(config, cfg));

  // one 768x768 matrix at rank 8
  ModelConfig bert_ish;
  bert_ish.vocab_size = 100;
  bert_ish.d_model = 768;
  bert_ish.n_layers = 1;
  bert_ish.n_heads = 12;
  bert_ish.d_ff = 3072;
  bert_ish.max_seq_len = 16;
  LoraConfig one;
  one.rank = 8;
  one.target_modules = {"layer.0.attn.wq.weight"};
  CHECK(count_lora_params(bert_ish, one) == 12288);
}

TEST_CASE("full fine-tune mode reports every parameter as trainable") {
  const ModelConfig config = tiny_config();
  EncoderModel<double> model = init_model<double>(config, 5);
  const TrainableSummary summary = lora_trainable_params(model);
  CHECK(summary.total == count_full_params(config));
}

TEST_CASE("trainable count grows with rank and with target set") {
  const ModelConfig config = tiny_config();
  LoraConfig small;
  small.rank = 2;
  LoraConfig bigger_rank = small;
  bigger_rank.rank = 3;
  LoraConfig more_targets = small;
  more_targets.target_modules = {"wq", "wv", "wk"};
  CHECK(count_lora_params(config, bigger_rank) > count_lora_params(config, small));
  CHECK(count_lora_params(config, more_targets) > count_lora_params(config, small));
}

TEST_CASE("merge reproduces the adapter path and round-trips the base") {
  const ModelConfig config = tiny_config();
  EncoderModel<double> model = init_model<double>(config, 6);
  LoraConfig cfg;
  cfg.rank = 3;
  cfg.lora_alpha = 12.0;
  inject_lora(model, cfg, 13);
  randomize_adapter_b(model, 17);

  // keep pristine copies of the adapted weights and factors
  std::map<std::string, std::vector<double>> base_before;
  std::map<std::string, std::pair<Tensor<double>, Tensor<double>>> factors;
  std::map<std::string, double> scalings;
  for (const auto& [name, adapter] : model.adapters()) {
    base_before[name] = model.param(name).values();
    factors.emplace(name, std::make_pair(adapter.a.clone(), adapter.b.clone()));
    scalings[name] = adapter.scaling;
  }

  const Batch batch = make_inputs(4, 7, config.vocab_size, 23);
  const Tensor<double> adapted_logits = model.forward(batch);

  merge_lora(model);
  CHECK_FALSE(model.adapted());
  const Tensor<double> merged_logits = model.forward(batch);
  for (std::size_t i = 0; i < merged_logits.size(); ++i) {
    CHECK_THAT(merged_logits[i],
               Catch::Matchers::WithinAbs(adapted_logits[i], 1e-10));
  }

  // subtracting scaling*A*B recovers the original base weights
  for (const auto& [name, ab] : factors) {
    const Tensor<double>& a = ab.first;
    const Tensor<double>& b = ab.second;
    std::vector<double> delta(a.dim(0) * b.dim(1), 0.0);
    detail::gemm_nn(a.data(), b.data(), delta.data(), a.dim(0), a.dim(1), b.dim(1));
    const Tensor<double>& merged = model.param(name);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double recovered = merged[i] - scalings[name] * delta[i];
      CHECK_THAT(recovered, Catch::Matchers::WithinAbs(base_before[name][i], 1e-12));
    }
  }
}

TEST_CASE("merging zero adapters keeps base weights bit-identical") {
  const ModelConfig config = tiny_config();
  EncoderModel<double> model = init_model<double>(config, 7);
  LoraConfig cfg;
  inject_lora(model, cfg, 19);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, t] : model.parameters()) before[name] = t.values();
  merge_lora(model);
  for (const auto& [name, t] : model.parameters()) {
    CHECK(std::memcmp(before[name].data(), t.data(), t.size() * sizeof(double)) == 0);
  }
  CHECK_THROWS_AS(merge_lora(model), StateError);
}

TEST_CASE("merge equivalence holds at f32 tolerance") {
  ModelConfig config = tiny_config();
  EncoderModel<float> model = init_model<float>(config, 8);
  LoraConfig cfg;
  cfg.rank = 2;
  inject_lora(model, cfg, 29);
  randomize_adapter_b(model, 31);

  const Batch batch = make_inputs(4, 6, config.vocab_size, 37);
  const Tensor<float> adapted = model.forward(batch);
  merge_lora(model);
  const Tensor<float> merged = model.forward(batch);
  for (std::size_t i = 0; i < merged.size(); ++i) {
    CHECK_THAT(static_cast<double>(merged[i]),
               Catch::Matchers::WithinAbs(static_cast<double>(adapted[i]), 1e-6));
  }
}

TEST_CASE("adapter dropout is train-only and needs an rng") {
  ModelConfig config = tiny_config();  // model dropout_p = 0
  EncoderModel<double> model = init_model<double>(config, 10);
  LoraConfig cfg;
  cfg.rank = 2;
  cfg.lora_dropout = 0.5;
  inject_lora(model, cfg, 51);
  randomize_adapter_b(model, 53);

  const Batch batch = make_inputs(2, 5, config.vocab_size, 57);
  const Tensor<double> eval_a = model.forward(batch);
  const Tensor<double> eval_b = model.forward(batch);
  for (std::size_t i = 0; i < eval_a.size(); ++i) CHECK(eval_a[i] == eval_b[i]);

  Rng rng(59);
  const Tensor<double> train_a = model.forward(batch, Mode::kTrain, &rng);
  const Tensor<double> train_b = model.forward(batch, Mode::kTrain, &rng);
  bool differs = false;
  for (std::size_t i = 0; i < train_a.size(); ++i) differs |= train_a[i] != train_b[i];
  CHECK(differs);

  CHECK_THROWS_AS(model.forward(batch, Mode::kTrain, nullptr), StateError);
}

TEST_CASE("adapters can target ffn, head and embedding matrices") {
  const ModelConfig config = tiny_config();
  EncoderModel<double> model = init_model<double>(config, 9);
  LoraConfig cfg;
  cfg.rank = 2;
  cfg.target_modules = {"ffn.w1", "head.weight", "embed.token"};
  inject_lora(model, cfg, 41);
  CHECK(model.adapters().size() == 4);  // 2x ffn.w1 + head + token table
  randomize_adapter_b(model, 43);

  const Batch batch = make_inputs(2, 5, config.vocab_size, 47);
  const Tensor<double> adapted = model.forward(batch);
  merge_lora(model);
  const Tensor<double> merged = model.forward(batch);
  for (std::size_t i = 0; i < merged.size(); ++i) {
    CHECK_THAT(merged[i], Catch::Matchers::WithinAbs(adapted[i], 1e-10));
  }
}
