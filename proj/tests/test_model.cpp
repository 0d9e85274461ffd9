#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <thread>
#include <vector>

#include "kdlora/accounting.hpp"
#include "kdlora/losses.hpp"
#include "kdlora/model.hpp"

using namespace kdlora;

namespace {

ModelConfig tiny_config() {
  ModelConfig config;
  config.vocab_size = 20;
  config.d_model = 8;
  config.n_layers = 2;
  config.n_heads = 2;
  config.d_ff = 16;
  config.max_seq_len = 10;
  config.n_classes = 2;
  config.dropout_p = 0.1;
  return config;
}

Batch random_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab,
                   Rng& rng) {
  Batch b;
  b.batch_size = batch;
  b.seq_len = seq_len;
  for (std::size_t i = 0; i < batch * seq_len; ++i) {
    b.token_ids.push_back(
        static_cast<std::int32_t>(4 + rng.integer(vocab - 4)));
    b.attn_mask.push_back(1);
  }
  for (std::size_t i = 0; i < batch; ++i) {
    b.labels.push_back(static_cast<std::int32_t>(rng.integer(2)));
  }
  for (std::size_t i = 0; i < batch; ++i) b.token_ids[i * seq_len] = kClsId;
  return b;
}

}  // namespace

TEST_CASE("init_model is deterministic and shape-correct") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> a = init_model<double>(config, 42);
  const EncoderModel<double> b = init_model<double>(config, 42);
  const EncoderModel<double> c = init_model<double>(config, 43);

  REQUIRE(a.parameters().size() == b.parameters().size());
  bool any_differs_from_c = false;
  for (const auto& [name, tensor] : a.parameters()) {
    const Tensor<double>& other = b.param(name);
    REQUIRE(tensor.shape() == other.shape());
    CHECK(std::memcmp(tensor.data(), other.data(), tensor.size() * sizeof(double)) == 0);
    if (std::memcmp(tensor.data(), c.param(name).data(),
                    tensor.size() * sizeof(double)) != 0) {
      any_differs_from_c = true;
    }
  }
  CHECK(any_differs_from_c);

  CHECK(a.param("layer.0.attn.wq.weight").shape() ==
        std::vector<std::size_t>{8, 8});
  CHECK(a.param("embed.token").shape() == std::vector<std::size_t>{20, 8});
  CHECK(a.param("head.weight").shape() == std::vector<std::size_t>{8, 2});

  // layernorm affine starts at identity
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.param("layer.0.ln1.gain")[i] == 1.0);
    CHECK(a.param("layer.0.ln1.bias")[i] == 0.0);
  }
}

TEST_CASE("parameter count matches the closed form") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 1);
  CHECK(model.parameter_count() == count_full_params(config));
}

TEST_CASE("config validation rejects bad dimensions") {
  ModelConfig config = tiny_config();
  config.n_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = tiny_config();
  config.n_classes = 1;
  CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("forward gives identical logits for identical rows") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 3);
  Rng rng(5);
  Batch one = random_batch(1, 6, config.vocab_size, rng);
  Batch two;
  two.batch_size = 2;
  two.seq_len = 6;
  for (int copy = 0; copy < 2; ++copy) {
    two.token_ids.insert(two.token_ids.end(), one.token_ids.begin(),
                         one.token_ids.end());
    two.attn_mask.insert(two.attn_mask.end(), one.attn_mask.begin(),
                         one.attn_mask.end());
    two.labels.push_back(one.labels[0]);
  }
  const Tensor<double> logits = model.forward(two);
  CHECK(logits.shape() == std::vector<std::size_t>{2, 2});
  CHECK(logits[0] == logits[2]);
  CHECK(logits[1] == logits[3]);
}

TEST_CASE("masked padding leaves logits unchanged") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 8);
  Rng rng(2);
  const Batch base = random_batch(2, 6, config.vocab_size, rng);

  Batch padded = base;
  padded.seq_len = 9;
  padded.token_ids.clear();
  padded.attn_mask.clear();
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      padded.token_ids.push_back(base.token_ids[i * 6 + j]);
      padded.attn_mask.push_back(1);
    }
    for (std::size_t j = 6; j < 9; ++j) {
      padded.token_ids.push_back(kPadId);
      padded.attn_mask.push_back(0);
    }
  }
  const Tensor<double> logits_base = model.forward(base);
  const Tensor<double> logits_padded = model.forward(padded);
  for (std::size_t i = 0; i < logits_base.size(); ++i) {
    CHECK_THAT(logits_padded[i],
               Catch::Matchers::WithinAbs(logits_base[i], 1e-6));
  }
}

TEST_CASE("permuting the batch permutes the logits identically") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 12);
  Rng rng(6);
  const Batch batch = random_batch(4, 5, config.vocab_size, rng);
  Batch reversed = batch;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      reversed.token_ids[i * 5 + j] = batch.token_ids[(3 - i) * 5 + j];
      reversed.attn_mask[i * 5 + j] = batch.attn_mask[(3 - i) * 5 + j];
    }
  }
  const Tensor<double> a = model.forward(batch);
  const Tensor<double> b = model.forward(reversed);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a[i * 2] == b[(3 - i) * 2]);
    CHECK(a[i * 2 + 1] == b[(3 - i) * 2 + 1]);
  }
}

TEST_CASE("forward mutates no parameter and is deterministic in eval mode") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 21);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, t] : model.parameters()) before[name] = t.values();

  Rng rng(1);
  const Batch batch = random_batch(3, 7, config.vocab_size, rng);
  const Tensor<double> first = model.forward(batch);
  const Tensor<double> second = model.forward(batch);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i] == second[i]);
  for (const auto& [name, t] : model.parameters()) {
    CHECK(std::memcmp(before[name].data(), t.data(), t.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("forward error paths name the offending input") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 4);
  Batch batch;
  batch.batch_size = 1;
  batch.seq_len = 3;
  batch.token_ids = {kClsId, 99, 5};  // 99 >= vocab_size
  batch.attn_mask = {1, 1, 1};
  batch.labels = {0};
  CHECK_THROWS_AS(model.forward(batch), DataError);

  Batch long_batch;
  long_batch.batch_size = 1;
  long_batch.seq_len = config.max_seq_len + 1;
  long_batch.token_ids.assign(long_batch.seq_len, kClsId);
  long_batch.attn_mask.assign(long_batch.seq_len, 1);
  CHECK_THROWS_AS(model.forward(long_batch), DataError);
}

TEST_CASE("end-to-end gradients match finite differences") {
  ModelConfig config = tiny_config();
  config.dropout_p = 0.0;
  EncoderModel<double> model = init_model<double>(config, 77);
  Rng rng(9);
  const Batch batch = random_batch(2, 5, config.vocab_size, rng);

  auto f = [&] {
    Tensor<double> logits = model.forward(batch, Mode::kEval, nullptr);
    return mean_all(logits);
  };
  // one sampled weight per kind keeps the runtime short
  for (const char* name : {"layer.0.attn.wq.weight", "layer.1.ffn.w1.weight",
                           "layer.0.ln2.gain", "embed.token", "head.weight"}) {
    CHECK(grad_check<double>(f, model.param(name), 1e-5) < 1e-4);
  }
}

TEST_CASE("eval-mode forward is safe to run concurrently") {
  const ModelConfig config = tiny_config();
  const EncoderModel<double> model = init_model<double>(config, 33);
  Rng rng(3);
  const Batch batch = random_batch(3, 6, config.vocab_size, rng);
  const Tensor<double> expected = model.forward(batch);

  std::vector<std::thread> workers;
  std::vector<Tensor<double>> results(4);
  for (std::size_t i = 0; i < results.size(); ++i) {
    workers.emplace_back([&, i] { results[i] = model.forward(batch); });
  }
  for (std::thread& worker : workers) worker.join();
  for (const Tensor<double>& r : results) {
    REQUIRE(r.size() == expected.size());
    CHECK(std::memcmp(r.data(), expected.data(), r.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("student init strategies") {
  ModelConfig teacher_config = tiny_config();
  teacher_config.n_layers = 4;
  const EncoderModel<double> teacher = init_model<double>(teacher_config, 50);

  ModelConfig student_config = teacher_config;
  student_config.n_layers = 2;

  SECTION("random equals a fresh init") {
    const EncoderModel<double> student =
        init_student_from_teacher(teacher, student_config, StudentInit::kRandom, 50);
    const EncoderModel<double> fresh = init_model<double>(student_config, 50);
    for (const auto& [name, t] : student.parameters()) {
      CHECK(std::memcmp(t.data(), fresh.param(name).data(),
                        t.size() * sizeof(double)) == 0);
    }
  }

  SECTION("even-layers copies teacher layer 2i") {
    const EncoderModel<double> student = init_student_from_teacher(
        teacher, student_config, StudentInit::kEvenLayers, 50);
    CHECK(std::memcmp(student.param("layer.0.attn.wq.weight").data(),
                      teacher.param("layer.0.attn.wq.weight").data(),
                      64 * sizeof(double)) == 0);
    CHECK(std::memcmp(student.param("layer.1.attn.wq.weight").data(),
                      teacher.param("layer.2.attn.wq.weight").data(),
                      64 * sizeof(double)) == 0);
    CHECK(std::memcmp(student.param("embed.token").data(),
                      teacher.param("embed.token").data(),
                      teacher.param("embed.token").size() * sizeof(double)) == 0);

    // not a no-op relative to the teacher
    Rng rng(60);
    const Batch batch = random_batch(2, 6, teacher_config.vocab_size, rng);
    const Tensor<double> t_logits = teacher.forward(batch);
    const Tensor<double> s_logits = student.forward(batch);
    bool differs = false;
    for (std::size_t i = 0; i < t_logits.size(); ++i) {
      differs |= t_logits[i] != s_logits[i];
    }
    CHECK(differs);
  }

  SECTION("incompatible dims are rejected") {
    ModelConfig bad = student_config;
    bad.d_model = 4;
    bad.n_heads = 2;
    bad.d_ff = 8;
    CHECK_THROWS_AS(init_student_from_teacher(teacher, bad, StudentInit::kEvenLayers, 1),
                    ConfigError);
    ModelConfig too_deep = teacher_config;
    CHECK_THROWS_AS(
        init_student_from_teacher(teacher, too_deep, StudentInit::kEvenLayers, 1),
        ConfigError);
  }
}
