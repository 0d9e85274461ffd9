#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "kdlora/data.hpp"
#include "kdlora/metrics.hpp"

using namespace kdlora;
namespace fs = std::filesystem;

namespace {

std::string temp_file(const std::string& name, const std::string& content) {
  const fs::path path = fs::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path.string();
}

}  // namespace

TEST_CASE("load_tsv single sentence file") {
  const std::string path = temp_file(
      "kdlora_single.tsv", "sentence\tlabel\nhello world\t1\nbye now\t0\n");
  TsvSchema schema;
  schema.text_cols = {"sentence"};
  const RawDataset raw = load_tsv(path, schema);
  REQUIRE(raw.examples.size() == 2);
  CHECK(raw.examples[0].text_a == "hello world");
  CHECK_FALSE(raw.examples[0].text_b.has_value());
  CHECK(raw.label_values == std::vector<std::string>{"0", "1"});
}

TEST_CASE("load_tsv reports malformed rows with line numbers") {
  const std::string path = temp_file(
      "kdlora_malformed.tsv", "sentence\tlabel\nok row\t1\nbroken row\nfine\t0\n");
  TsvSchema schema;
  schema.text_cols = {"sentence"};
  const RawDataset raw = load_tsv(path, schema);
  CHECK(raw.examples.size() == 2);
  REQUIRE(raw.skipped.size() == 1);
  CHECK(raw.skipped[0].first == 3);
}

TEST_CASE("load_tsv error paths") {
  TsvSchema schema;
  schema.text_cols = {"sentence"};
  const std::string empty = temp_file("kdlora_empty.tsv", "sentence\tlabel\n");
  CHECK_THROWS_AS(load_tsv(empty, schema), DataError);

  const std::string missing = temp_file("kdlora_missing.tsv", "text\tlabel\nx\t1\n");
  CHECK_THROWS_AS(load_tsv(missing, schema), SchemaError);
}

TEST_CASE("pair task encodes CLS s1 SEP s2 SEP") {
  const std::string path = temp_file("kdlora_pair.tsv",
                                     "sentence1\tsentence2\tlabel\na b\tc\tyes\n");
  TsvSchema schema;
  schema.text_cols = {"sentence1", "sentence2"};
  schema.label_values = {"no", "yes"};
  const RawDataset raw = load_tsv(path, schema);
  Vocab vocab;
  const std::int32_t a = vocab.add("a"), b = vocab.add("b"), c = vocab.add("c");
  const Dataset data = encode_dataset(raw, vocab, 8);
  const Example& ex = data.examples.at(0);
  CHECK(ex.token_ids == std::vector<std::int32_t>{kClsId, a, b, kSepId, c, kSepId,
                                                  kPadId, kPadId});
  CHECK(ex.attn_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 0, 0});
  CHECK(ex.label == 1);
}

TEST_CASE("unseen label lists the valid ones") {
  const std::string path =
      temp_file("kdlora_label.tsv", "sentence\tlabel\nx\tmaybe\n");
  TsvSchema schema;
  schema.text_cols = {"sentence"};
  schema.label_values = {"no", "yes"};
  const RawDataset raw = load_tsv(path, schema);
  Vocab vocab;
  try {
    encode_dataset(raw, vocab, 4);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("maybe") != std::string::npos);
    CHECK(msg.find("'no'") != std::string::npos);
    CHECK(msg.find("'yes'") != std::string::npos);
  }
}

TEST_CASE("tokenize pads, truncates and maps unknowns") {
  Vocab vocab;
  const std::int32_t a = vocab.add("a"), b = vocab.add("b");
  Example ex = tokenize("a b", vocab, 5);
  CHECK(ex.token_ids == std::vector<std::int32_t>{kClsId, a, b, kPadId, kPadId});
  CHECK(ex.attn_mask == std::vector<std::uint8_t>{1, 1, 1, 0, 0});

  Example unk = tokenize("zzz", vocab, 3);
  CHECK(unk.token_ids[1] == kUnkId);

  Example again = tokenize("a b", vocab, 5);
  CHECK(again.token_ids == ex.token_ids);
  CHECK(again.attn_mask == ex.attn_mask);
}

TEST_CASE("tokenizer lowercases and splits punctuation") {
  const std::vector<std::string> tokens = split_tokens("Hello, World! x2");
  CHECK(tokens == std::vector<std::string>{"hello", ",", "world", "!", "x2"});
}

TEST_CASE("build_vocab ranks by frequency then lexicographically") {
  const Vocab vocab = build_vocab({"b b b", "a a", "c a"}, 6);
  // a:3, b:3, c:1 -> ties broken alphabetically, ids start after reserved
  CHECK(vocab.id("a") == 4);
  CHECK(vocab.id("b") == 5);
  CHECK(vocab.id("c") == kUnkId);  // capped out
}

TEST_CASE("vocab json round trip is stable") {
  const Vocab vocab = build_vocab({"gamma beta alpha"}, 10);
  const Vocab back = Vocab::from_json(vocab.to_json());
  CHECK(back.to_json() == vocab.to_json());
  CHECK(back.id("alpha") == vocab.id("alpha"));
}

TEST_CASE("synth keyword task follows its decision rule") {
  const SynthSplit split = synth_task(SynthKind::kKeyword, 400, 16, 12, 5);
  CHECK(split.train.size() + split.val.size() == 400);
  for (const Dataset* d : {&split.train, &split.val}) {
    for (const Example& ex : d->examples) {
      bool has_keyword = false;
      for (std::int32_t id : ex.token_ids) has_keyword |= id == kSynthMarkerA;
      CHECK(has_keyword == (ex.label == 1));
    }
  }
}

TEST_CASE("synth parity and majority tasks follow their rules") {
  const SynthSplit parity = synth_task(SynthKind::kParity, 300, 16, 12, 6);
  for (const Example& ex : parity.train.examples) {
    int count = 0;
    for (std::int32_t id : ex.token_ids) count += id == kSynthMarkerA;
    CHECK(count % 2 == ex.label);
  }
  const SynthSplit majority = synth_task(SynthKind::kMajority, 300, 16, 12, 7);
  for (const Example& ex : majority.train.examples) {
    int a = 0, b = 0;
    for (std::int32_t id : ex.token_ids) {
      a += id == kSynthMarkerA;
      b += id == kSynthMarkerB;
    }
    CHECK((a > b) == (ex.label == 1));
  }
}

TEST_CASE("synth split is deterministic, disjoint and balanced") {
  const SynthSplit a = synth_task(SynthKind::kKeyword, 1200, 24, 16, 9);
  const SynthSplit b = synth_task(SynthKind::kKeyword, 1200, 24, 16, 9);
  REQUIRE(a.train.size() == b.train.size());
  CHECK(a.train.size() == 960);
  CHECK(a.val.size() == 240);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train.examples[i].token_ids == b.train.examples[i].token_ids);
  }
  std::size_t positives = 0;
  for (const Example& ex : a.train.examples) positives += ex.label == 1;
  for (const Example& ex : a.val.examples) positives += ex.label == 1;
  const double ratio = static_cast<double>(positives) / 1200.0;
  CHECK(ratio > 0.45);
  CHECK(ratio < 0.55);
}

TEST_CASE("metric hand values") {
  const std::vector<std::int32_t> perfect = {1, 0, 1, 1};
  CHECK(accuracy(perfect, perfect) == 1.0);
  CHECK(f1_binary(perfect, perfect) == 1.0);
  CHECK(matthews_corr(perfect, perfect) == 1.0);

  // TP=TN=FP=FN=1 -> numerator 0
  const std::vector<std::int32_t> preds = {1, 1, 0, 0};
  const std::vector<std::int32_t> labels = {1, 0, 1, 0};
  CHECK(matthews_corr(preds, labels) == 0.0);

  // constant predictor hits the zero-denominator convention
  const std::vector<std::int32_t> constant = {1, 1, 1, 1};
  CHECK(matthews_corr(constant, labels) == 0.0);
  CHECK(f1_binary({0, 0}, {0, 0}) == 0.0);
}

TEST_CASE("accuracy of any labeling against itself is 1") {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::int32_t> p(50);
    for (auto& v : p) v = static_cast<std::int32_t>(rng.integer(4));
    CHECK(accuracy(p, p) == 1.0);
  }
}

TEST_CASE("MCC is symmetric under swapping both classes") {
  Rng rng(14);
  std::vector<std::int32_t> preds(60), labels(60);
  for (std::size_t i = 0; i < 60; ++i) {
    preds[i] = static_cast<std::int32_t>(rng.integer(2));
    labels[i] = static_cast<std::int32_t>(rng.integer(2));
  }
  std::vector<std::int32_t> preds_swapped, labels_swapped;
  for (std::size_t i = 0; i < 60; ++i) {
    preds_swapped.push_back(1 - preds[i]);
    labels_swapped.push_back(1 - labels[i]);
  }
  CHECK_THAT(matthews_corr(preds, labels),
             Catch::Matchers::WithinAbs(matthews_corr(preds_swapped, labels_swapped),
                                        1e-12));
}

TEST_CASE("pearson and spearman behave") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> y = {2, 4, 6, 8, 10};
  CHECK_THAT(pearson(x, y), Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK_THAT(spearman(x, y), Catch::Matchers::WithinAbs(1.0, 1e-12));

  // spearman is invariant under strictly monotone transforms
  Rng rng(15);
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < 40; ++i) {
    a[i] = rng.gaussian(0, 1);
    b[i] = rng.gaussian(0, 1);
  }
  std::vector<double> a_cubed;
  for (double v : a) a_cubed.push_back(v * v * v + 10.0);
  CHECK_THAT(spearman(a, b), Catch::Matchers::WithinAbs(spearman(a_cubed, b), 1e-12));
}

TEST_CASE("spearman handles ties via average ranks") {
  const std::vector<double> x = {1, 1, 2};
  const std::vector<double> y = {1, 1, 2};
  CHECK_THAT(spearman(x, y), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("dataset tsv round trip through the tokenizer") {
  const SynthSplit split = synth_task(SynthKind::kKeyword, 50, 16, 10, 3);
  const fs::path path = fs::temp_directory_path() / "kdlora_synth.tsv";
  write_dataset_tsv(split.train, path.string());

  TsvSchema schema;
  schema.text_cols = {"sentence"};
  const RawDataset raw = load_tsv(path.string(), schema);
  REQUIRE(raw.examples.size() == split.train.size());
  const Vocab vocab = build_vocab(collect_texts(raw), 64);
  const Dataset data = encode_dataset(raw, vocab, 10);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(data.examples[i].label == split.train.examples[i].label);
  }
}
