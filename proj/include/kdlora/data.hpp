#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kdlora/common.hpp"
#include "kdlora/rng.hpp"

namespace kdlora {

/// One tokenized, padded classification example.
struct Example {
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> attn_mask;  // 1 = real token, 0 = padding
  std::int32_t label = -1;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t n_classes = 0;
  std::size_t seq_len = 0;
  std::vector<std::string> label_names;

  std::size_t size() const { return examples.size(); }
};

/// Flat token-id/mask/label buffers for one forward pass.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> attn_mask;
  std::vector<std::int32_t> labels;
};

inline Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  Batch batch;
  batch.batch_size = indices.size();
  batch.seq_len = data.seq_len;
  batch.token_ids.reserve(indices.size() * data.seq_len);
  batch.attn_mask.reserve(indices.size() * data.seq_len);
  batch.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    const Example& ex = data.examples.at(idx);
    batch.token_ids.insert(batch.token_ids.end(), ex.token_ids.begin(),
                           ex.token_ids.end());
    batch.attn_mask.insert(batch.attn_mask.end(), ex.attn_mask.begin(),
                           ex.attn_mask.end());
    batch.labels.push_back(ex.label);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;
inline constexpr std::int32_t kSepId = 3;

/// token -> dense id map with fixed reserved ids.
class Vocab {
 public:
  Vocab() {
    add_reserved();
  }

  std::int32_t id(const std::string& token) const {
    auto it = map_.find(token);
    return it == map_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return map_.count(token) > 0; }
  std::size_t size() const { return map_.size(); }

  std::int32_t add(const std::string& token) {
    auto it = map_.find(token);
    if (it != map_.end()) return it->second;
    const auto next = static_cast<std::int32_t>(map_.size());
    map_.emplace(token, next);
    return next;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [token, id] : std::map<std::string, std::int32_t>(map_.begin(),
                                                                       map_.end())) {
      j[token] = id;
    }
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    for (auto it = j.begin(); it != j.end(); ++it) {
      v.map_[it.key()] = it.value().get<std::int32_t>();
    }
    v.validate();
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("vocab: cannot write " + path);
    out << to_json().dump(2) << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocab: cannot read " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

 private:
  void add_reserved() {
    map_["[PAD]"] = kPadId;
    map_["[UNK]"] = kUnkId;
    map_["[CLS]"] = kClsId;
    map_["[SEP]"] = kSepId;
  }

  void validate() const {
    std::vector<bool> seen(map_.size(), false);
    for (const auto& [token, id] : map_) {
      if (id < 0 || static_cast<std::size_t>(id) >= map_.size() || seen[id]) {
        throw DataError("vocab: ids must be dense and unique, bad id for '" + token +
                        "'");
      }
      seen[id] = true;
    }
  }

  std::unordered_map<std::string, std::int32_t> map_;
};

/// Lowercases and splits on whitespace; punctuation characters become
/// standalone tokens.
inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
      tokens.push_back(std::string(1, raw));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

/// Counts tokens in the training texts and keeps the most frequent
/// (max_vocab - 4), ranked by count then lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& texts, std::size_t max_vocab) {
  if (max_vocab < 5) throw ParameterError("build_vocab: max_vocab must be at least 5");
  std::map<std::string, std::size_t> counts;
  for (const std::string& text : texts) {
    for (std::string& token : split_tokens(text)) ++counts[token];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab vocab;
  for (const auto& [token, count] : ranked) {
    if (vocab.size() >= max_vocab) break;
    vocab.add(token);
  }
  return vocab;
}

/// Encodes a sentence (or pair) as ids, truncated and padded to max_len.
/// Single: [CLS] s. Pair: [CLS] s1 [SEP] s2 [SEP].
inline Example tokenize(const std::string& text_a,
                        const std::optional<std::string>& text_b, const Vocab& vocab,
                        std::size_t max_len) {
  if (max_len < 1) throw ParameterError("tokenize: max_len must be positive");
  std::vector<std::int32_t> ids{kClsId};
  for (const std::string& token : split_tokens(text_a)) ids.push_back(vocab.id(token));
  if (text_b.has_value()) {
    ids.push_back(kSepId);
    for (const std::string& token : split_tokens(*text_b)) ids.push_back(vocab.id(token));
    ids.push_back(kSepId);
  }
  if (ids.size() > max_len) ids.resize(max_len);
  Example ex;
  ex.token_ids = std::move(ids);
  ex.attn_mask.assign(ex.token_ids.size(), 1);
  while (ex.token_ids.size() < max_len) {
    ex.token_ids.push_back(kPadId);
    ex.attn_mask.push_back(0);
  }
  return ex;
}

inline Example tokenize(const std::string& text, const Vocab& vocab,
                        std::size_t max_len) {
  return tokenize(text, std::nullopt, vocab, max_len);
}

// ---------------------------------------------------------------------------
// TSV ingestion

/// Column layout of a tab-separated file with a header row.
struct TsvSchema {
  std::vector<std::string> text_cols;  // 1 or 2 column names
  std::string label_col = "label";
  // Fixed label -> id order; derived from the file (sorted unique) when empty.
  std::vector<std::string> label_values;
};

struct RawExample {
  std::string text_a;
  std::optional<std::string> text_b;
  std::string label;
};

struct RawDataset {
  std::vector<RawExample> examples;
  std::vector<std::pair<std::size_t, std::string>> skipped;  // (line, reason)
  std::vector<std::string> label_values;
};

inline RawDataset load_tsv(const std::string& path, const TsvSchema& schema) {
  if (schema.text_cols.empty() || schema.text_cols.size() > 2) {
    throw SchemaError("load_tsv: schema must name 1 or 2 text columns");
  }
  std::ifstream in(path);
  if (!in) throw IoError("load_tsv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_tsv: " + path + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  auto split = [](const std::string& s) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(s);
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (!s.empty() && s.back() == '\t') fields.push_back("");
    return fields;
  };

  const std::vector<std::string> header = split(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw SchemaError("load_tsv: column '" + name + "' not found in header of " +
                        path);
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> text_idx;
  for (const std::string& name : schema.text_cols) text_idx.push_back(column(name));
  const std::size_t label_idx = column(schema.label_col);

  RawDataset out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line);
    if (fields.size() != header.size()) {
      out.skipped.emplace_back(line_no, "expected " + std::to_string(header.size()) +
                                            " fields, got " +
                                            std::to_string(fields.size()));
      continue;
    }
    RawExample ex;
    ex.text_a = fields[text_idx[0]];
    if (text_idx.size() == 2) ex.text_b = fields[text_idx[1]];
    ex.label = fields[label_idx];
    out.examples.push_back(std::move(ex));
  }
  if (out.examples.empty()) throw DataError("load_tsv: " + path + " has no data rows");

  if (schema.label_values.empty()) {
    std::vector<std::string> values;
    for (const RawExample& ex : out.examples) values.push_back(ex.label);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    out.label_values = std::move(values);
  } else {
    out.label_values = schema.label_values;
  }
  return out;
}

/// Tokenizes raw rows against a vocabulary and maps string labels to ids.
inline Dataset encode_dataset(const RawDataset& raw, const Vocab& vocab,
                              std::size_t max_len) {
  if (raw.label_values.size() < 2) {
    throw DataError("encode_dataset: need at least 2 label values, got " +
                    std::to_string(raw.label_values.size()));
  }
  std::map<std::string, std::int32_t> label_ids;
  for (std::size_t i = 0; i < raw.label_values.size(); ++i) {
    label_ids[raw.label_values[i]] = static_cast<std::int32_t>(i);
  }
  Dataset data;
  data.n_classes = raw.label_values.size();
  data.seq_len = max_len;
  data.label_names = raw.label_values;
  for (const RawExample& rex : raw.examples) {
    auto it = label_ids.find(rex.label);
    if (it == label_ids.end()) {
      std::string valid;
      for (const std::string& v : raw.label_values) {
        if (!valid.empty()) valid += ", ";
        valid += "'" + v + "'";
      }
      throw DataError("encode_dataset: unseen label '" + rex.label +
                      "'; valid labels: " + valid);
    }
    Example ex = tokenize(rex.text_a, rex.text_b, vocab, max_len);
    ex.label = it->second;
    data.examples.push_back(std::move(ex));
  }
  return data;
}

inline std::vector<std::string> collect_texts(const RawDataset& raw) {
  std::vector<std::string> texts;
  for (const RawExample& ex : raw.examples) {
    texts.push_back(ex.text_a);
    if (ex.text_b) texts.push_back(*ex.text_b);
  }
  return texts;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class SynthKind { kParity, kKeyword, kMajority };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "parity") return SynthKind::kParity;
  if (s == "keyword") return SynthKind::kKeyword;
  if (s == "majority") return SynthKind::kMajority;
  throw ConfigError("unknown synthetic task '" + s +
                    "' (expected parity, keyword or majority)");
}

struct SynthSplit {
  Dataset train;
  Dataset val;
};

// Token 4 is the keyword / parity marker; token 5 the majority rival.
inline constexpr std::int32_t kSynthMarkerA = 4;
inline constexpr std::int32_t kSynthMarkerB = 5;

/// Generates a binary task with a known decision rule (perfectly separable by
/// construction): keyword = marker presence, parity = marker count mod 2,
/// majority = which of two markers occurs more often. Labels are coin flips,
/// so classes are balanced in expectation. Sequences start with [CLS].
inline SynthSplit synth_task(SynthKind kind, std::size_t n_examples,
                             std::size_t vocab_size, std::size_t seq_len,
                             std::uint64_t seed, double val_fraction = 0.2) {
  if (seq_len < 8) throw ParameterError("synth_task: seq_len must be at least 8");
  if (vocab_size < 8) throw ParameterError("synth_task: vocab_size must be at least 8");
  if (n_examples < 2) throw ParameterError("synth_task: need at least 2 examples");
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ParameterError("synth_task: val_fraction must lie in (0, 1)");
  }
  Rng rng(seed);
  const std::size_t payload = seq_len - 1;  // position 0 is [CLS]
  const auto filler = [&] {
    // fillers avoid the marker tokens so the rule stays exact
    const std::int32_t lo = kSynthMarkerB + 1;
    return lo + static_cast<std::int32_t>(rng.integer(vocab_size - lo));
  };

  std::vector<Example> all;
  all.reserve(n_examples);
  for (std::size_t e = 0; e < n_examples; ++e) {
    const std::int32_t label = rng.bernoulli(0.5) ? 1 : 0;
    std::vector<std::int32_t> ids(seq_len);
    ids[0] = kClsId;
    for (std::size_t i = 1; i < seq_len; ++i) ids[i] = filler();

    auto place = [&](std::int32_t token, std::size_t count) {
      std::vector<std::size_t> positions(payload);
      std::iota(positions.begin(), positions.end(), std::size_t{1});
      rng.shuffle(positions.begin(), positions.end());
      for (std::size_t i = 0; i < count; ++i) ids[positions[i]] = token;
    };

    switch (kind) {
      case SynthKind::kKeyword:
        if (label == 1) place(kSynthMarkerA, 1 + rng.integer(2));
        break;
      case SynthKind::kParity: {
        const std::size_t count = static_cast<std::size_t>(label) + 2 * rng.integer(2);
        place(kSynthMarkerA, count);
        break;
      }
      case SynthKind::kMajority: {
        const std::size_t low = 1 + rng.integer(2);
        const std::size_t high = low + 1 + rng.integer(2);
        std::vector<std::size_t> positions(payload);
        std::iota(positions.begin(), positions.end(), std::size_t{1});
        rng.shuffle(positions.begin(), positions.end());
        const std::size_t a_count = label == 1 ? high : low;
        const std::size_t b_count = label == 1 ? low : high;
        for (std::size_t i = 0; i < a_count; ++i) ids[positions[i]] = kSynthMarkerA;
        for (std::size_t i = 0; i < b_count; ++i) {
          ids[positions[a_count + i]] = kSynthMarkerB;
        }
        break;
      }
    }

    Example ex;
    ex.token_ids = std::move(ids);
    ex.attn_mask.assign(seq_len, 1);
    ex.label = label;
    all.push_back(std::move(ex));
  }

  const std::size_t n_val =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   static_cast<double>(n_examples) * val_fraction + 0.5));
  const std::size_t n_train = n_examples - n_val;
  SynthSplit split;
  for (Dataset* d : {&split.train, &split.val}) {
    d->n_classes = 2;
    d->seq_len = seq_len;
    d->label_names = {"0", "1"};
  }
  split.train.examples.assign(all.begin(), all.begin() + static_cast<long>(n_train));
  split.val.examples.assign(all.begin() + static_cast<long>(n_train), all.end());
  return split;
}

/// Writes a dataset as a single-sentence TSV ("sentence\tlabel"), rendering
/// token ids as words. Lets the CLI consume synthetic tasks.
inline void write_dataset_tsv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_dataset_tsv: cannot write " + path);
  out << "sentence\tlabel\n";
  for (const Example& ex : data.examples) {
    std::string text;
    for (std::size_t i = 0; i < ex.token_ids.size(); ++i) {
      if (ex.attn_mask[i] == 0) break;
      if (ex.token_ids[i] == kClsId) continue;  // tokenize() re-adds [CLS]
      if (!text.empty()) text += ' ';
      text += 'w' + std::to_string(ex.token_ids[i]);
    }
    out << text << '\t' << ex.label << '\n';
  }
}

}  // namespace kdlora
