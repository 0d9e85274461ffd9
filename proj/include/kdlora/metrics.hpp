#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "kdlora/common.hpp"

namespace kdlora {

namespace detail {
inline void check_equal_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b || a == 0) {
    throw ParameterError(std::string(what) + ": inputs must have equal non-zero length");
  }
}
}  // namespace detail

inline double accuracy(const std::vector<std::int32_t>& preds,
                       const std::vector<std::int32_t>& labels) {
  detail::check_equal_lengths(preds.size(), labels.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// F1 with class 1 as positive; returns 0 when precision+recall is 0.
inline double f1_binary(const std::vector<std::int32_t>& preds,
                        const std::vector<std::int32_t>& labels) {
  detail::check_equal_lengths(preds.size(), labels.size(), "f1_binary");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 1 && labels[i] == 1) ++tp;
    if (preds[i] == 1 && labels[i] != 1) ++fp;
    if (preds[i] != 1 && labels[i] == 1) ++fn;
  }
  const double precision = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
  const double recall = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

/// Matthews correlation on binary labels; 0 whenever a contingency factor is 0.
inline double matthews_corr(const std::vector<std::int32_t>& preds,
                            const std::vector<std::int32_t>& labels) {
  detail::check_equal_lengths(preds.size(), labels.size(), "matthews_corr");
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] != 0 && preds[i] != 1) {
      throw DataError("matthews_corr: predictions must be binary (0/1)");
    }
    if (labels[i] != 0 && labels[i] != 1) {
      throw DataError("matthews_corr: labels must be binary (0/1)");
    }
    if (preds[i] == 1 && labels[i] == 1) ++tp;
    if (preds[i] == 0 && labels[i] == 0) ++tn;
    if (preds[i] == 1 && labels[i] == 0) ++fp;
    if (preds[i] == 0 && labels[i] == 1) ++fn;
  }
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  detail::check_equal_lengths(x.size(), y.size(), "pearson");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;  // constant input convention
  return sxy / std::sqrt(sxx * syy);
}

namespace detail {
// ties receive the average of the ranks they span
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}
}  // namespace detail

/// Spearman correlation: Pearson on average ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  detail::check_equal_lengths(x.size(), y.size(), "spearman");
  return pearson(detail::average_ranks(x), detail::average_ranks(y));
}

}  // namespace kdlora
