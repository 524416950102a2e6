#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "qpo/common.hpp"

namespace qpo {

enum class RewardMode { zero_shot, few_shot };

struct RewardBreakdown {
  double r_query = 0.0;
  double r_task = 0.0;
  double r_raw = 0.0;  // r_query + r_task
  double r_norm = 0.0; // in [0, 100] once normalized
};

// Min-max map to [0, 100], fitted once and then applied with clamping.
struct Normalizer {
  double r_min = 0.0;
  double r_max = 0.0;
  std::string fitted_on;  // dataset fingerprint

  double apply(double r) const {
    if (r_max == r_min) return 50.0;
    const double v = 100.0 * (r - r_min) / (r_max - r_min);
    return std::clamp(v, 0.0, 100.0);
  }

  bool operator==(const Normalizer&) const = default;
};

// Query-level reward. Zero-shot: correctness minus a perplexity penalty.
// Few-shot: mean correctness over the demonstration combinations.
inline double reward_query(const std::vector<int>& correct_flags, double ppl,
                           RewardMode mode) {
  if (mode == RewardMode::zero_shot) {
    if (correct_flags.size() != 1)
      throw ArgumentError("reward_query: zero_shot expects exactly one flag");
    if (!(ppl >= 1.0))
      throw ArgumentError("reward_query: zero_shot requires ppl >= 1");
    return static_cast<double>(correct_flags[0]) - ppl / 10.0;
  }
  if (correct_flags.empty())
    throw ArgumentError("reward_query: few_shot expects K >= 1 flags");
  double sum = 0.0;
  for (int f : correct_flags) sum += static_cast<double>(f);
  return sum / static_cast<double>(correct_flags.size());
}

inline double reward_query_zero_shot(bool correct, double ppl) {
  return reward_query({correct ? 1 : 0}, ppl, RewardMode::zero_shot);
}

// Task-level reward: mean correctness over the evaluated queries.
inline double reward_task(const std::vector<int>& correct_flags) {
  if (correct_flags.empty()) throw ArgumentError("reward_task: empty flag sequence");
  double sum = 0.0;
  for (int f : correct_flags) sum += static_cast<double>(f);
  return sum / static_cast<double>(correct_flags.size());
}

inline double reward_overall(double r_query, double r_task) {
  return r_query + r_task;
}

// Fits r_min/r_max on the inputs; extremes map to exactly 0 and 100.
// Degenerate input (all equal) maps to 50.
inline std::pair<std::vector<double>, Normalizer> minmax_fit(
    const std::vector<double>& raw) {
  if (raw.empty()) throw ArgumentError("minmax_fit: empty sequence");
  Normalizer norm;
  norm.r_min = *std::min_element(raw.begin(), raw.end());
  norm.r_max = *std::max_element(raw.begin(), raw.end());
  std::vector<double> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) out[i] = norm.apply(raw[i]);
  return {std::move(out), norm};
}

inline std::vector<double> minmax_apply(const std::vector<double>& raw,
                                        const Normalizer& norm) {
  if (raw.empty()) throw ArgumentError("minmax_apply: empty sequence");
  std::vector<double> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) out[i] = norm.apply(raw[i]);
  return out;
}

// Expert threshold: a fraction of the reward RANGE, i.e. a cut at
// 100 * threshold_fraction on the normalized scale (not a data quantile).
inline double expert_cut(double threshold_fraction = 0.667) {
  return 100.0 * threshold_fraction;
}

}  // namespace qpo
