#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "qpo/common.hpp"
#include "qpo/dataset.hpp"
#include "qpo/policy.hpp"

namespace qpo {

// ------------------------------------------------------------ plan

// Table-8 schedule: the first loop trains longer and hotter because the
// reward/timestep layers start from scratch.
struct TrainPlan {
  int loop_index = 1;
  int epochs = 100;
  double learning_rate = 1e-3;
  int batch_size = 128;
  double weight_decay = 1e-4;
  double lambda = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t shuffle_seed = 0;
};

inline TrainPlan plan_for_loop(int loop_index, uint64_t shuffle_seed) {
  if (loop_index < 1) throw ArgumentError("plan_for_loop: loop_index must be >= 1");
  TrainPlan plan;
  plan.loop_index = loop_index;
  plan.epochs = loop_index == 1 ? 100 : 20;
  plan.learning_rate = loop_index == 1 ? 1e-3 : 1e-4;
  plan.shuffle_seed = shuffle_seed;
  return plan;
}

enum class TrainVariant { qpo, rl_only, sft };

inline TrainVariant parse_variant(const std::string& s) {
  if (s == "qpo") return TrainVariant::qpo;
  if (s == "rl_only") return TrainVariant::rl_only;
  if (s == "sft") return TrainVariant::sft;
  throw ArgumentError("unknown training variant '" + s + "'");
}

inline const char* variant_name(TrainVariant v) {
  switch (v) {
    case TrainVariant::qpo: return "qpo";
    case TrainVariant::rl_only: return "rl_only";
    default: return "sft";
  }
}

// ------------------------------------------------------------ optimizer

template <typename S>
void set_zero(PolicyParams<S>& p) {
  for (auto& t : collect_tensors(p))
    for (long i = 0; i < t.rows * t.cols; ++i) t.data[i] = S(0);
}

// Decoupled weight decay; decay skips layer-norm gains and every bias.
template <typename S>
class AdamW {
 public:
  explicit AdamW(const ModelConfig& cfg)
      : m_(zero_params<S>(cfg)), v_(zero_params<S>(cfg)) {}

  void step(PolicyParams<S>& params, PolicyParams<S>& grads, const TrainPlan& plan) {
    ++t_;
    const S lr = static_cast<S>(plan.learning_rate);
    const S b1 = static_cast<S>(plan.beta1);
    const S b2 = static_cast<S>(plan.beta2);
    const S eps = static_cast<S>(plan.eps);
    const S wd = static_cast<S>(plan.weight_decay);
    const S c1 = S(1) - static_cast<S>(std::pow(plan.beta1, static_cast<double>(t_)));
    const S c2 = S(1) - static_cast<S>(std::pow(plan.beta2, static_cast<double>(t_)));

    auto pt = collect_tensors(params);
    auto gt = collect_tensors(grads);
    auto mt = collect_tensors(m_);
    auto vt = collect_tensors(v_);
    for (size_t k = 0; k < pt.size(); ++k) {
      const long n = pt[k].rows * pt[k].cols;
      S* p = pt[k].data;
      S* g = gt[k].data;
      S* m = mt[k].data;
      S* v = vt[k].data;
      const bool decay = pt[k].decay;
      for (long i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (S(1) - b1) * g[i];
        v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
        const S mhat = m[i] / c1;
        const S vhat = v[i] / c2;
        S delta = mhat / (std::sqrt(vhat) + eps);
        if (decay) delta += wd * p[i];
        p[i] -= lr * delta;
      }
    }
  }

  int64_t steps() const { return t_; }

 private:
  PolicyParams<S> m_, v_;
  int64_t t_ = 0;
};

// ------------------------------------------------------------ fine-tuning

struct EpochStats {
  double l_prompt = 0.0;
  double l_r = 0.0;
  double l_total = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::string params_fingerprint;
  double wall_seconds = 0.0;
  int64_t examples_seen = 0;
  int64_t train_set_size = 0;
};

template <typename S>
std::string params_fingerprint(PolicyParams<S>& p) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (auto& t : collect_tensors(p))
    h = fnv1a_bytes(t.data, static_cast<size_t>(t.rows * t.cols) * sizeof(S), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Keeps one example per query id: the max-r_norm one, ties resolved to the
// earliest in dataset order (which is the lowest prompt index for the
// initial data).
inline std::vector<const RewardedExample*> sft_reduce(const OfflineDataset& dataset) {
  std::map<int64_t, const RewardedExample*> best;
  for (const auto& ex : dataset.examples) {
    auto [it, inserted] = best.try_emplace(ex.query_id, &ex);
    if (!inserted && ex.r_norm > it->second->r_norm) it->second = &ex;
  }
  std::vector<const RewardedExample*> out;
  out.reserve(best.size());
  for (const auto& [qid, ex] : best) out.push_back(ex);
  return out;
}

// ORL(pi, D): minibatched optimization of the combined objective on the
// offline dataset. `sft` first reduces the data to one example per query and
// conditions on a constant reward of 100; `rl_only` keeps the conditioning
// but drops the reward-prediction loss.
template <typename S>
TrainReport orl_finetune(PolicyParams<S>& params, const OfflineDataset& dataset,
                         const Vocab& vocab, const TrainPlan& plan, TrainVariant variant) {
  if (dataset.examples.empty()) throw ArgumentError("orl_finetune: empty dataset");
  if (!dataset.normalizer) throw StateError("orl_finetune: dataset is not normalized");

  const auto t0 = std::chrono::steady_clock::now();
  const double lambda = variant == TrainVariant::qpo ? plan.lambda : 0.0;

  std::vector<EncodedEpisode> episodes;
  if (variant == TrainVariant::sft) {
    for (const RewardedExample* ex : sft_reduce(dataset))
      episodes.push_back(
          encode_episode(vocab, params.cfg, 100.0, ex->query_tokens, &ex->prompt_tokens));
  } else {
    episodes.reserve(dataset.examples.size());
    for (const auto& ex : dataset.examples)
      episodes.push_back(
          encode_episode(vocab, params.cfg, ex.r_norm, ex.query_tokens, &ex.prompt_tokens));
  }

  AdamW<S> opt(params.cfg);
  PolicyParams<S> grads = zero_params<S>(params.cfg);
  ForwardCache<S> fc;
  TrainReport report;
  report.train_set_size = static_cast<int64_t>(episodes.size());

  std::vector<size_t> order(episodes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    Rng rng(derive_seed(plan.shuffle_seed, "epoch", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);

    double ce_sum = 0.0;
    long masked_sum = 0;
    double sq_sum = 0.0;
    long example_sum = 0;

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(plan.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(plan.batch_size));
      std::vector<EncodedEpisode> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(episodes[order[i]]);

      set_zero(grads);
      const LossBreakdown loss = compute_grads(params, batch, lambda, grads, fc);
      if (!std::isfinite(loss.total()))
        throw StateError("orl_finetune: non-finite loss at epoch " + std::to_string(epoch) +
                         " (l_prompt=" + std::to_string(loss.l_prompt) +
                         ", l_r=" + std::to_string(loss.l_r) + ")");
      opt.step(params, grads, plan);

      ce_sum += loss.l_prompt * static_cast<double>(loss.masked_positions);
      masked_sum += loss.masked_positions;
      sq_sum += loss.l_r * static_cast<double>(batch.size());
      example_sum += static_cast<long>(batch.size());
    }

    EpochStats stats;
    stats.l_prompt = masked_sum > 0 ? ce_sum / static_cast<double>(masked_sum) : 0.0;
    stats.l_r = example_sum > 0 ? sq_sum / static_cast<double>(example_sum) : 0.0;
    stats.l_total = stats.l_prompt + lambda * stats.l_r;
    report.epochs.push_back(stats);
    report.examples_seen += example_sum;
  }

  report.params_fingerprint = params_fingerprint(params);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline void write_train_report(const TrainReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_train_report: cannot open " + path);
  out << "epoch,l_prompt,l_r,l_total\n";
  for (size_t e = 0; e < report.epochs.size(); ++e)
    out << e + 1 << "," << format_real(report.epochs[e].l_prompt) << ","
        << format_real(report.epochs[e].l_r) << ","
        << format_real(report.epochs[e].l_total) << "\n";
}

// ------------------------------------------------------------ gradient check

struct GradCheckReport {
  int trials = 0;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  bool pass = false;
  double tolerance = 0.0;
};

inline ModelConfig grad_check_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq = 16;
  cfg.vocab = 12;
  return cfg;
}

// Central finite differences (h = 1e-5) against the analytic gradients, in
// 64-bit arithmetic, over every parameter tensor.
inline GradCheckReport grad_check(const ModelConfig& cfg, int n_trials,
                                  double tolerance = 1e-4, uint64_t seed = 1234) {
  GradCheckReport report;
  report.trials = n_trials;
  report.tolerance = tolerance;
  const double h = 1e-5;

  for (int trial = 0; trial < n_trials; ++trial) {
    Rng rng(derive_seed(seed, "grad_check", static_cast<uint64_t>(trial)));
    PolicyParams<double> params = zero_params<double>(cfg);
    for (auto& t : collect_tensors(params)) {
      const bool is_gain = t.name.size() >= 2 && t.name.substr(t.name.size() - 2) == ".g";
      for (long i = 0; i < t.rows * t.cols; ++i)
        t.data[i] = (is_gain ? 1.0 : 0.0) + rng.normal(0.0, 0.3);
    }

    std::vector<EncodedEpisode> batch;
    const int B = 3;
    for (int b = 0; b < B; ++b) {
      EncodedEpisode ep;
      const int n_query = 2 + static_cast<int>(rng.below(3));
      const int n_prompt = 1 + static_cast<int>(rng.below(3));
      ep.reward_target = rng.uniform();
      ep.query_len = n_query;
      ep.ids.push_back(Vocab::rwd);
      ep.timestep.push_back(0);
      for (int i = 0; i < n_query; ++i) {
        ep.ids.push_back(4 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab - 4))));
        ep.timestep.push_back(1);
      }
      ep.sep_pos = static_cast<int>(ep.ids.size());
      ep.ids.push_back(Vocab::sep);
      ep.timestep.push_back(2);
      for (int i = 0; i < n_prompt; ++i) {
        ep.ids.push_back(4 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab - 4))));
        ep.timestep.push_back(2);
      }
      ep.ids.push_back(Vocab::eos);
      ep.timestep.push_back(2);
      ep.loss_mask.assign(ep.ids.size(), 0);
      for (size_t t = static_cast<size_t>(ep.sep_pos) + 1; t < ep.ids.size(); ++t)
        ep.loss_mask[t] = 1;
      batch.push_back(std::move(ep));
    }

    const double lambda = trial % 3 == 0 ? 0.0 : (trial % 3 == 1 ? 0.1 : 0.5);

    PolicyParams<double> grads = zero_params<double>(cfg);
    ForwardCache<double> fc;
    compute_grads(params, batch, lambda, grads, fc);

    auto pt = collect_tensors(params);
    auto gt = collect_tensors(grads);
    for (size_t k = 0; k < pt.size(); ++k) {
      for (long i = 0; i < pt[k].rows * pt[k].cols; ++i) {
        const double save = pt[k].data[i];
        pt[k].data[i] = save + h;
        const double lp = compute_loss(params, batch, lambda, fc).total();
        pt[k].data[i] = save - h;
        const double lm = compute_loss(params, batch, lambda, fc).total();
        pt[k].data[i] = save;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = gt[k].data[i];
        const double rel =
            std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_tensor = pt[k].name;
        }
      }
    }
  }

  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace qpo
