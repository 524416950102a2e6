#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qpo/checkpoint.hpp"
#include "qpo/config.hpp"
#include "qpo/dataset.hpp"
#include "qpo/eval.hpp"
#include "qpo/train.hpp"

namespace qpo {

// ------------------------------------------------------------ augmentation

struct LoopConfig {
  int loops = 4;
  int augment_queries_per_loop = 1000;
  double condition_reward = 100.0;
  int top_k = 2;
  double top_p = 0.9;
  int shots = 0;
  int k_combos = 3;
};

inline LoopConfig loop_config(const RunConfig& cfg) {
  LoopConfig lc;
  lc.loops = cfg.loops;
  lc.augment_queries_per_loop = cfg.augment_queries;
  lc.condition_reward = cfg.condition_reward;
  lc.top_k = cfg.top_k;
  lc.top_p = cfg.top_p;
  lc.shots = cfg.shots;
  lc.k_combos = cfg.k_combos;
  return lc;
}

// One augmentation stage: draws queries from the collection set with
// replacement, decodes one sampled prompt per draw conditioned on the
// maximum expected reward, and evaluates each pair once. The task-level
// reward of every new example is the stage's mean correctness; normalized
// rewards come from the stored loop-0 normalizer with clamping, and no
// expert filtering is applied.
template <typename S>
std::vector<RewardedExample> augment_stage(const PolicyParams<S>& params, const Vocab& vocab,
                                           const SimTask& task, const SplitSpec& splits,
                                           const QueryStore& store, const LoopConfig& cfg,
                                           const Normalizer& normalizer, uint64_t rng_seed,
                                           int loop_id) {
  if (splits.collection.empty()) throw StateError("augment_stage: empty collection set");
  StageScope stage(Stage::augment);

  std::vector<RewardedExample> out;
  out.reserve(static_cast<size_t>(cfg.augment_queries_per_loop));
  double correct_sum = 0.0;

  for (int i = 0; i < cfg.augment_queries_per_loop; ++i) {
    const uint64_t draw_seed = rng_seed ^ static_cast<uint64_t>(i);
    Rng pick(derive_seed(draw_seed, "augment.pick"));
    const Query& q =
        store.by_id(splits.collection[static_cast<size_t>(pick.below(splits.collection.size()))]);

    SampleRule rule;
    rule.top_k = cfg.top_k;
    rule.top_p = cfg.top_p;
    rule.rng_seed = draw_seed;
    const Prompt prompt = decode_prompt(params, vocab, cfg.condition_reward, q,
                                        DecodeMode::sample, rule, task.max_prompt_len);

    RewardedExample ex;
    ex.query_id = q.id;
    ex.query_tokens = q.tokens;
    ex.topic = q.topic;
    ex.prompt_tokens = prompt.tokens;
    ex.gold = q.topic;
    ex.loop_id = loop_id;
    ex.shots = cfg.shots;
    if (cfg.shots == 0) {
      const SimResult r = answer(task, prompt, {}, q);
      ex.answer = r.answer;
      ex.r_query = reward_query_zero_shot(r.answer == q.topic, r.ppl);
      correct_sum += r.answer == q.topic ? 1.0 : 0.0;
    } else {
      std::vector<int> flags;
      for (int k = 0; k < cfg.k_combos; ++k) {
        const auto demos = sample_demos(
            task, store, splits.train_eval, cfg.shots,
            derive_seed(draw_seed, "augment.demo", static_cast<uint64_t>(k)));
        const SimResult r = answer(task, prompt, demos, q);
        flags.push_back(r.answer == q.topic ? 1 : 0);
        ex.answer = r.answer;
      }
      ex.r_query = reward_query(flags, 0.0, RewardMode::few_shot);
      correct_sum += ex.r_query;
    }
    out.push_back(std::move(ex));
  }

  const double stage_accuracy =
      correct_sum / static_cast<double>(cfg.augment_queries_per_loop);
  for (auto& ex : out) {
    ex.r_task = stage_accuracy;
    ex.r_raw = reward_overall(ex.r_query, ex.r_task);
    ex.r_norm = normalizer.apply(ex.r_raw);
  }
  return out;
}

// ------------------------------------------------------------ full procedure

struct LedgerSnapshot {
  std::array<uint64_t, kStageCount> counts{};

  uint64_t count(Stage s) const { return counts[static_cast<size_t>(s)]; }
  uint64_t total() const {
    uint64_t t = 0;
    for (uint64_t c : counts) t += c;
    return t;
  }
};

struct RunResult {
  std::vector<PolicyParams<float>> loop_params;  // params after each loop, 1-based order
  std::vector<LoopRow> rows;
  int best_loop = 1;           // highest dev accuracy, ties to the earliest loop
  double best_dev_acc = 0.0;
  double test_acc = 0.0;       // best-dev checkpoint on the test split
  uint64_t test_interactions = 0;
  OfflineDataset dataset;      // final augmented dataset
  LedgerSnapshot ledger;
  std::vector<TrainReport> train_reports;
};

// Algorithm-1 end-to-end: build the initial dataset, then alternate offline
// fine-tuning (warm start) with augmentation stages, tracking dev accuracy
// and the interaction ledger per loop. Everything derives from
// (task seed, master seed, config).
template <typename S = float>
RunResult run_qpo(const RunConfig& cfg, TrainVariant variant,
                  const std::optional<std::string>& out_dir = std::nullopt,
                  const std::string& method_label = "") {
  namespace fs = std::filesystem;
  InteractionLedger ledger;
  LedgerScope ledger_scope(ledger);
  const auto run_start = std::chrono::steady_clock::now();

  const SimTask task = gen_task(cfg.task_seed, task_overrides(cfg));
  const Vocab vocab = Vocab::build(task);
  const auto [splits, store] =
      make_splits(task, cfg.n_train, cfg.n_dev, cfg.n_test, derive_seed(cfg.master_seed, "splits"));
  const auto pool = gen_prompt_pool(task, cfg.pool_n_seed, cfg.pool_n_rewrite,
                                    derive_seed(cfg.master_seed, "pool"));

  OfflineDataset dataset =
      build_initial_dataset(task, pool, splits, store, parse_group_plan(cfg.groups),
                            cfg.shots, cfg.k_combos, derive_seed(cfg.master_seed, "build"));

  const ModelConfig mc = model_config(cfg, vocab);
  PolicyParams<float> params = init_params<float>(mc, derive_seed(cfg.master_seed, "init"));
  const LoopConfig lc = loop_config(cfg);

  const std::vector<Query> dev_queries = store.subset(splits.dev);
  const std::vector<Query> test_queries = store.subset(splits.test);

  RunResult result;
  if (out_dir) fs::create_directories(*out_dir);

  for (int t = 1; t <= cfg.loops; ++t) {
    const auto loop_start = std::chrono::steady_clock::now();
    if (out_dir)
      save_dataset(dataset, (fs::path(*out_dir) / ("loop" + std::to_string(t) + ".jsonl")).string());

    const TrainPlan plan = train_plan(cfg, t);
    result.train_reports.push_back(orl_finetune(params, dataset, vocab, plan, variant));
    result.loop_params.push_back(params);
    if (out_dir)
      save_checkpoint(params,
                      (fs::path(*out_dir) / ("loop" + std::to_string(t) + ".ckpt")).string());

    EvalProtocol dev_protocol;
    dev_protocol.shots = 0;
    dev_protocol.condition_reward = lc.condition_reward;
    dev_protocol.seed = derive_seed(cfg.master_seed, "eval.dev", static_cast<uint64_t>(t));
    dev_protocol.stage = Stage::eval_dev;
    const EvalResult dev = evaluate_policy(params, vocab, task, dev_queries, dev_protocol);

    LoopRow row;
    row.loop = t;
    row.dataset_size = static_cast<int64_t>(dataset.examples.size());
    row.dev_acc = dev.accuracy;
    row.cum_interactions = ledger.total();
    row.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - loop_start).count();
    result.rows.push_back(row);

    if (dev.accuracy > result.best_dev_acc + 1e-12) {
      result.best_dev_acc = dev.accuracy;
      result.best_loop = t;
    }

    if (t < cfg.loops && lc.augment_queries_per_loop > 0) {
      const uint64_t before = ledger.count(Stage::augment);
      auto fresh = augment_stage(params, vocab, task, splits, store, lc, *dataset.normalizer,
                                 derive_seed(cfg.master_seed, "augment", static_cast<uint64_t>(t)),
                                 t);
      const uint64_t spent = ledger.count(Stage::augment) - before;
      dataset.provenance.push_back(ProvenanceEntry{t, static_cast<int64_t>(fresh.size()),
                                                   spent, static_cast<int64_t>(fresh.size())});
      for (auto& ex : fresh) dataset.examples.push_back(std::move(ex));
    }
  }

  // Report the best-dev checkpoint on the held-out test split.
  EvalProtocol test_protocol;
  test_protocol.shots = cfg.eval_shots;
  test_protocol.k_combos = cfg.eval_k;
  test_protocol.condition_reward = lc.condition_reward;
  test_protocol.seed = derive_seed(cfg.master_seed, "eval.test");
  test_protocol.stage = Stage::eval_test;
  const EvalResult test =
      evaluate_policy(result.loop_params[static_cast<size_t>(result.best_loop - 1)], vocab,
                      task, test_queries, test_protocol, &store, &splits.train_eval);
  result.test_acc = test.accuracy;
  result.test_interactions = test.interactions;
  result.dataset = std::move(dataset);
  for (int s = 0; s < kStageCount; ++s)
    result.ledger.counts[static_cast<size_t>(s)] = ledger.count(static_cast<Stage>(s));

  if (out_dir) {
    write_run_report(result.rows, (fs::path(*out_dir) / "run_report.csv").string());
    FinalEvalRow fe;
    fe.method = method_label.empty() ? variant_name(variant) : method_label;
    fe.shots = cfg.eval_shots;
    fe.seed = cfg.master_seed;
    fe.accuracy = result.test_acc;
    fe.interactions = result.ledger.total();
    write_final_eval(fe, (fs::path(*out_dir) / "final_eval.csv").string());
    save_config(cfg, (fs::path(*out_dir) / "config.txt").string());
    save_task(task, (fs::path(*out_dir) / "task.json").string());
  }
  (void)run_start;
  return result;
}

}  // namespace qpo
