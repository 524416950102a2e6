#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "qpo/loop.hpp"

namespace qpo {

enum class BaselineVariant { task_best, nn, sft, rl_only, no_mla };

inline BaselineVariant parse_baseline(const std::string& s) {
  if (s == "task_best") return BaselineVariant::task_best;
  if (s == "nn") return BaselineVariant::nn;
  if (s == "sft") return BaselineVariant::sft;
  if (s == "rl_only") return BaselineVariant::rl_only;
  if (s == "no_mla") return BaselineVariant::no_mla;
  throw ArgumentError("unknown baseline variant '" + s + "'");
}

inline const char* baseline_name(BaselineVariant v) {
  switch (v) {
    case BaselineVariant::task_best: return "task_best";
    case BaselineVariant::nn: return "nn";
    case BaselineVariant::sft: return "sft";
    case BaselineVariant::rl_only: return "rl_only";
    default: return "no_mla";
  }
}

// One fixed prompt applied to every query, under the usual protocol.
inline EvalResult evaluate_fixed_prompt(const SimTask& task, const Prompt& prompt,
                                        const std::vector<Query>& queries,
                                        const EvalProtocol& protocol,
                                        const QueryStore* store = nullptr,
                                        const std::vector<int64_t>* demo_pool = nullptr) {
  return evaluate_with(
      task, queries, protocol, [&](const Query&) { return prompt; }, store, demo_pool);
}

// The task-level baseline: pick the pool prompt with the best mean accuracy
// over the collection queries, then apply it unchanged to the evaluation set.
inline EvalResult task_best_baseline(const SimTask& task, const std::vector<Prompt>& pool,
                                     const SplitSpec& splits, const QueryStore& store,
                                     const std::vector<Query>& eval_queries,
                                     const EvalProtocol& protocol) {
  const auto [winner, collection_acc] =
      task_best_prompt(task, pool, store.subset(splits.collection));
  return evaluate_fixed_prompt(task, winner, eval_queries, protocol, &store,
                               &splits.train_eval);
}

// Per-query argmax-reward prompt from the dataset, earliest example breaking
// ties (which is the lowest pool prompt index for the initial data).
inline std::map<int64_t, const RewardedExample*> best_prompt_per_query(
    const OfflineDataset& dataset) {
  std::map<int64_t, const RewardedExample*> best;
  for (const auto& ex : dataset.examples) {
    auto [it, inserted] = best.try_emplace(ex.query_id, &ex);
    if (!inserted && ex.r_norm > it->second->r_norm) it->second = &ex;
  }
  return best;
}

// Nearest-neighbor prompt selection: encode the test query with the trained
// policy, match the cosine-nearest training query (ties to the lowest id),
// and reuse that query's highest-reward prompt from the dataset.
template <typename S>
EvalResult nn_baseline(const PolicyParams<S>& params, const Vocab& vocab,
                       const SimTask& task, const OfflineDataset& dataset,
                       const QueryStore& store, const std::vector<Query>& eval_queries,
                       const EvalProtocol& protocol,
                       const std::vector<int64_t>* demo_pool = nullptr) {
  if (dataset.examples.empty()) throw StateError("nn_baseline: empty dataset");

  const auto best = best_prompt_per_query(dataset);
  std::vector<int64_t> train_ids;
  std::vector<std::vector<double>> train_embeddings;
  for (const auto& [qid, ex] : best) {
    train_ids.push_back(qid);  // ascending, so ties go to the lowest id
    train_embeddings.push_back(embed_query(params, vocab, store.by_id(qid)));
  }

  return evaluate_with(
      task, eval_queries, protocol,
      [&](const Query& q) {
        const auto emb = embed_query(params, vocab, q);
        size_t nearest = 0;
        double best_sim = -2.0;
        for (size_t i = 0; i < train_ids.size(); ++i) {
          const double sim = cosine_similarity(emb, train_embeddings[i]);
          if (sim > best_sim) {
            best_sim = sim;
            nearest = i;
          }
        }
        return Prompt{best.at(train_ids[nearest])->prompt_tokens};
      },
      &store, demo_pool);
}

// Variants that need training: sft and rl_only swap the fine-tuning
// objective inside the full pipeline; no_mla keeps the schedule but trains
// every loop on the unaugmented initial dataset.
inline RunResult run_trained_baseline(const RunConfig& cfg, BaselineVariant variant,
                                      const std::optional<std::string>& out_dir = std::nullopt) {
  switch (variant) {
    case BaselineVariant::sft:
      return run_qpo(cfg, TrainVariant::sft, out_dir);
    case BaselineVariant::rl_only:
      return run_qpo(cfg, TrainVariant::rl_only, out_dir);
    case BaselineVariant::no_mla: {
      RunConfig no_aug = cfg;
      no_aug.augment_queries = 0;
      return run_qpo(no_aug, TrainVariant::qpo, out_dir, "no_mla");
    }
    default:
      throw ArgumentError("run_trained_baseline: variant has no training stage");
  }
}

}  // namespace qpo
