#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "qpo/common.hpp"
#include "qpo/rewards.hpp"

namespace qpo {

// ------------------------------------------------------------ interactions
//
// Every call to answer() increments the current ledger, tagged with the
// active pipeline stage. The process-global ledger is the default; a run
// can bind its own ledger for the current thread (LedgerScope) so that
// concurrent runs account independently.

enum class Stage : int {
  other = 0,
  initial_build,
  augment,
  eval_dev,
  eval_test,
  oracle,
};
constexpr int kStageCount = 6;

inline const char* stage_name(Stage s) {
  static constexpr std::array<const char*, kStageCount> names = {
      "other", "initial_build", "augment", "eval_dev", "eval_test", "oracle"};
  return names[static_cast<int>(s)];
}

class InteractionLedger {
 public:
  void record(Stage s) { counts_[static_cast<int>(s)].fetch_add(1, std::memory_order_relaxed); }

  uint64_t count(Stage s) const {
    return counts_[static_cast<int>(s)].load(std::memory_order_relaxed);
  }

  uint64_t total() const {
    uint64_t t = 0;
    for (const auto& c : counts_) t += c.load(std::memory_order_relaxed);
    return t;
  }

  void reset() {
    for (auto& c : counts_) c.store(0, std::memory_order_relaxed);
  }

 private:
  std::array<std::atomic<uint64_t>, kStageCount> counts_{};
};

inline InteractionLedger& global_ledger() {
  static InteractionLedger ledger;
  return ledger;
}

namespace detail {
inline InteractionLedger*& current_ledger_slot() {
  thread_local InteractionLedger* slot = nullptr;
  return slot;
}
inline Stage& current_stage_slot() {
  thread_local Stage stage = Stage::other;
  return stage;
}
}  // namespace detail

inline InteractionLedger& current_ledger() {
  InteractionLedger* p = detail::current_ledger_slot();
  return p ? *p : global_ledger();
}

class LedgerScope {
 public:
  explicit LedgerScope(InteractionLedger& ledger) : prev_(detail::current_ledger_slot()) {
    detail::current_ledger_slot() = &ledger;
  }
  ~LedgerScope() { detail::current_ledger_slot() = prev_; }
  LedgerScope(const LedgerScope&) = delete;
  LedgerScope& operator=(const LedgerScope&) = delete;

 private:
  InteractionLedger* prev_;
};

class StageScope {
 public:
  explicit StageScope(Stage s) : prev_(detail::current_stage_slot()) {
    detail::current_stage_slot() = s;
  }
  ~StageScope() { detail::current_stage_slot() = prev_; }
  StageScope(const StageScope&) = delete;
  StageScope& operator=(const StageScope&) = delete;

 private:
  Stage prev_;
};

// ------------------------------------------------------------ domain types

enum class TokenKind : int { directive = 0, filler, indicator, noise };

struct TokenInfo {
  TokenKind kind;
  int topic;  // directive: owning relevant set; indicator: owning topic; else -1
  int index;  // position within its canonical vocabulary list
};

struct SimTaskOverrides {
  std::optional<int> topic_count;
  std::optional<int> relevant_size;
  std::optional<int> directive_count;  // must equal topic_count * relevant_size
  std::optional<int> filler_count;
  std::optional<int> indicators_per_topic;
  std::optional<int> noise_count;
  std::optional<double> foreign_penalty;
  std::optional<double> correct_threshold;
  std::optional<double> demo_bonus;
  std::optional<double> ppl_scale;
  std::optional<int> max_prompt_len;
};

// The deterministic synthetic target model. Queries carry indicator tokens
// of one topic; an answer is correct iff the prompt covers enough of that
// topic's relevant directive set.
struct SimTask {
  uint64_t seed = 0;
  int topic_count = 8;    // C
  int relevant_size = 3;  // s
  std::vector<std::string> directive_vocab;            // C*s, S(t) = [s*t, s*t+s)
  std::vector<std::string> filler_vocab;               // 16
  std::vector<std::string> indicator_vocab;            // canonical order, C*4
  std::vector<std::vector<std::string>> indicator_sets;  // I(t), disjoint, 4 each
  std::vector<std::string> noise_vocab;                // 16
  double foreign_penalty = 0.5;    // beta
  double correct_threshold = 0.6;  // theta
  double demo_bonus = 0.1;         // delta
  double ppl_scale = 5.0;
  int max_prompt_len = 6;  // m_max

  std::unordered_map<std::string, TokenInfo> token_info;

  const std::vector<std::string>& relevant_set_tokens() const { return directive_vocab; }

  // S(t) as a token list.
  std::vector<std::string> relevant_set(int topic) const {
    if (topic < 0 || topic >= topic_count)
      throw ArgumentError("relevant_set: topic out of range");
    std::vector<std::string> out;
    for (int k = 0; k < relevant_size; ++k)
      out.push_back(directive_vocab[static_cast<size_t>(topic * relevant_size + k)]);
    return out;
  }

  const TokenInfo* lookup(const std::string& tok) const {
    auto it = token_info.find(tok);
    return it == token_info.end() ? nullptr : &it->second;
  }
};

struct Query {
  int64_t id = 0;
  std::vector<std::string> tokens;  // 6: 3 indicators of `topic` + 3 noise, shuffled
  int topic = 0;                    // gold metadata, never a policy input
};

struct Prompt {
  std::vector<std::string> tokens;

  bool operator==(const Prompt&) const = default;
};

struct Demonstration {
  Query query;
  int gold = 0;
};

struct SimResult {
  int answer = 0;
  double ppl = 1.0;
  double m_eff = 0.0;  // few-shot adjusted match, diagnostic
};

// ------------------------------------------------------------ construction

inline void rebuild_token_info(SimTask& task) {
  task.token_info.clear();
  for (int i = 0; i < static_cast<int>(task.directive_vocab.size()); ++i)
    task.token_info[task.directive_vocab[static_cast<size_t>(i)]] =
        TokenInfo{TokenKind::directive, i / task.relevant_size, i};
  for (int i = 0; i < static_cast<int>(task.filler_vocab.size()); ++i)
    task.token_info[task.filler_vocab[static_cast<size_t>(i)]] =
        TokenInfo{TokenKind::filler, -1, i};
  for (int i = 0; i < static_cast<int>(task.indicator_vocab.size()); ++i)
    task.token_info[task.indicator_vocab[static_cast<size_t>(i)]] =
        TokenInfo{TokenKind::indicator, -1, i};
  for (int t = 0; t < task.topic_count; ++t)
    for (const auto& tok : task.indicator_sets[static_cast<size_t>(t)])
      task.token_info[tok].topic = t;
  for (int i = 0; i < static_cast<int>(task.noise_vocab.size()); ++i)
    task.token_info[task.noise_vocab[static_cast<size_t>(i)]] =
        TokenInfo{TokenKind::noise, -1, i};
}

// Deterministic function of (seed, overrides). Vocabularies are canonical
// token lists; the indicator-to-topic assignment is a seeded shuffle.
inline SimTask gen_task(uint64_t seed, const SimTaskOverrides& ov = {}) {
  SimTask task;
  task.seed = seed;
  task.topic_count = ov.topic_count.value_or(8);
  task.relevant_size = ov.relevant_size.value_or(3);
  if (task.topic_count < 2) throw ConfigError("gen_task: topic_count must be >= 2");
  if (task.relevant_size < 1) throw ConfigError("gen_task: relevant_size must be >= 1");

  const int directive_count = ov.directive_count.value_or(task.topic_count * task.relevant_size);
  if (directive_count != task.topic_count * task.relevant_size)
    throw ConfigError(
        "gen_task: directive vocabulary size " + std::to_string(directive_count) +
        " does not equal topic_count*relevant_size = " +
        std::to_string(task.topic_count * task.relevant_size) +
        " (relevant sets must partition the directive vocabulary)");

  const int filler_count = ov.filler_count.value_or(16);
  const int per_topic = ov.indicators_per_topic.value_or(4);
  const int noise_count = ov.noise_count.value_or(16);
  if (filler_count < 1) throw ConfigError("gen_task: filler_count must be >= 1");
  if (per_topic < 1) throw ConfigError("gen_task: indicators_per_topic must be >= 1");
  if (noise_count < 3) throw ConfigError("gen_task: noise_count must be >= 3");

  task.foreign_penalty = ov.foreign_penalty.value_or(0.5);
  task.correct_threshold = ov.correct_threshold.value_or(0.6);
  task.demo_bonus = ov.demo_bonus.value_or(0.1);
  task.ppl_scale = ov.ppl_scale.value_or(5.0);
  task.max_prompt_len = ov.max_prompt_len.value_or(6);
  if (!(task.correct_threshold > 0.0 && task.correct_threshold <= 1.0))
    throw ConfigError("gen_task: correct_threshold must be in (0, 1]");
  if (!(task.ppl_scale >= 0.0)) throw ConfigError("gen_task: ppl_scale must be >= 0");
  if (task.max_prompt_len < 1) throw ConfigError("gen_task: max_prompt_len must be >= 1");
  if (task.max_prompt_len >= task.topic_count * task.relevant_size)
    throw ConfigError(
        "gen_task: max_prompt_len must be < topic_count*relevant_size "
        "(otherwise a universal prompt could exist)");

  for (int i = 0; i < directive_count; ++i) task.directive_vocab.push_back("d" + std::to_string(i));
  for (int i = 0; i < filler_count; ++i) task.filler_vocab.push_back("f" + std::to_string(i));
  for (int i = 0; i < task.topic_count * per_topic; ++i)
    task.indicator_vocab.push_back("i" + std::to_string(i));
  for (int i = 0; i < noise_count; ++i) task.noise_vocab.push_back("n" + std::to_string(i));

  // Seeded assignment of indicator tokens to topics; sets stay disjoint.
  std::vector<std::string> shuffled = task.indicator_vocab;
  Rng rng(derive_seed(seed, "task.indicator_assignment"));
  rng.shuffle(shuffled);
  task.indicator_sets.assign(static_cast<size_t>(task.topic_count), {});
  for (int t = 0; t < task.topic_count; ++t)
    for (int k = 0; k < per_topic; ++k)
      task.indicator_sets[static_cast<size_t>(t)].push_back(
          shuffled[static_cast<size_t>(t * per_topic + k)]);

  rebuild_token_info(task);
  return task;
}

// Transfer variant: same vocabularies and topic structure, perturbed rules.
inline SimTask make_variant(const SimTask& base, std::optional<double> correct_threshold,
                            std::optional<double> foreign_penalty) {
  SimTask v = base;
  if (correct_threshold) v.correct_threshold = *correct_threshold;
  if (foreign_penalty) v.foreign_penalty = *foreign_penalty;
  return v;
}

// ------------------------------------------------------------ queries

// Holds the monotone id counter; token content depends only on
// (task, topic, rng_seed).
class QueryGen {
 public:
  explicit QueryGen(const SimTask& task, int64_t first_id = 0)
      : task_(&task), next_id_(first_id) {}

  Query gen(std::optional<int> topic, uint64_t rng_seed) {
    Rng rng(derive_seed(task_->seed, "query", rng_seed));
    Query q;
    q.id = next_id_++;
    q.topic = topic ? *topic : static_cast<int>(rng.below(static_cast<uint64_t>(task_->topic_count)));
    if (q.topic < 0 || q.topic >= task_->topic_count)
      throw ArgumentError("gen_query: topic out of range");

    const auto& ind = task_->indicator_sets[static_cast<size_t>(q.topic)];
    for (size_t j : rng.sample_without_replacement(ind.size(), 3)) q.tokens.push_back(ind[j]);
    for (size_t j : rng.sample_without_replacement(task_->noise_vocab.size(), 3))
      q.tokens.push_back(task_->noise_vocab[j]);
    rng.shuffle(q.tokens);
    return q;
  }

 private:
  const SimTask* task_;
  int64_t next_id_;
};

// Topic is recoverable from the tokens by indicator-set intersection.
inline int recover_topic(const SimTask& task, const std::vector<std::string>& tokens) {
  std::vector<int> hits(static_cast<size_t>(task.topic_count), 0);
  for (const auto& tok : tokens) {
    const TokenInfo* info = task.lookup(tok);
    if (info && info->kind == TokenKind::indicator) ++hits[static_cast<size_t>(info->topic)];
  }
  int best = -1;
  for (int t = 0; t < task.topic_count; ++t)
    if (hits[static_cast<size_t>(t)] >= 3) best = t;
  if (best < 0) throw ArgumentError("recover_topic: no topic with 3 indicator tokens");
  return best;
}

// ------------------------------------------------------------ the target model

// Zero-shot match score in [0,1]: relevant coverage minus the foreign
// directive penalty. Pure total function.
inline double effective_match(const SimTask& task, const Query& query, const Prompt& prompt) {
  std::unordered_set<std::string> seen;
  int relevant = 0;
  int foreign = 0;
  for (const auto& tok : prompt.tokens) {
    if (!seen.insert(tok).second) continue;
    const TokenInfo* info = task.lookup(tok);
    if (info && info->kind == TokenKind::directive) {
      if (info->topic == query.topic)
        ++relevant;
      else
        ++foreign;
    }
  }
  const double s = static_cast<double>(task.relevant_size);
  const double m = static_cast<double>(relevant) / s -
                   task.foreign_penalty * static_cast<double>(foreign) / s;
  return std::clamp(m, 0.0, 1.0);
}

inline uint64_t stable_answer_hash(int64_t query_id, const Prompt& prompt, uint64_t task_seed) {
  uint64_t h = fnv1a_u64(static_cast<uint64_t>(query_id));
  for (const auto& tok : prompt.tokens) {
    h = fnv1a(tok, h);
    h = fnv1a("\x1f", h);
  }
  return fnv1a_u64(task_seed, h);
}

// One target-model call. Deterministic; increments the interaction ledger.
inline SimResult answer(const SimTask& task, const Prompt& prompt,
                        const std::vector<Demonstration>& demos, const Query& query) {
  current_ledger().record(detail::current_stage_slot());

  double m = effective_match(task, query, prompt);
  for (const auto& d : demos)
    m += (d.gold == query.topic) ? task.demo_bonus : -task.demo_bonus / 2.0;
  m = std::clamp(m, 0.0, 1.0);

  SimResult r;
  r.m_eff = m;
  r.ppl = 1.0 + task.ppl_scale * (1.0 - m);
  if (m >= task.correct_threshold) {
    r.answer = query.topic;
  } else {
    const uint64_t h = stable_answer_hash(query.id, prompt, task.seed);
    const int c = task.topic_count;
    r.answer = static_cast<int>(
        (static_cast<uint64_t>(query.topic) + 1 + h % static_cast<uint64_t>(c - 1)) %
        static_cast<uint64_t>(c));
  }
  return r;
}

// ------------------------------------------------------------ oracles

// Exhaustive zero-shot evaluation of the pool; argmax of the query-level
// reward, ties to the lowest pool index.
inline std::pair<Prompt, double> oracle_best(const SimTask& task, const Query& query,
                                             const std::vector<Prompt>& pool) {
  if (pool.empty()) throw ArgumentError("oracle_best: empty prompt pool");
  StageScope stage(Stage::oracle);
  size_t best = 0;
  double best_reward = 0.0;
  for (size_t i = 0; i < pool.size(); ++i) {
    const SimResult r = answer(task, pool[i], {}, query);
    const double reward = reward_query_zero_shot(r.answer == query.topic, r.ppl);
    if (i == 0 || reward > best_reward) {
      best = i;
      best_reward = reward;
    }
  }
  return {pool[best], best_reward};
}

// The per-query ceiling: the exact relevant set of the query's topic.
inline std::pair<Prompt, double> oracle_ceiling(const SimTask& task, const Query& query) {
  StageScope stage(Stage::oracle);
  Prompt p{task.relevant_set(query.topic)};
  const SimResult r = answer(task, p, {}, query);
  return {std::move(p), reward_query_zero_shot(r.answer == query.topic, r.ppl)};
}

// Task-level baseline: the single pool prompt with the best mean zero-shot
// correctness over the query set.
inline std::pair<Prompt, double> task_best_prompt(const SimTask& task,
                                                  const std::vector<Prompt>& pool,
                                                  const std::vector<Query>& queries) {
  if (pool.empty()) throw ArgumentError("task_best_prompt: empty prompt pool");
  if (queries.empty()) throw ArgumentError("task_best_prompt: empty query set");
  StageScope stage(Stage::oracle);
  size_t best = 0;
  double best_acc = -1.0;
  for (size_t i = 0; i < pool.size(); ++i) {
    int correct = 0;
    for (const auto& q : queries)
      if (answer(task, pool[i], {}, q).answer == q.topic) ++correct;
    const double acc = static_cast<double>(correct) / static_cast<double>(queries.size());
    if (acc > best_acc) {
      best = i;
      best_acc = acc;
    }
  }
  return {pool[best], best_acc};
}

// ------------------------------------------------------------ serialization

inline nlohmann::ordered_json task_to_json(const SimTask& task) {
  nlohmann::ordered_json j;
  j["seed"] = task.seed;
  j["topic_count"] = task.topic_count;
  j["relevant_size"] = task.relevant_size;
  j["directive_vocab"] = task.directive_vocab;
  j["filler_vocab"] = task.filler_vocab;
  j["indicator_vocab"] = task.indicator_vocab;
  j["indicator_sets"] = task.indicator_sets;
  j["noise_vocab"] = task.noise_vocab;
  j["foreign_penalty"] = task.foreign_penalty;
  j["correct_threshold"] = task.correct_threshold;
  j["demo_bonus"] = task.demo_bonus;
  j["ppl_scale"] = task.ppl_scale;
  j["max_prompt_len"] = task.max_prompt_len;
  return j;
}

inline std::string task_fingerprint(const SimTask& task) {
  const std::string s = task_to_json(task).dump();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(s)));
  return buf;
}

inline void save_task(const SimTask& task, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_task: cannot open " + path);
  out << task_to_json(task).dump(2) << "\n";
}

inline SimTask load_task(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_task: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path, 0, "<json>", e.what());
  }
  SimTask task;
  try {
    task.seed = j.at("seed").get<uint64_t>();
    task.topic_count = j.at("topic_count").get<int>();
    task.relevant_size = j.at("relevant_size").get<int>();
    task.directive_vocab = j.at("directive_vocab").get<std::vector<std::string>>();
    task.filler_vocab = j.at("filler_vocab").get<std::vector<std::string>>();
    task.indicator_vocab = j.at("indicator_vocab").get<std::vector<std::string>>();
    task.indicator_sets = j.at("indicator_sets").get<std::vector<std::vector<std::string>>>();
    task.noise_vocab = j.at("noise_vocab").get<std::vector<std::string>>();
    task.foreign_penalty = j.at("foreign_penalty").get<double>();
    task.correct_threshold = j.at("correct_threshold").get<double>();
    task.demo_bonus = j.at("demo_bonus").get<double>();
    task.ppl_scale = j.at("ppl_scale").get<double>();
    task.max_prompt_len = j.at("max_prompt_len").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path, 0, "<task>", e.what());
  }
  if (static_cast<int>(task.directive_vocab.size()) != task.topic_count * task.relevant_size)
    throw ParseError(path, 0, "directive_vocab",
                     "size does not equal topic_count*relevant_size");
  rebuild_token_info(task);
  return task;
}

}  // namespace qpo
