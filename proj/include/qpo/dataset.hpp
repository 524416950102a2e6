#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "qpo/common.hpp"
#include "qpo/rewards.hpp"
#include "qpo/simenv.hpp"

namespace qpo {

// ------------------------------------------------------------ records

struct RewardedExample {
  int64_t query_id = 0;
  std::vector<std::string> query_tokens;
  int topic = 0;  // analysis metadata only, never a policy input
  std::vector<std::string> prompt_tokens;
  int answer = 0;
  int gold = 0;
  double r_query = 0.0;
  double r_task = 0.0;
  double r_raw = 0.0;
  double r_norm = 0.0;
  int loop_id = 0;
  int shots = 0;

  bool operator==(const RewardedExample&) const = default;
};

struct ProvenanceEntry {
  int loop_id = 0;
  int64_t examples = 0;      // examples added by this loop (post-filter for loop 0)
  uint64_t interactions = 0; // target-model calls spent producing them
  int64_t evaluated = 0;     // pairs evaluated (pre-filter size for loop 0)

  bool operator==(const ProvenanceEntry&) const = default;
};

struct OfflineDataset {
  std::vector<RewardedExample> examples;  // sorted by (loop_id, insertion order)
  std::optional<Normalizer> normalizer;
  std::string task_fingerprint;
  std::vector<ProvenanceEntry> provenance;

  bool operator==(const OfflineDataset&) const = default;
};

// ------------------------------------------------------------ splits

struct SplitSpec {
  std::vector<int64_t> collection;  // 10% of train; all offline data comes from here
  std::vector<int64_t> train_eval;  // train minus collection; the demonstration pool
  std::vector<int64_t> dev;
  std::vector<int64_t> test;

  bool operator==(const SplitSpec&) const = default;
};

struct QueryStore {
  std::vector<Query> queries;  // indexed by id

  const Query& by_id(int64_t id) const {
    if (id < 0 || id >= static_cast<int64_t>(queries.size()))
      throw ArgumentError("QueryStore: unknown query id " + std::to_string(id));
    return queries[static_cast<size_t>(id)];
  }

  std::vector<Query> subset(const std::vector<int64_t>& ids) const {
    std::vector<Query> out;
    out.reserve(ids.size());
    for (int64_t id : ids) out.push_back(by_id(id));
    return out;
  }
};

// Generates n_train + n_dev + n_test distinct queries, balanced over topics
// (topic of query i is i mod C, so every contiguous slice stays balanced).
// The collection set is a seeded 10% sample of the training ids; the
// demonstration pool is train minus collection, so demos never leak dev/test.
inline std::pair<SplitSpec, QueryStore> make_splits(const SimTask& task, int n_train,
                                                    int n_dev, int n_test,
                                                    uint64_t rng_seed) {
  if (n_train < 10) throw ArgumentError("make_splits: n_train must be >= 10");
  if (n_dev < 0 || n_test < 0) throw ArgumentError("make_splits: negative split size");

  const int total = n_train + n_dev + n_test;
  QueryStore store;
  store.queries.reserve(static_cast<size_t>(total));
  QueryGen gen(task);
  std::unordered_set<uint64_t> seen;
  uint64_t draw = 0;
  for (int i = 0; i < total; ++i) {
    const int topic = i % task.topic_count;
    Query q;
    bool ok = false;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      q = gen.gen(topic, derive_seed(rng_seed, "splits.query", draw++));
      uint64_t h = 0xcbf29ce484222325ull;
      for (const auto& tok : q.tokens) h = fnv1a("\x1f", fnv1a(tok, h));
      if (seen.insert(h).second) {
        ok = true;
        break;
      }
    }
    if (!ok)
      throw GenerationError("make_splits: could not generate " + std::to_string(total) +
                            " distinct queries (stalled at " + std::to_string(i) + ")");
    q.id = i;
    store.queries.push_back(std::move(q));
  }

  SplitSpec spec;
  std::vector<int64_t> train_ids(static_cast<size_t>(n_train));
  for (int i = 0; i < n_train; ++i) train_ids[static_cast<size_t>(i)] = i;
  Rng shuffler(derive_seed(rng_seed, "splits.collection"));
  shuffler.shuffle(train_ids);
  const int n_collection = n_train / 10;
  spec.collection.assign(train_ids.begin(), train_ids.begin() + n_collection);
  spec.train_eval.assign(train_ids.begin() + n_collection, train_ids.end());
  std::sort(spec.collection.begin(), spec.collection.end());
  std::sort(spec.train_eval.begin(), spec.train_eval.end());
  for (int i = 0; i < n_dev; ++i) spec.dev.push_back(n_train + i);
  for (int i = 0; i < n_test; ++i) spec.test.push_back(n_train + n_dev + i);
  return {std::move(spec), std::move(store)};
}

// ------------------------------------------------------------ prompt pool

namespace detail {
inline std::vector<std::string> sorted_tokens(const std::vector<std::string>& tokens) {
  std::vector<std::string> s = tokens;
  std::sort(s.begin(), s.end());
  return s;
}
}  // namespace detail

// Programmatic pool synthesizer. Seed prompts cover each topic's full
// relevant set (round-robin) padded with random fillers; rewrite prompts
// apply 1-3 seeded edits (drop / add directive-or-filler / swap) to a random
// seed prompt. Deduplicated by token multiset.
inline std::vector<Prompt> gen_prompt_pool(const SimTask& task, int n_seed, int n_rewrite,
                                           uint64_t rng_seed) {
  if (n_seed < 1) throw ArgumentError("gen_prompt_pool: n_seed must be >= 1");
  if (n_rewrite < 0) throw ArgumentError("gen_prompt_pool: n_rewrite must be >= 0");
  if (n_seed < task.topic_count)
    std::fprintf(stderr,
                 "gen_prompt_pool: warning: n_seed=%d < topic_count=%d, "
                 "some topics get no seed prompt\n",
                 n_seed, task.topic_count);

  Rng rng(derive_seed(task.seed, "pool", rng_seed));
  std::set<std::vector<std::string>> dedup;
  std::vector<Prompt> pool;
  pool.reserve(static_cast<size_t>(n_seed + n_rewrite));

  const int max_fillers = task.max_prompt_len - task.relevant_size;
  for (int i = 0; i < n_seed; ++i) {
    const int topic = i % task.topic_count;
    bool ok = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      Prompt p{task.relevant_set(topic)};
      const int extra =
          max_fillers > 0 ? static_cast<int>(rng.below(static_cast<uint64_t>(max_fillers) + 1)) : 0;
      for (size_t j : rng.sample_without_replacement(task.filler_vocab.size(),
                                                     static_cast<size_t>(extra)))
        p.tokens.push_back(task.filler_vocab[j]);
      if (dedup.insert(detail::sorted_tokens(p.tokens)).second) {
        pool.push_back(std::move(p));
        ok = true;
        break;
      }
    }
    if (!ok)
      throw GenerationError("gen_prompt_pool: produced only " + std::to_string(pool.size()) +
                            " of " + std::to_string(n_seed) + " distinct seed prompts");
  }

  for (int i = 0; i < n_rewrite; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      Prompt p = pool[static_cast<size_t>(rng.below(static_cast<uint64_t>(n_seed)))];
      const int edits = 1 + static_cast<int>(rng.below(3));
      for (int e = 0; e < edits; ++e) {
        std::vector<int> applicable;
        const auto len = static_cast<int>(p.tokens.size());
        if (len >= 2) applicable.push_back(0);                 // drop
        if (len < task.max_prompt_len) applicable.push_back(1);  // add
        if (len >= 2) applicable.push_back(2);                 // swap
        const int kind = applicable[static_cast<size_t>(rng.below(applicable.size()))];
        if (kind == 0) {
          p.tokens.erase(p.tokens.begin() +
                         static_cast<long>(rng.below(static_cast<uint64_t>(len))));
        } else if (kind == 1) {
          // Directives dominate the additions; this is what pushes foreign
          // directive tokens into the rewritten pool.
          std::string tok;
          if (rng.uniform() < 0.7) {
            tok = task.directive_vocab[static_cast<size_t>(
                rng.below(task.directive_vocab.size()))];
          } else {
            tok = task.filler_vocab[static_cast<size_t>(rng.below(task.filler_vocab.size()))];
          }
          p.tokens.insert(
              p.tokens.begin() + static_cast<long>(rng.below(static_cast<uint64_t>(len) + 1)),
              std::move(tok));
        } else {
          const auto a = static_cast<size_t>(rng.below(static_cast<uint64_t>(len)));
          const auto b = static_cast<size_t>(rng.below(static_cast<uint64_t>(len)));
          std::swap(p.tokens[a], p.tokens[b]);
        }
      }
      if (dedup.insert(detail::sorted_tokens(p.tokens)).second) {
        pool.push_back(std::move(p));
        ok = true;
        break;
      }
    }
    if (!ok)
      throw GenerationError("gen_prompt_pool: produced only " + std::to_string(pool.size()) +
                            " of " + std::to_string(n_seed + n_rewrite) +
                            " distinct prompts");
  }
  return pool;
}

// ------------------------------------------------------------ filtering

// Keeps exactly the examples at or above the expert cut on the normalized
// scale. Per-loop provenance example counts are recomputed; interaction
// counts are spent and stay as recorded.
inline OfflineDataset filter_expert(const OfflineDataset& dataset,
                                    double threshold_fraction = 0.667) {
  if (!dataset.normalizer) throw StateError("filter_expert: dataset is not normalized");
  const double cut = expert_cut(threshold_fraction);
  OfflineDataset out;
  out.normalizer = dataset.normalizer;
  out.task_fingerprint = dataset.task_fingerprint;
  out.provenance = dataset.provenance;
  std::map<int, int64_t> kept_per_loop;
  for (const auto& ex : dataset.examples) {
    if (ex.r_norm >= cut) {
      out.examples.push_back(ex);
      ++kept_per_loop[ex.loop_id];
    }
  }
  for (auto& entry : out.provenance) {
    auto it = kept_per_loop.find(entry.loop_id);
    entry.examples = it == kept_per_loop.end() ? 0 : it->second;
  }
  return out;
}

// ------------------------------------------------------------ initial build

struct GroupSpec {
  int prompt_count = 0;
  int query_count = 0;
};

inline std::vector<GroupSpec> parse_group_plan(const std::string& text) {
  std::vector<GroupSpec> plan;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos)
      throw ArgumentError("parse_group_plan: expected PROMPTSxQUERIES, got '" + item + "'");
    GroupSpec g;
    try {
      g.prompt_count = std::stoi(item.substr(0, x));
      g.query_count = std::stoi(item.substr(x + 1));
    } catch (const std::exception&) {
      throw ArgumentError("parse_group_plan: bad group '" + item + "'");
    }
    if (g.prompt_count < 1 || g.query_count < 1)
      throw ArgumentError("parse_group_plan: counts must be positive in '" + item + "'");
    plan.push_back(g);
  }
  if (plan.empty()) throw ArgumentError("parse_group_plan: empty plan");
  return plan;
}

inline std::vector<Demonstration> sample_demos(const SimTask& task, const QueryStore& store,
                                               const std::vector<int64_t>& demo_pool,
                                               int shots, uint64_t seed) {
  if (shots > static_cast<int>(demo_pool.size()))
    throw ArgumentError("sample_demos: demo pool smaller than shot count");
  Rng rng(seed);
  std::vector<Demonstration> demos;
  demos.reserve(static_cast<size_t>(shots));
  for (size_t j :
       rng.sample_without_replacement(demo_pool.size(), static_cast<size_t>(shots))) {
    const Query& q = store.by_id(demo_pool[j]);
    demos.push_back(Demonstration{q, q.topic});
  }
  return demos;
}

// Evaluates every (query, prompt) pair of each group on the target model and
// turns the by-products into rewarded examples. Groups partition the pool in
// order; each group samples its queries from the collection set (overlap
// across groups happens naturally). Fits the normalizer on all raw rewards,
// then drops the sub-expert examples unless apply_filter is off.
inline OfflineDataset build_initial_dataset(const SimTask& task, const std::vector<Prompt>& pool,
                                            const SplitSpec& splits, const QueryStore& store,
                                            const std::vector<GroupSpec>& plan, int shots,
                                            int k_combos, uint64_t rng_seed,
                                            bool apply_filter = true) {
  int64_t planned = 0;
  for (const auto& g : plan) planned += g.prompt_count;
  if (planned != static_cast<int64_t>(pool.size()))
    throw ArgumentError("build_initial_dataset: group plan covers " + std::to_string(planned) +
                        " prompts but the pool has " + std::to_string(pool.size()));
  if (splits.collection.empty())
    throw StateError("build_initial_dataset: empty collection set");
  if (shots < 0 || (shots > 0 && k_combos < 1))
    throw ArgumentError("build_initial_dataset: bad shots/k_combos");

  StageScope stage(Stage::initial_build);
  const uint64_t interactions_before = current_ledger().count(Stage::initial_build);

  OfflineDataset ds;
  ds.task_fingerprint = task_fingerprint(task);

  size_t prompt_cursor = 0;
  for (size_t g = 0; g < plan.size(); ++g) {
    const auto& group = plan[g];
    if (group.query_count > static_cast<int>(splits.collection.size()))
      throw GenerationError("build_initial_dataset: group wants " +
                            std::to_string(group.query_count) +
                            " distinct queries but the collection set has " +
                            std::to_string(splits.collection.size()));
    Rng grng(derive_seed(rng_seed, "build.group", g));
    std::vector<int64_t> qids;
    for (size_t j : grng.sample_without_replacement(splits.collection.size(),
                                                    static_cast<size_t>(group.query_count)))
      qids.push_back(splits.collection[j]);

    const size_t first = ds.examples.size();
    std::vector<double> prompt_correct_sum(static_cast<size_t>(group.prompt_count), 0.0);

    for (int64_t qid : qids) {
      const Query& q = store.by_id(qid);
      for (int pi = 0; pi < group.prompt_count; ++pi) {
        const Prompt& prompt = pool[prompt_cursor + static_cast<size_t>(pi)];
        RewardedExample ex;
        ex.query_id = q.id;
        ex.query_tokens = q.tokens;
        ex.topic = q.topic;
        ex.prompt_tokens = prompt.tokens;
        ex.gold = q.topic;
        ex.loop_id = 0;
        ex.shots = shots;
        double pair_correct = 0.0;
        if (shots == 0) {
          const SimResult r = answer(task, prompt, {}, q);
          ex.answer = r.answer;
          pair_correct = r.answer == q.topic ? 1.0 : 0.0;
          ex.r_query = reward_query_zero_shot(r.answer == q.topic, r.ppl);
        } else {
          std::vector<int> flags;
          for (int k = 0; k < k_combos; ++k) {
            const auto demos =
                sample_demos(task, store, splits.train_eval, shots,
                             derive_seed(rng_seed, "build.demos",
                                         static_cast<uint64_t>(qid) * 1000 +
                                             static_cast<uint64_t>(k)));
            const SimResult r = answer(task, prompt, demos, q);
            flags.push_back(r.answer == q.topic ? 1 : 0);
            ex.answer = r.answer;  // last combo's answer, kept as a sample
          }
          ex.r_query = reward_query(flags, 0.0, RewardMode::few_shot);
          pair_correct = ex.r_query;
        }
        prompt_correct_sum[static_cast<size_t>(pi)] += pair_correct;
        ds.examples.push_back(std::move(ex));
      }
    }

    // Task-level reward of each prompt: mean correctness over the queries it
    // was evaluated on in this group.
    for (size_t i = first; i < ds.examples.size(); ++i) {
      const size_t pi = (i - first) % static_cast<size_t>(group.prompt_count);
      ds.examples[i].r_task = prompt_correct_sum[pi] / static_cast<double>(group.query_count);
      ds.examples[i].r_raw = reward_overall(ds.examples[i].r_query, ds.examples[i].r_task);
    }
    prompt_cursor += static_cast<size_t>(group.prompt_count);
  }

  std::vector<double> raw;
  raw.reserve(ds.examples.size());
  for (const auto& ex : ds.examples) raw.push_back(ex.r_raw);
  auto [normed, norm] = minmax_fit(raw);
  for (size_t i = 0; i < ds.examples.size(); ++i) ds.examples[i].r_norm = normed[i];

  uint64_t fp = fnv1a(ds.task_fingerprint);
  fp = fnv1a_u64(static_cast<uint64_t>(ds.examples.size()), fp);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
  norm.fitted_on = buf;
  ds.normalizer = norm;

  const int64_t evaluated = static_cast<int64_t>(ds.examples.size());
  const uint64_t interactions =
      current_ledger().count(Stage::initial_build) - interactions_before;
  if (apply_filter) ds = filter_expert(ds);
  ds.provenance.clear();
  ds.provenance.push_back(ProvenanceEntry{0, static_cast<int64_t>(ds.examples.size()),
                                          interactions, evaluated});
  return ds;
}

// ------------------------------------------------------------ persistence

namespace detail {

inline void append_json_string(std::string& out, const std::string& s) {
  out += '"';
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  out += '"';
}

inline void append_token_array(std::string& out, const std::vector<std::string>& tokens) {
  out += '[';
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ',';
    append_json_string(out, tokens[i]);
  }
  out += ']';
}

inline std::string example_line(const RewardedExample& e) {
  std::string s = "{\"query_id\":" + std::to_string(e.query_id) + ",\"query_tokens\":";
  append_token_array(s, e.query_tokens);
  s += ",\"topic\":" + std::to_string(e.topic) + ",\"prompt_tokens\":";
  append_token_array(s, e.prompt_tokens);
  s += ",\"answer\":" + std::to_string(e.answer);
  s += ",\"gold\":" + std::to_string(e.gold);
  s += ",\"r_query\":" + format_real(e.r_query);
  s += ",\"r_task\":" + format_real(e.r_task);
  s += ",\"r_raw\":" + format_real(e.r_raw);
  s += ",\"r_norm\":" + format_real(e.r_norm);
  s += ",\"loop_id\":" + std::to_string(e.loop_id);
  s += ",\"shots\":" + std::to_string(e.shots);
  s += "}";
  return s;
}

inline std::string meta_line(const OfflineDataset& ds) {
  std::string s = "{\"__meta__\":{\"task_fingerprint\":";
  append_json_string(s, ds.task_fingerprint);
  s += ",\"normalizer\":";
  if (ds.normalizer) {
    s += "{\"r_min\":" + format_real(ds.normalizer->r_min) +
         ",\"r_max\":" + format_real(ds.normalizer->r_max) + ",\"fitted_on\":";
    append_json_string(s, ds.normalizer->fitted_on);
    s += "}";
  } else {
    s += "null";
  }
  s += ",\"provenance\":[";
  for (size_t i = 0; i < ds.provenance.size(); ++i) {
    const auto& p = ds.provenance[i];
    if (i) s += ',';
    s += "{\"loop_id\":" + std::to_string(p.loop_id) +
         ",\"examples\":" + std::to_string(p.examples) +
         ",\"interactions\":" + std::to_string(p.interactions) +
         ",\"evaluated\":" + std::to_string(p.evaluated) + "}";
  }
  s += "]}}";
  return s;
}

template <typename T>
T require_field(const nlohmann::json& j, const std::string& file, long line,
                const char* field) {
  if (!j.contains(field)) throw ParseError(file, line, field, "missing");
  try {
    return j.at(field).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(file, line, field, e.what());
  }
}

}  // namespace detail

inline void save_dataset(const OfflineDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_dataset: cannot open " + path);
  out << detail::meta_line(ds) << "\n";
  for (const auto& e : ds.examples) out << detail::example_line(e) << "\n";
}

inline OfflineDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_dataset: cannot open " + path);
  OfflineDataset ds;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path, line_no, "<line>", e.what());
    }
    if (line_no == 1) {
      if (!j.contains("__meta__")) throw ParseError(path, 1, "__meta__", "missing header");
      const auto& m = j.at("__meta__");
      ds.task_fingerprint =
          detail::require_field<std::string>(m, path, line_no, "task_fingerprint");
      if (!m.contains("normalizer")) throw ParseError(path, 1, "normalizer", "missing");
      if (!m.at("normalizer").is_null()) {
        const auto& n = m.at("normalizer");
        Normalizer norm;
        norm.r_min = detail::require_field<double>(n, path, line_no, "r_min");
        norm.r_max = detail::require_field<double>(n, path, line_no, "r_max");
        norm.fitted_on = detail::require_field<std::string>(n, path, line_no, "fitted_on");
        ds.normalizer = norm;
      }
      for (const auto& p :
           detail::require_field<nlohmann::json>(m, path, line_no, "provenance")) {
        ProvenanceEntry entry;
        entry.loop_id = detail::require_field<int>(p, path, line_no, "loop_id");
        entry.examples = detail::require_field<int64_t>(p, path, line_no, "examples");
        entry.interactions = detail::require_field<uint64_t>(p, path, line_no, "interactions");
        entry.evaluated = detail::require_field<int64_t>(p, path, line_no, "evaluated");
        ds.provenance.push_back(entry);
      }
      continue;
    }
    RewardedExample e;
    e.query_id = detail::require_field<int64_t>(j, path, line_no, "query_id");
    e.query_tokens =
        detail::require_field<std::vector<std::string>>(j, path, line_no, "query_tokens");
    e.topic = detail::require_field<int>(j, path, line_no, "topic");
    e.prompt_tokens =
        detail::require_field<std::vector<std::string>>(j, path, line_no, "prompt_tokens");
    e.answer = detail::require_field<int>(j, path, line_no, "answer");
    e.gold = detail::require_field<int>(j, path, line_no, "gold");
    e.r_query = detail::require_field<double>(j, path, line_no, "r_query");
    e.r_task = detail::require_field<double>(j, path, line_no, "r_task");
    e.r_raw = detail::require_field<double>(j, path, line_no, "r_raw");
    e.r_norm = detail::require_field<double>(j, path, line_no, "r_norm");
    e.loop_id = detail::require_field<int>(j, path, line_no, "loop_id");
    e.shots = detail::require_field<int>(j, path, line_no, "shots");
    ds.examples.push_back(std::move(e));
  }
  if (line_no == 0) throw ParseError(path, 0, "__meta__", "empty file");
  return ds;
}

}  // namespace qpo
