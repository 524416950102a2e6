#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qpo/common.hpp"
#include "qpo/dataset.hpp"
#include "qpo/policy.hpp"
#include "qpo/simenv.hpp"
#include "qpo/train.hpp"

namespace qpo {

// Every tunable of the pipeline, with a flat `key = value` text
// representation whose serialization is bit-exact (17 significant digits for
// reals, fixed key order).
struct RunConfig {
  // task
  uint64_t task_seed = 42;
  int topics = 8;
  int relevant_size = 3;
  double foreign_penalty = 0.5;
  double correct_threshold = 0.6;
  double demo_bonus = 0.1;
  double ppl_scale = 5.0;
  int max_prompt_len = 6;
  // splits
  int n_train = 2000;
  int n_dev = 400;
  int n_test = 400;
  // pool
  int pool_n_seed = 30;
  int pool_n_rewrite = 120;
  // data
  std::string groups = "40x100,40x100,40x100,30x100";
  int shots = 0;
  int k_combos = 3;
  // model
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq = 32;
  // train
  int batch_size = 128;
  double lr1 = 1e-3;
  double lr_rest = 1e-4;
  int epochs1 = 100;
  int epochs_rest = 20;
  double weight_decay = 1e-4;
  double lambda = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // loop
  int loops = 4;
  int augment_queries = 1000;
  double condition_reward = 100.0;
  int top_k = 2;
  double top_p = 0.9;
  // eval
  int eval_shots = 0;
  int eval_k = 3;
  // master
  uint64_t master_seed = 1;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline int64_t parse_int(const std::string& v) {
  size_t pos = 0;
  const int64_t out = std::stoll(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return out;
}

inline double parse_double(const std::string& v) {
  size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return out;
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    const auto add_u64 = [&](const std::string& key, uint64_t RunConfig::* p) {
      f.push_back({key, [p](const RunConfig& c) { return std::to_string(c.*p); },
                   [p](RunConfig& c, const std::string& v) {
                     c.*p = static_cast<uint64_t>(parse_int(v));
                   }});
    };
    const auto add_int = [&](const std::string& key, int RunConfig::* p) {
      f.push_back({key, [p](const RunConfig& c) { return std::to_string(c.*p); },
                   [p](RunConfig& c, const std::string& v) {
                     c.*p = static_cast<int>(parse_int(v));
                   }});
    };
    const auto add_real = [&](const std::string& key, double RunConfig::* p) {
      f.push_back({key, [p](const RunConfig& c) { return format_real(c.*p); },
                   [p](RunConfig& c, const std::string& v) { c.*p = parse_double(v); }});
    };
    const auto add_str = [&](const std::string& key, std::string RunConfig::* p) {
      f.push_back({key, [p](const RunConfig& c) { return c.*p; },
                   [p](RunConfig& c, const std::string& v) { c.*p = v; }});
    };

    add_u64("task.seed", &RunConfig::task_seed);
    add_int("task.topics", &RunConfig::topics);
    add_int("task.relevant_size", &RunConfig::relevant_size);
    add_real("task.foreign_penalty", &RunConfig::foreign_penalty);
    add_real("task.correct_threshold", &RunConfig::correct_threshold);
    add_real("task.demo_bonus", &RunConfig::demo_bonus);
    add_real("task.ppl_scale", &RunConfig::ppl_scale);
    add_int("task.max_prompt_len", &RunConfig::max_prompt_len);
    add_int("splits.n_train", &RunConfig::n_train);
    add_int("splits.n_dev", &RunConfig::n_dev);
    add_int("splits.n_test", &RunConfig::n_test);
    add_int("pool.n_seed", &RunConfig::pool_n_seed);
    add_int("pool.n_rewrite", &RunConfig::pool_n_rewrite);
    add_str("data.groups", &RunConfig::groups);
    add_int("data.shots", &RunConfig::shots);
    add_int("data.k_combos", &RunConfig::k_combos);
    add_int("model.d_model", &RunConfig::d_model);
    add_int("model.n_layers", &RunConfig::n_layers);
    add_int("model.n_heads", &RunConfig::n_heads);
    add_int("model.d_ff", &RunConfig::d_ff);
    add_int("model.max_seq", &RunConfig::max_seq);
    add_int("train.batch_size", &RunConfig::batch_size);
    add_real("train.lr1", &RunConfig::lr1);
    add_real("train.lr_rest", &RunConfig::lr_rest);
    add_int("train.epochs1", &RunConfig::epochs1);
    add_int("train.epochs_rest", &RunConfig::epochs_rest);
    add_real("train.weight_decay", &RunConfig::weight_decay);
    add_real("train.lambda", &RunConfig::lambda);
    add_real("train.beta1", &RunConfig::beta1);
    add_real("train.beta2", &RunConfig::beta2);
    add_real("train.eps", &RunConfig::adam_eps);
    add_int("loop.T", &RunConfig::loops);
    add_int("loop.augment_queries", &RunConfig::augment_queries);
    add_real("loop.condition_reward", &RunConfig::condition_reward);
    add_int("loop.top_k", &RunConfig::top_k);
    add_real("loop.top_p", &RunConfig::top_p);
    add_int("eval.shots", &RunConfig::eval_shots);
    add_int("eval.k", &RunConfig::eval_k);
    add_u64("master_seed", &RunConfig::master_seed);
    return f;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

// Flat `key = value` lines; '#' starts a comment. Unknown keys and malformed
// values are parse errors naming the line. QPO_SEED in the environment
// overrides the master seed.
inline RunConfig parse_config(std::istream& in, const std::string& name) {
  RunConfig cfg;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(name, line_no, "<line>", "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : detail::config_fields()) {
      if (f.key == key) {
        try {
          f.set(cfg, value);
        } catch (const std::exception& e) {
          throw ParseError(name, line_no, key, std::string("bad value: ") + e.what());
        }
        found = true;
        break;
      }
    }
    if (!found) throw ParseError(name, line_no, key, "unknown key");
  }
  if (const char* env = std::getenv("QPO_SEED")) {
    try {
      cfg.master_seed = static_cast<uint64_t>(detail::parse_int(env));
    } catch (const std::exception&) {
      throw ConfigError("QPO_SEED is not an integer: " + std::string(env));
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_config: cannot open " + path);
  return parse_config(in, path);
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_config: cannot open " + path);
  out << serialize_config(cfg);
}

// ------------------------------------------------------------ derived pieces

inline SimTaskOverrides task_overrides(const RunConfig& cfg) {
  SimTaskOverrides ov;
  ov.topic_count = cfg.topics;
  ov.relevant_size = cfg.relevant_size;
  ov.foreign_penalty = cfg.foreign_penalty;
  ov.correct_threshold = cfg.correct_threshold;
  ov.demo_bonus = cfg.demo_bonus;
  ov.ppl_scale = cfg.ppl_scale;
  ov.max_prompt_len = cfg.max_prompt_len;
  return ov;
}

inline ModelConfig model_config(const RunConfig& cfg, const Vocab& vocab) {
  ModelConfig mc;
  mc.d_model = cfg.d_model;
  mc.n_layers = cfg.n_layers;
  mc.n_heads = cfg.n_heads;
  mc.d_ff = cfg.d_ff;
  mc.max_seq = cfg.max_seq;
  mc.vocab = vocab.size();
  return mc;
}

inline TrainPlan train_plan(const RunConfig& cfg, int loop_index) {
  TrainPlan plan;
  plan.loop_index = loop_index;
  plan.epochs = loop_index == 1 ? cfg.epochs1 : cfg.epochs_rest;
  plan.learning_rate = loop_index == 1 ? cfg.lr1 : cfg.lr_rest;
  plan.batch_size = cfg.batch_size;
  plan.weight_decay = cfg.weight_decay;
  plan.lambda = cfg.lambda;
  plan.beta1 = cfg.beta1;
  plan.beta2 = cfg.beta2;
  plan.eps = cfg.adam_eps;
  plan.shuffle_seed =
      derive_seed(cfg.master_seed, "train.loop", static_cast<uint64_t>(loop_index));
  return plan;
}

inline uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a(serialize_config(cfg));
}

}  // namespace qpo
