#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qpo/common.hpp"
#include "qpo/dataset.hpp"
#include "qpo/policy.hpp"

namespace qpo {

// ------------------------------------------------------------ protocol

struct EvalProtocol {
  int shots = 0;        // 0, 3, or 6
  int k_combos = 3;     // demonstration combinations; ignored for zero-shot
  double condition_reward = 100.0;
  uint64_t seed = 0;
  Stage stage = Stage::eval_test;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_topic_accuracy;
  uint64_t interactions = 0;
  uint64_t seed = 0;
  std::vector<uint8_t> per_query_correct;  // aligned with the query order
};

// Majority vote over K combination verdicts; ties at even K are incorrect.
inline bool majority_verdict(int correct_votes, int k) { return 2 * correct_votes > k; }

// Shared evaluation loop: the prompt provider abstracts over greedy policy
// decoding, a fixed prompt, or nearest-neighbor selection.
inline EvalResult evaluate_with(const SimTask& task, const std::vector<Query>& queries,
                                const EvalProtocol& protocol,
                                const std::function<Prompt(const Query&)>& prompt_for,
                                const QueryStore* store = nullptr,
                                const std::vector<int64_t>* demo_pool = nullptr) {
  if (queries.empty()) throw ArgumentError("evaluate: empty query set");
  if (protocol.shots > 0 && (store == nullptr || demo_pool == nullptr))
    throw StateError("evaluate: few-shot protocol needs a demonstration pool");

  StageScope stage(protocol.stage);
  const uint64_t before = current_ledger().count(protocol.stage);

  EvalResult result;
  result.seed = protocol.seed;
  result.per_topic_accuracy.assign(static_cast<size_t>(task.topic_count), 0.0);
  std::vector<int> topic_counts(static_cast<size_t>(task.topic_count), 0);

  for (const Query& q : queries) {
    const Prompt prompt = prompt_for(q);
    bool correct = false;
    if (protocol.shots == 0) {
      correct = answer(task, prompt, {}, q).answer == q.topic;
    } else {
      int votes = 0;
      for (int k = 0; k < protocol.k_combos; ++k) {
        const auto demos = sample_demos(
            task, *store, *demo_pool, protocol.shots,
            derive_seed(protocol.seed, "eval.demo",
                        static_cast<uint64_t>(q.id) * 1000 + static_cast<uint64_t>(k)));
        if (answer(task, prompt, demos, q).answer == q.topic) ++votes;
      }
      correct = majority_verdict(votes, protocol.k_combos);
    }
    result.per_query_correct.push_back(correct ? 1 : 0);
    ++topic_counts[static_cast<size_t>(q.topic)];
    if (correct) result.per_topic_accuracy[static_cast<size_t>(q.topic)] += 1.0;
  }

  double total = 0.0;
  for (uint8_t c : result.per_query_correct) total += c;
  result.accuracy = total / static_cast<double>(queries.size());
  for (int t = 0; t < task.topic_count; ++t)
    if (topic_counts[static_cast<size_t>(t)] > 0)
      result.per_topic_accuracy[static_cast<size_t>(t)] /=
          static_cast<double>(topic_counts[static_cast<size_t>(t)]);
  result.interactions = current_ledger().count(protocol.stage) - before;
  return result;
}

// Greedy decode at the conditioning reward, one verdict per query.
template <typename S>
EvalResult evaluate_policy(const PolicyParams<S>& params, const Vocab& vocab,
                           const SimTask& task, const std::vector<Query>& queries,
                           const EvalProtocol& protocol, const QueryStore* store = nullptr,
                           const std::vector<int64_t>* demo_pool = nullptr) {
  return evaluate_with(
      task, queries, protocol,
      [&](const Query& q) {
        return decode_prompt(params, vocab, protocol.condition_reward, q, DecodeMode::greedy);
      },
      store, demo_pool);
}

// Evaluates the unchanged policy on a perturbed environment. The variant must
// share vocabularies and topic structure with the training task.
template <typename S>
EvalResult transfer_eval(const PolicyParams<S>& params, const Vocab& vocab,
                         const SimTask& base, const SimTask& variant,
                         const std::vector<Query>& queries, const EvalProtocol& protocol,
                         const QueryStore* store = nullptr,
                         const std::vector<int64_t>* demo_pool = nullptr) {
  if (variant.topic_count != base.topic_count ||
      variant.directive_vocab != base.directive_vocab ||
      variant.filler_vocab != base.filler_vocab ||
      variant.indicator_sets != base.indicator_sets ||
      variant.noise_vocab != base.noise_vocab)
    throw ArgumentError("transfer_eval: variant does not share the task's vocabularies");
  return evaluate_policy(params, vocab, variant, queries, protocol, store, demo_pool);
}

// ------------------------------------------------------------ run reports

struct LoopRow {
  int loop = 0;
  int64_t dataset_size = 0;
  double dev_acc = 0.0;
  uint64_t cum_interactions = 0;
  double wall_time_s = 0.0;
};

inline void write_run_report(const std::vector<LoopRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_run_report: cannot open " + path);
  out << "loop,dataset_size,dev_acc,cum_interactions,wall_time_s\n";
  for (const auto& r : rows)
    out << r.loop << "," << r.dataset_size << "," << format_real(r.dev_acc) << ","
        << r.cum_interactions << "," << format_real(r.wall_time_s) << "\n";
}

struct FinalEvalRow {
  std::string method;
  int shots = 0;
  uint64_t seed = 0;
  double accuracy = 0.0;
  uint64_t interactions = 0;
};

inline void write_final_eval(const FinalEvalRow& row, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_final_eval: cannot open " + path);
  out << "method,shots,seed,accuracy,interactions\n";
  out << row.method << "," << row.shots << "," << row.seed << ","
      << format_real(row.accuracy) << "," << row.interactions << "\n";
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "<file>", "missing report file");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw ParseError(path, 0, "<file>", "empty report file");
  return rows;
}

}  // namespace detail

// Merges per-run reports (final_eval.csv + run_report.csv in each run
// directory) into summary.csv and curves.csv. Deterministic row order.
inline void merge_reports(const std::vector<std::string>& run_dirs,
                          const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<FinalEvalRow> summary;
  struct CurveRow {
    std::string method;
    uint64_t seed;
    int loop;
    double dev_acc;
  };
  std::vector<CurveRow> curves;

  for (const auto& dir : run_dirs) {
    const std::string fe = (fs::path(dir) / "final_eval.csv").string();
    const auto fe_rows = detail::read_csv(fe);
    if (fe_rows.size() < 2 || fe_rows[0].size() != 5)
      throw ParseError(fe, 1, "<header>", "expected method,shots,seed,accuracy,interactions");
    for (size_t i = 1; i < fe_rows.size(); ++i) {
      const auto& r = fe_rows[i];
      if (r.size() != 5)
        throw ParseError(fe, static_cast<long>(i + 1), "<row>", "expected 5 columns");
      FinalEvalRow row;
      row.method = r[0];
      row.shots = std::stoi(r[1]);
      row.seed = std::stoull(r[2]);
      row.accuracy = std::stod(r[3]);
      row.interactions = std::stoull(r[4]);
      summary.push_back(std::move(row));
    }

    const std::string rr = (fs::path(dir) / "run_report.csv").string();
    const auto rr_rows = detail::read_csv(rr);
    if (rr_rows.size() < 2 || rr_rows[0].size() != 5)
      throw ParseError(rr, 1, "<header>",
                       "expected loop,dataset_size,dev_acc,cum_interactions,wall_time_s");
    const std::string method = summary.back().method;
    const uint64_t seed = summary.back().seed;
    for (size_t i = 1; i < rr_rows.size(); ++i) {
      const auto& r = rr_rows[i];
      if (r.size() != 5)
        throw ParseError(rr, static_cast<long>(i + 1), "<row>", "expected 5 columns");
      curves.push_back(CurveRow{method, seed, std::stoi(r[0]), std::stod(r[2])});
    }
  }

  std::sort(summary.begin(), summary.end(), [](const auto& a, const auto& b) {
    return std::tie(a.method, a.shots, a.seed) < std::tie(b.method, b.shots, b.seed);
  });
  std::sort(curves.begin(), curves.end(), [](const auto& a, const auto& b) {
    return std::tie(a.method, a.seed, a.loop) < std::tie(b.method, b.seed, b.loop);
  });

  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "summary.csv", std::ios::binary);
    if (!out) throw IoError("merge_reports: cannot write summary.csv");
    out << "method,shots,seed,accuracy,interactions\n";
    for (const auto& r : summary)
      out << r.method << "," << r.shots << "," << r.seed << "," << format_real(r.accuracy)
          << "," << r.interactions << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "curves.csv", std::ios::binary);
    if (!out) throw IoError("merge_reports: cannot write curves.csv");
    out << "method,seed,loop,dev_acc\n";
    for (const auto& r : curves)
      out << r.method << "," << r.seed << "," << r.loop << "," << format_real(r.dev_acc)
          << "\n";
  }
}

}  // namespace qpo
