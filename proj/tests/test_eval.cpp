#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qpo/baselines.hpp"
#include "qpo/config.hpp"
#include "qpo/eval.hpp"

using namespace qpo;

namespace {

struct World {
  SimTask task = gen_task(42);
  Vocab vocab = Vocab::build(task);
  SplitSpec splits;
  QueryStore store;
  World() { std::tie(splits, store) = make_splits(task, 400, 40, 40, 42); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("an oracle prompt provider scores 1.0 and a filler prompt 0.0 zero-shot") {
  World w;
  const auto queries = w.store.subset(w.splits.test);
  EvalProtocol protocol;

  const EvalResult ceiling = evaluate_with(
      w.task, queries, protocol,
      [&](const Query& q) { return Prompt{w.task.relevant_set(q.topic)}; });
  CHECK(ceiling.accuracy == doctest::Approx(1.0));
  for (double acc : ceiling.per_topic_accuracy) CHECK(acc == doctest::Approx(1.0));

  const EvalResult floor = evaluate_with(w.task, queries, protocol,
                                         [](const Query&) { return Prompt{{"f0"}}; });
  CHECK(floor.accuracy == doctest::Approx(0.0));
  CHECK(floor.interactions == queries.size());

  CHECK_THROWS_AS(
      evaluate_with(w.task, {}, protocol, [](const Query&) { return Prompt{{"f0"}}; }),
      ArgumentError);
}

TEST_CASE("evaluation is deterministic and self-consistent") {
  World w;
  ModelConfig mc;
  mc.vocab = w.vocab.size();
  PolicyParams<float> params = init_params<float>(mc, 3);
  const auto queries = w.store.subset(w.splits.dev);
  EvalProtocol protocol;
  protocol.stage = Stage::eval_dev;

  const EvalResult a = evaluate_policy(params, w.vocab, w.task, queries, protocol);
  const EvalResult b = evaluate_policy(params, w.vocab, w.task, queries, protocol);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.per_query_correct == b.per_query_correct);

  // reported accuracy equals recomputation from the per-query log
  double total = 0.0;
  for (uint8_t c : a.per_query_correct) total += c;
  CHECK(a.accuracy == doctest::Approx(total / queries.size()));
}

TEST_CASE("few-shot voting uses strict majority with even ties incorrect") {
  CHECK(majority_verdict(2, 3));
  CHECK_FALSE(majority_verdict(1, 3));
  CHECK_FALSE(majority_verdict(1, 2));  // tie at even K -> incorrect
  CHECK(majority_verdict(2, 2));
  CHECK_FALSE(majority_verdict(0, 1));

  // permuting combination order never changes the verdict (count-based)
  const std::vector<int> flags{1, 0, 1};
  int votes = 0;
  for (int f : flags) votes += f;
  int votes_rev = 0;
  for (auto it = flags.rbegin(); it != flags.rend(); ++it) votes_rev += *it;
  CHECK(majority_verdict(votes, 3) == majority_verdict(votes_rev, 3));
}

TEST_CASE("few-shot evaluation consumes K answer calls per query") {
  World w;
  const auto queries = w.store.subset(w.splits.dev);
  EvalProtocol protocol;
  protocol.shots = 3;
  protocol.k_combos = 3;
  protocol.seed = 5;

  InteractionLedger ledger;
  LedgerScope scope(ledger);
  const EvalResult r = evaluate_with(
      w.task, queries, protocol,
      [&](const Query& q) { return Prompt{w.task.relevant_set(q.topic)}; }, &w.store,
      &w.splits.train_eval);
  CHECK(r.interactions == queries.size() * 3);
  CHECK(r.accuracy == doctest::Approx(1.0));  // exact prompts survive any demos

  CHECK_THROWS_AS(evaluate_with(
                      w.task, queries, protocol,
                      [&](const Query& q) { return Prompt{w.task.relevant_set(q.topic)}; }),
                  StateError);
}

TEST_CASE("nearest-neighbor baseline returns the matched query's best prompt exactly") {
  World w;
  ModelConfig mc;
  mc.vocab = w.vocab.size();
  PolicyParams<float> params = init_params<float>(mc, 11);

  // dataset: the target query holds one junk and one oracle prompt; other
  // queries hold junk only
  OfflineDataset ds;
  ds.normalizer = Normalizer{0, 1, "t"};
  const Query& target = w.store.by_id(w.splits.collection[0]);
  for (int64_t qid : w.splits.collection) {
    const Query& q = w.store.by_id(qid);
    RewardedExample junk;
    junk.query_id = q.id;
    junk.query_tokens = q.tokens;
    junk.topic = q.topic;
    junk.gold = q.topic;
    junk.prompt_tokens = {"f0"};
    junk.r_norm = 10.0;
    ds.examples.push_back(junk);
    if (qid == target.id) {
      RewardedExample good = junk;
      good.prompt_tokens = w.task.relevant_set(q.topic);
      good.r_norm = 95.0;
      ds.examples.push_back(good);
    }
  }

  // the nearest-neighbor fixed point: an identical test query maps to itself
  EvalProtocol protocol;
  const EvalResult r =
      nn_baseline(params, w.vocab, w.task, ds, w.store, {target}, protocol);
  CHECK(r.accuracy == doctest::Approx(1.0));  // junk would have scored 0
}

TEST_CASE("transfer monotonicity holds for any fixed policy") {
  World w;
  ModelConfig mc;
  mc.vocab = w.vocab.size();
  PolicyParams<float> params = init_params<float>(mc, 17);
  const auto queries = w.store.subset(w.splits.test);
  EvalProtocol protocol;

  const EvalResult base = evaluate_policy(params, w.vocab, w.task, queries, protocol);
  const SimTask easier = make_variant(w.task, 0.55, std::nullopt);
  const SimTask harsher = make_variant(w.task, std::nullopt, 0.6);
  const EvalResult easy =
      transfer_eval(params, w.vocab, w.task, easier, queries, protocol);
  const EvalResult hard =
      transfer_eval(params, w.vocab, w.task, harsher, queries, protocol);
  CHECK(easy.accuracy >= base.accuracy);
  CHECK(hard.accuracy <= base.accuracy);

  const SimTask other = gen_task(43);
  CHECK_THROWS_AS(transfer_eval(params, w.vocab, w.task, other, queries, protocol),
                  ArgumentError);
}

TEST_CASE("report merging is deterministic and validates inputs") {
  namespace fs = std::filesystem;
  const std::string base = "/tmp/qpo_test_reports";
  fs::remove_all(base);
  std::vector<std::string> dirs;
  for (const char* method : {"qpo", "sft"}) {
    for (uint64_t seed = 1; seed <= 3; ++seed) {
      const std::string dir = base + "/" + method + "_s" + std::to_string(seed);
      fs::create_directories(dir);
      dirs.push_back(dir);
      FinalEvalRow row;
      row.method = method;
      row.seed = seed;
      row.accuracy = 0.5 + 0.01 * static_cast<double>(seed);
      row.interactions = 1000 * seed;
      write_final_eval(row, dir + "/final_eval.csv");
      std::vector<LoopRow> rows;
      for (int t = 1; t <= 2; ++t) {
        LoopRow r;
        r.loop = t;
        r.dataset_size = 100 * t;
        r.dev_acc = 0.4 + 0.1 * t;
        r.cum_interactions = 500 * static_cast<uint64_t>(t);
        r.wall_time_s = 1.5;
        rows.push_back(r);
      }
      write_run_report(rows, dir + "/run_report.csv");
    }
  }

  const std::string out1 = base + "/merged1";
  const std::string out2 = base + "/merged2";
  merge_reports(dirs, out1);
  merge_reports(dirs, out2);

  const std::string summary = slurp(out1 + "/summary.csv");
  CHECK(summary == slurp(out2 + "/summary.csv"));
  CHECK(slurp(out1 + "/curves.csv") == slurp(out2 + "/curves.csv"));

  // 2 methods x 3 seeds -> 6 data rows + header
  long lines = std::count(summary.begin(), summary.end(), '\n');
  CHECK(lines == 7);

  const std::string empty_dir = base + "/empty";
  fs::create_directories(empty_dir);
  CHECK_THROWS_AS(merge_reports({empty_dir}, base + "/merged3"), ParseError);
}

TEST_CASE("config files round-trip bit-exactly with spec defaults") {
  const RunConfig defaults;
  CHECK(defaults.loops == 4);
  CHECK(defaults.augment_queries == 1000);
  CHECK(defaults.batch_size == 128);
  CHECK(defaults.lr1 == doctest::Approx(1e-3));
  CHECK(defaults.lr_rest == doctest::Approx(1e-4));
  CHECK(defaults.epochs1 == 100);
  CHECK(defaults.epochs_rest == 20);
  CHECK(defaults.lambda == doctest::Approx(0.1));
  CHECK(defaults.weight_decay == doctest::Approx(1e-4));
  CHECK(defaults.top_k == 2);
  CHECK(defaults.top_p == doctest::Approx(0.9));
  CHECK(defaults.condition_reward == doctest::Approx(100.0));

  RunConfig cfg;
  cfg.task_seed = 77;
  cfg.lambda = 0.25;
  cfg.groups = "10x5,10x5";
  const std::string text = serialize_config(cfg);
  std::istringstream in(text);
  const RunConfig parsed = parse_config(in, "<mem>");
  CHECK(parsed == cfg);
  CHECK(serialize_config(parsed) == text);
}

TEST_CASE("config parsing reports unknown keys and bad values by line") {
  {
    std::istringstream in("task.seed = 1\nbogus.key = 2\n");
    try {
      parse_config(in, "<mem>");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line == 2);
      CHECK(e.field == "bogus.key");
    }
  }
  {
    std::istringstream in("loop.T = soon\n");
    try {
      parse_config(in, "<mem>");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line == 1);
      CHECK(e.field == "loop.T");
    }
  }
  {
    // comments and blank lines are fine
    std::istringstream in("# comment\n\nloop.T = 2  # trailing\n");
    const RunConfig cfg = parse_config(in, "<mem>");
    CHECK(cfg.loops == 2);
  }
}

TEST_CASE("QPO_SEED overrides the master seed") {
  setenv("QPO_SEED", "314", 1);
  std::istringstream in("master_seed = 7\n");
  const RunConfig cfg = parse_config(in, "<mem>");
  unsetenv("QPO_SEED");
  CHECK(cfg.master_seed == 314);
}
