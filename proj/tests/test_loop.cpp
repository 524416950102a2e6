#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "qpo/baselines.hpp"
#include "qpo/loop.hpp"

using namespace qpo;

namespace {

// Reduced pipeline configuration: full mechanics, small compute.
RunConfig tiny_config(uint64_t master_seed = 1) {
  RunConfig cfg;
  cfg.n_train = 400;
  cfg.n_dev = 40;
  cfg.n_test = 40;
  cfg.pool_n_seed = 16;
  cfg.pool_n_rewrite = 24;
  cfg.groups = "20x20,20x20";
  cfg.epochs1 = 4;
  cfg.epochs_rest = 2;
  cfg.loops = 3;
  cfg.augment_queries = 50;
  cfg.master_seed = master_seed;
  return cfg;
}

}  // namespace

TEST_CASE("augment_stage emits one evaluated example per draw, no filtering") {
  const SimTask task = gen_task(42);
  const Vocab vocab = Vocab::build(task);
  const auto [splits, store] = make_splits(task, 400, 40, 40, 42);
  ModelConfig mc;
  mc.vocab = vocab.size();
  PolicyParams<float> params = init_params<float>(mc, 5);

  Normalizer norm{-0.6, 1.07, "test"};
  LoopConfig lc;
  lc.augment_queries_per_loop = 50;

  InteractionLedger ledger;
  LedgerScope scope(ledger);
  const auto fresh = augment_stage(params, vocab, task, splits, store, lc, norm, 99, 2);

  REQUIRE(fresh.size() == 50);
  CHECK(ledger.count(Stage::augment) == 50);  // exactly one call per pair

  std::set<int64_t> collection(splits.collection.begin(), splits.collection.end());
  const double stage_r_task = fresh[0].r_task;
  for (const auto& ex : fresh) {
    CHECK(ex.loop_id == 2);
    CHECK(ex.r_task == stage_r_task);  // stage-mean rule: identical for all
    CHECK(ex.r_norm >= 0.0);
    CHECK(ex.r_norm <= 100.0);
    CHECK(ex.r_raw == ex.r_query + ex.r_task);
    CHECK(collection.count(ex.query_id) == 1);  // no dev/test leakage
    CHECK(ex.prompt_tokens.size() >= 1);
    CHECK(ex.prompt_tokens.size() <= static_cast<size_t>(task.max_prompt_len));
  }

  // determinism
  const auto again = augment_stage(params, vocab, task, splits, store, lc, norm, 99, 2);
  REQUIRE(again.size() == fresh.size());
  for (size_t i = 0; i < fresh.size(); ++i) CHECK(again[i] == fresh[i]);

  SplitSpec empty = splits;
  empty.collection.clear();
  CHECK_THROWS_AS(augment_stage(params, vocab, task, empty, store, lc, norm, 99, 2),
                  StateError);
}

TEST_CASE("run_qpo grows the dataset append-only and accounts every interaction") {
  const RunConfig cfg = tiny_config();
  const RunResult result = run_qpo(cfg, TrainVariant::qpo);

  REQUIRE(result.rows.size() == 3);
  const int64_t n0 = result.rows[0].dataset_size;
  CHECK(result.rows[1].dataset_size == n0 + 50);
  CHECK(result.rows[2].dataset_size == n0 + 100);
  CHECK(result.dataset.examples.size() == static_cast<size_t>(n0 + 100));

  // examples from earlier loops are bit-identical prefixes of later datasets
  for (size_t i = 0; i + 1 < result.dataset.provenance.size(); ++i)
    CHECK(result.dataset.provenance[i].loop_id <
          result.dataset.provenance[i + 1].loop_id);
  for (size_t i = 1; i < result.dataset.examples.size(); ++i)
    CHECK(result.dataset.examples[i - 1].loop_id <= result.dataset.examples[i].loop_id);

  // ledger reconciliation: build + augment + dev + test == total
  const auto& ledger = result.ledger;
  CHECK(ledger.count(Stage::initial_build) == 20 * 20 * 2);
  CHECK(ledger.count(Stage::augment) == 2 * 50);
  CHECK(ledger.count(Stage::eval_dev) == 3 * 40);
  CHECK(ledger.count(Stage::eval_test) == 40);
  CHECK(ledger.total() == ledger.count(Stage::initial_build) + ledger.count(Stage::augment) +
                              ledger.count(Stage::eval_dev) + ledger.count(Stage::eval_test));
  CHECK(result.rows.back().cum_interactions + result.test_interactions == ledger.total());

  CHECK(result.best_loop >= 1);
  CHECK(result.best_loop <= 3);
  CHECK(result.best_dev_acc >= 0.0);
}

TEST_CASE("a single-loop run performs no augmentation interactions") {
  RunConfig cfg = tiny_config();
  cfg.loops = 1;
  const RunResult result = run_qpo(cfg, TrainVariant::qpo);
  CHECK(result.ledger.count(Stage::augment) == 0);
  CHECK(result.rows.size() == 1);
  CHECK(result.dataset.provenance.size() == 1);
}

TEST_CASE("the pipeline is reproducible and decomposes into warm-started stages") {
  const RunConfig cfg = tiny_config();
  RunResult r1 = run_qpo(cfg, TrainVariant::qpo);
  RunResult r2 = run_qpo(cfg, TrainVariant::qpo);

  REQUIRE(r1.loop_params.size() == r2.loop_params.size());
  for (size_t t = 0; t < r1.loop_params.size(); ++t)
    CHECK(params_fingerprint(r1.loop_params[t]) == params_fingerprint(r2.loop_params[t]));
  CHECK(r1.test_acc == r2.test_acc);
  CHECK(r1.best_loop == r2.best_loop);

  // manual decomposition reproduces loop 1 and the warm-started loop 2
  const SimTask task = gen_task(cfg.task_seed, task_overrides(cfg));
  const Vocab vocab = Vocab::build(task);
  const auto [splits, store] = make_splits(task, cfg.n_train, cfg.n_dev, cfg.n_test,
                                           derive_seed(cfg.master_seed, "splits"));
  const auto pool = gen_prompt_pool(task, cfg.pool_n_seed, cfg.pool_n_rewrite,
                                    derive_seed(cfg.master_seed, "pool"));
  OfflineDataset ds =
      build_initial_dataset(task, pool, splits, store, parse_group_plan(cfg.groups),
                            cfg.shots, cfg.k_combos, derive_seed(cfg.master_seed, "build"));
  PolicyParams<float> params =
      init_params<float>(model_config(cfg, vocab), derive_seed(cfg.master_seed, "init"));
  orl_finetune(params, ds, vocab, train_plan(cfg, 1), TrainVariant::qpo);
  CHECK(params_fingerprint(params) == params_fingerprint(r1.loop_params[0]));

  auto fresh = augment_stage(params, vocab, task, splits, store, loop_config(cfg),
                             *ds.normalizer, derive_seed(cfg.master_seed, "augment", 1), 1);
  for (auto& ex : fresh) ds.examples.push_back(std::move(ex));
  orl_finetune(params, ds, vocab, train_plan(cfg, 2), TrainVariant::qpo);
  CHECK(params_fingerprint(params) == params_fingerprint(r1.loop_params[1]));
}

TEST_CASE("run artifacts land in the output directory with byte-stable reports") {
  namespace fs = std::filesystem;
  const std::string dir1 = "/tmp/qpo_test_run1";
  const std::string dir2 = "/tmp/qpo_test_run2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);

  RunConfig cfg = tiny_config();
  cfg.loops = 2;
  run_qpo(cfg, TrainVariant::qpo, dir1);
  run_qpo(cfg, TrainVariant::qpo, dir2);

  const auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };

  for (const char* name : {"loop1.jsonl", "loop2.jsonl", "loop1.ckpt", "loop2.ckpt",
                           "final_eval.csv", "config.txt", "task.json"})
    CHECK(slurp((fs::path(dir1) / name).string()) == slurp((fs::path(dir2) / name).string()));

  // run_report matches column-wise except wall_time_s
  const auto strip_wall = [&](const std::string& path) {
    std::ifstream in(path);
    std::string line, out;
    while (std::getline(in, line)) {
      const auto last = line.rfind(',');
      out += line.substr(0, last) + "\n";
    }
    return out;
  };
  CHECK(strip_wall((fs::path(dir1) / "run_report.csv").string()) ==
        strip_wall((fs::path(dir2) / "run_report.csv").string()));

  // checkpoints on disk reload to the in-memory result
  const RunConfig cfg2 = cfg;
  const SimTask task = gen_task(cfg2.task_seed, task_overrides(cfg2));
  const Vocab vocab = Vocab::build(task);
  PolicyParams<float> loaded =
      load_checkpoint((fs::path(dir1) / "loop2.ckpt").string(), model_config(cfg2, vocab));
  RunResult direct = run_qpo(cfg, TrainVariant::qpo);
  CHECK(params_fingerprint(loaded) == params_fingerprint(direct.loop_params[1]));
}

TEST_CASE("no_mla baseline trains the schedule without growing the dataset") {
  RunConfig cfg = tiny_config();
  cfg.loops = 2;
  const RunResult result = run_trained_baseline(cfg, BaselineVariant::no_mla);
  CHECK(result.ledger.count(Stage::augment) == 0);
  CHECK(result.rows[0].dataset_size == result.rows[1].dataset_size);
}
