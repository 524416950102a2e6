// Command-line surface for the query-dependent prompt optimization pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qpo/baselines.hpp"
#include "qpo/checkpoint.hpp"
#include "qpo/config.hpp"
#include "qpo/loop.hpp"

namespace fs = std::filesystem;
using namespace qpo;

namespace {

RunConfig config_from(const std::string& path) {
  if (path.empty()) {
    RunConfig cfg;
    if (const char* env = std::getenv("QPO_SEED")) cfg.master_seed = std::stoull(env);
    return cfg;
  }
  return load_config(path);
}

struct WorldBundle {
  SimTask task;
  Vocab vocab;
  SplitSpec splits;
  QueryStore store;
  std::vector<Prompt> pool;
};

WorldBundle make_world(const RunConfig& cfg) {
  WorldBundle w{gen_task(cfg.task_seed, task_overrides(cfg)), {}, {}, {}, {}};
  w.vocab = Vocab::build(w.task);
  std::tie(w.splits, w.store) = make_splits(w.task, cfg.n_train, cfg.n_dev, cfg.n_test,
                                            derive_seed(cfg.master_seed, "splits"));
  w.pool = gen_prompt_pool(w.task, cfg.pool_n_seed, cfg.pool_n_rewrite,
                           derive_seed(cfg.master_seed, "pool"));
  return w;
}

int best_loop_from_report(const std::string& run_dir) {
  const auto rows = detail::read_csv((fs::path(run_dir) / "run_report.csv").string());
  int best = 1;
  double best_acc = -1.0;
  for (size_t i = 1; i < rows.size(); ++i) {
    const double acc = std::stod(rows[i][2]);
    if (acc > best_acc + 1e-12) {
      best_acc = acc;
      best = std::stoi(rows[i][0]);
    }
  }
  return best;
}

void print_eval(const char* label, const EvalResult& r) {
  std::printf("%s: accuracy=%.4f interactions=%llu\n", label, r.accuracy,
              static_cast<unsigned long long>(r.interactions));
  std::printf("  per-topic:");
  for (double acc : r.per_topic_accuracy) std::printf(" %.3f", acc);
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-dependent prompt optimization on the TagMatch environment"};
  app.require_subcommand(1);

  // ---------------- gen-task
  auto* gen = app.add_subcommand("gen-task", "generate a task definition file");
  uint64_t gt_seed = 42;
  int gt_topics = 8;
  std::string gt_out = "task.json";
  gen->add_option("--seed", gt_seed, "environment seed");
  gen->add_option("--topics", gt_topics, "number of topics");
  gen->add_option("--out", gt_out, "output path")->required();
  gen->callback([&] {
    SimTaskOverrides ov;
    ov.topic_count = gt_topics;
    const SimTask task = gen_task(gt_seed, ov);
    save_task(task, gt_out);
    std::printf("wrote %s (fingerprint %s)\n", gt_out.c_str(),
                task_fingerprint(task).c_str());
  });

  // ---------------- build-dataset
  auto* build = app.add_subcommand("build-dataset", "evaluate the pool and emit the dataset");
  std::string bd_config, bd_task, bd_groups = "40x100,40x100,40x100,30x100";
  std::string bd_out = "dataset.jsonl";
  uint64_t bd_pool_seed = 0;
  int bd_shots = 0;
  bool bd_no_filter = false;
  bool bd_pool_seed_set = false;
  build->add_option("--config", bd_config, "run configuration file");
  build->add_option("--task", bd_task, "task json (defaults to the config's task)");
  build->add_option("--pool-seed", bd_pool_seed, "prompt pool seed")
      ->each([&](const std::string&) { bd_pool_seed_set = true; });
  build->add_option("--groups", bd_groups, "group plan, e.g. 40x100,40x100,40x100,30x100");
  build->add_option("--shots", bd_shots, "demonstrations per combo (0 = zero-shot)");
  build->add_flag("--no-filter", bd_no_filter, "skip expert-threshold filtering");
  build->add_option("--out", bd_out, "output jsonl path")->required();
  build->callback([&] {
    RunConfig cfg = config_from(bd_config);
    cfg.groups = bd_groups;
    cfg.shots = bd_shots;
    const SimTask task =
        bd_task.empty() ? gen_task(cfg.task_seed, task_overrides(cfg)) : load_task(bd_task);
    const auto [splits, store] = make_splits(task, cfg.n_train, cfg.n_dev, cfg.n_test,
                                             derive_seed(cfg.master_seed, "splits"));
    const uint64_t pool_seed =
        bd_pool_seed_set ? bd_pool_seed : derive_seed(cfg.master_seed, "pool");
    const auto pool = gen_prompt_pool(task, cfg.pool_n_seed, cfg.pool_n_rewrite, pool_seed);
    const OfflineDataset ds = build_initial_dataset(
        task, pool, splits, store, parse_group_plan(cfg.groups), cfg.shots, cfg.k_combos,
        derive_seed(cfg.master_seed, "build"), !bd_no_filter);
    save_dataset(ds, bd_out);
    std::printf("wrote %s: %zu examples (evaluated %lld pairs, %llu interactions)\n",
                bd_out.c_str(), ds.examples.size(),
                static_cast<long long>(ds.provenance[0].evaluated),
                static_cast<unsigned long long>(ds.provenance[0].interactions));
  });

  // ---------------- train
  auto* train = app.add_subcommand("train", "one offline fine-tuning stage");
  std::string tr_config, tr_data, tr_variant = "qpo", tr_ckpt_out = "policy.ckpt";
  std::string tr_ckpt_in, tr_report_out;
  int tr_loop_index = 1;
  uint64_t tr_seed = 0;
  train->add_option("--config", tr_config, "run configuration file");
  train->add_option("--data", tr_data, "dataset jsonl")->required();
  train->add_option("--loop-index", tr_loop_index, "1-based loop index (sets epochs/lr)");
  train->add_option("--variant", tr_variant, "qpo | rl_only | sft");
  train->add_option("--ckpt-in", tr_ckpt_in, "warm-start checkpoint");
  train->add_option("--ckpt-out", tr_ckpt_out, "checkpoint output path")->required();
  train->add_option("--report-out", tr_report_out, "per-epoch loss csv");
  train->add_option("--seed", tr_seed, "shuffle/init seed");
  train->callback([&] {
    const RunConfig cfg = config_from(tr_config);
    const SimTask task = gen_task(cfg.task_seed, task_overrides(cfg));
    const Vocab vocab = Vocab::build(task);
    const OfflineDataset ds = load_dataset(tr_data);
    if (ds.task_fingerprint != task_fingerprint(task))
      throw ConfigError("dataset was built for task " + ds.task_fingerprint +
                        ", config describes " + task_fingerprint(task));
    const ModelConfig mc = model_config(cfg, vocab);
    PolicyParams<float> params =
        tr_ckpt_in.empty() ? init_params<float>(mc, derive_seed(tr_seed, "init"))
                           : load_checkpoint(tr_ckpt_in, mc);
    TrainPlan plan = train_plan(cfg, tr_loop_index);
    plan.shuffle_seed = derive_seed(tr_seed, "train.loop", static_cast<uint64_t>(tr_loop_index));
    const TrainReport report =
        orl_finetune(params, ds, vocab, plan, parse_variant(tr_variant));
    save_checkpoint(params, tr_ckpt_out);
    if (!tr_report_out.empty()) write_train_report(report, tr_report_out);
    std::printf("trained %s on %lld examples for %d epochs: l_total %.4f -> %.4f\n",
                tr_variant.c_str(), static_cast<long long>(report.train_set_size),
                plan.epochs, report.epochs.front().l_total, report.epochs.back().l_total);
    std::printf("checkpoint %s (params %s)\n", tr_ckpt_out.c_str(),
                report.params_fingerprint.c_str());
  });

  // ---------------- run
  auto* run = app.add_subcommand("run", "full multi-loop pipeline from a config file");
  std::string rn_config, rn_out = "run_out", rn_variant = "qpo";
  run->add_option("--config", rn_config, "run configuration file");
  run->add_option("--variant", rn_variant, "qpo | rl_only | sft");
  run->add_option("--out", rn_out, "output directory")->required();
  run->callback([&] {
    const RunConfig cfg = config_from(rn_config);
    const RunResult result = run_qpo(cfg, parse_variant(rn_variant), rn_out);
    for (const auto& row : result.rows)
      std::printf("loop %d: dataset=%lld dev_acc=%.4f interactions=%llu (%.1fs)\n",
                  row.loop, static_cast<long long>(row.dataset_size), row.dev_acc,
                  static_cast<unsigned long long>(row.cum_interactions), row.wall_time_s);
    std::printf("best loop %d (dev %.4f); test accuracy %.4f; artifacts in %s\n",
                result.best_loop, result.best_dev_acc, result.test_acc, rn_out.c_str());
  });

  // ---------------- eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_config, ev_ckpt, ev_split = "test", ev_out;
  int ev_shots = 0, ev_k = 3;
  uint64_t ev_seed = 0;
  ev->add_option("--config", ev_config, "run configuration file");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--split", ev_split, "dev | test");
  ev->add_option("--shots", ev_shots, "0, 3, or 6");
  ev->add_option("--k", ev_k, "demonstration combinations");
  ev->add_option("--seed", ev_seed, "protocol seed");
  ev->add_option("--out", ev_out, "directory for final_eval.csv");
  ev->callback([&] {
    const RunConfig cfg = config_from(ev_config);
    const WorldBundle w = make_world(cfg);
    PolicyParams<float> params = load_checkpoint(ev_ckpt, model_config(cfg, w.vocab));
    EvalProtocol protocol;
    protocol.shots = ev_shots;
    protocol.k_combos = ev_k;
    protocol.condition_reward = cfg.condition_reward;
    protocol.seed = ev_seed;
    protocol.stage = ev_split == "dev" ? Stage::eval_dev : Stage::eval_test;
    const auto& ids = ev_split == "dev" ? w.splits.dev : w.splits.test;
    if (ev_split != "dev" && ev_split != "test")
      throw ArgumentError("eval: --split must be dev or test");
    const EvalResult r = evaluate_policy(params, w.vocab, w.task, w.store.subset(ids),
                                         protocol, &w.store, &w.splits.train_eval);
    print_eval(ev_split.c_str(), r);
    if (!ev_out.empty()) {
      fs::create_directories(ev_out);
      FinalEvalRow row{"qpo", ev_shots, cfg.master_seed, r.accuracy, r.interactions};
      write_final_eval(row, (fs::path(ev_out) / "final_eval.csv").string());
    }
  });

  // ---------------- baseline
  auto* bl = app.add_subcommand("baseline", "run a baseline variant");
  std::string bl_config, bl_variant, bl_out, bl_run_dir;
  int bl_shots = 0;
  bl->add_option("--config", bl_config, "run configuration file");
  bl->add_option("--variant", bl_variant, "task_best | nn | sft | rl_only | no_mla")
      ->required();
  bl->add_option("--run-dir", bl_run_dir, "existing qpo run directory (for nn)");
  bl->add_option("--shots", bl_shots, "evaluation shots");
  bl->add_option("--out", bl_out, "output directory");
  bl->callback([&] {
    RunConfig cfg = config_from(bl_config);
    cfg.eval_shots = bl_shots;
    const BaselineVariant variant = parse_baseline(bl_variant);
    if (variant == BaselineVariant::sft || variant == BaselineVariant::rl_only ||
        variant == BaselineVariant::no_mla) {
      const RunResult result = run_trained_baseline(
          cfg, variant, bl_out.empty() ? std::nullopt : std::optional<std::string>(bl_out));
      std::printf("%s: best loop %d, test accuracy %.4f\n", bl_variant.c_str(),
                  result.best_loop, result.test_acc);
      return;
    }

    const WorldBundle w = make_world(cfg);
    EvalProtocol protocol;
    protocol.shots = bl_shots;
    protocol.k_combos = cfg.eval_k;
    protocol.seed = derive_seed(cfg.master_seed, "eval.test");
    EvalResult r;
    if (variant == BaselineVariant::task_best) {
      r = task_best_baseline(w.task, w.pool, w.splits, w.store, w.store.subset(w.splits.test),
                             protocol);
    } else {
      if (bl_run_dir.empty())
        throw ArgumentError("baseline nn: --run-dir with a trained qpo run is required");
      const int best = best_loop_from_report(bl_run_dir);
      PolicyParams<float> params = load_checkpoint(
          (fs::path(bl_run_dir) / ("loop" + std::to_string(best) + ".ckpt")).string(),
          model_config(cfg, w.vocab));
      const OfflineDataset ds = load_dataset(
          (fs::path(bl_run_dir) / ("loop" + std::to_string(cfg.loops) + ".jsonl")).string());
      r = nn_baseline(params, w.vocab, w.task, ds, w.store, w.store.subset(w.splits.test),
                      protocol, &w.splits.train_eval);
    }
    print_eval(bl_variant.c_str(), r);
    if (!bl_out.empty()) {
      fs::create_directories(bl_out);
      FinalEvalRow row{bl_variant, bl_shots, cfg.master_seed, r.accuracy, r.interactions};
      write_final_eval(row, (fs::path(bl_out) / "final_eval.csv").string());
    }
  });

  // ---------------- report
  auto* rp = app.add_subcommand("report", "merge run directories into summary csv files");
  std::vector<std::string> rp_runs;
  std::string rp_out = "report_out";
  rp->add_option("--runs", rp_runs, "run directories")->required()->expected(-1);
  rp->add_option("--out", rp_out, "output directory")->required();
  rp->callback([&] {
    merge_reports(rp_runs, rp_out);
    std::printf("wrote %s/summary.csv and %s/curves.csv\n", rp_out.c_str(), rp_out.c_str());
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
