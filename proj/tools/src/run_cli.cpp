#include <iostream>

#include <CLI11.hpp>

#include "mesanet_cli/commands.hpp"
#include "mesanet_cli/config.hpp"

namespace mesanet::cli {

int run_cli(int argc, char** argv) {
  CLI::App app{"Mesa layer training, verification and diagnostics"};
  app.require_subcommand(1);

  TrainOptions train;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string task, mixer, mode;
  int steps = 0;
  auto* t = app.add_subcommand("train", "Train a model and write manifest, metrics and checkpoint");
  t->add_option("--config", config_path, "Run configuration (key = value lines)");
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_flag("--force", train.force, "Overwrite existing outputs");
  auto* seed_opt = t->add_option("--seed", seed, "Seed for all random streams");
  auto* task_opt = t->add_option("--task", task, "parity or recall");
  auto* steps_opt = t->add_option("--steps", steps, "Training steps");
  auto* mixer_opt = t->add_option("--mixer", mixer, "mesa, gla, mamba2, deltanet, gated_deltanet, mlstm, softmax");
  auto* mode_opt = t->add_option("--mode", mode, "standard or state_tracking");
  t->add_flag("--quiet", train.quiet, "Do not print progress");

  VerifyOptions verify;
  auto* v = app.add_subcommand("verify", "Run oracle suites");
  v->add_option("--suite", verify.suite, "cg, mesa, baselines, grads, app_f or all");
  v->add_option("--seed", verify.seed, "Seed for the random instances");

  BenchOptions bench;
  std::string csv;
  auto* b = app.add_subcommand("bench", "Time chunked and sequential sequence kernels");
  b->add_option("--mixer", bench.mixer, "Mixer kind");
  b->add_option("--T", bench.T, "Sequence lengths")->delimiter(',');
  b->add_option("--C", bench.C, "Chunk sizes")->delimiter(',');
  b->add_option("--cg-steps", bench.cg_steps, "Fixed CG step counts")->delimiter(',');
  b->add_option("--n-a", bench.n_a, "Key and value dimension");
  b->add_option("--repeats", bench.repeats, "Timing repeats (best is kept)");
  b->add_option("--seed", bench.seed, "Seed");
  auto* csv_opt = b->add_option("--csv", csv, "Also write the CSV to this file");
  b->add_flag("--force", bench.force, "Overwrite the CSV file");

  StatsOptions stats;
  std::uint64_t stats_seed = 0;
  auto* s = app.add_subcommand("stats", "Stopping sweep and per-head condition profile of a checkpoint");
  s->add_option("--ckpt", stats.ckpt, "Checkpoint written by train")->required();
  s->add_option("--eval", stats.eval, "parity or recall");
  s->add_flag("--eps-sweep", stats.eps_sweep, "Sweep the CG stopping tolerance");
  s->add_option("--eps", stats.eps, "Tolerances for the sweep (default grid otherwise)")->delimiter(',');
  s->add_option("--eval-batch", stats.eval_batch, "Evaluation sequences");
  auto* stats_seed_opt = s->add_option("--seed", stats_seed, "Seed (default: the run's seed)");
  s->add_option("--out", stats.out, "Output directory")->required();
  s->add_flag("--force", stats.force, "Overwrite existing outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (t->parsed()) {
    if (!config_path.empty()) train.config = config_path;
    if (*seed_opt) train.seed = seed;
    if (*task_opt) train.task = task;
    if (*steps_opt) train.steps = steps;
    if (*mixer_opt) train.mixer = mixer;
    if (*mode_opt) train.mode = mode;
    return cmd_train(train, std::cout, std::cerr);
  }
  if (v->parsed()) return cmd_verify(verify, std::cout, std::cerr);
  if (b->parsed()) {
    if (*csv_opt) bench.csv = csv;
    return cmd_bench(bench, std::cout, std::cerr);
  }
  if (*stats_seed_opt) stats.seed = stats_seed;
  return cmd_stats(stats, std::cout, std::cerr);
}

}  // namespace mesanet::cli
