// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "svae/expt/bench.hpp"
#include "svae/expt/experiment.hpp"
#include "svae/threading.hpp"

namespace {

svae::expt::ExperimentConfig load_experiment(const std::string& path,
                                             bool override_seed,
                                             std::uint64_t seed) {
  auto j = svae::io::load_json(path);
  if (override_seed) j["seed"] = seed;
  return svae::expt::experiment_config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured VAE with a linear-Gaussian state-space prior"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 1;
  auto* seed_opt = app.add_option("--seed", seed, "seed override");
  int threads = 0;
  app.add_option("--threads", threads, "worker thread budget (0 = hardware)");

  std::string cfg_path, data_dir, out_dir, ckpt_path;
  bool no_mask = false;
  int prefix = 50, horizon = 50, trajectories = 200;
  std::vector<int> lengths{1024, 4096, 16384};
  std::vector<std::string> backends{"seq", "par"};
  int reps = 5;

  auto* gen = app.add_subcommand("generate", "write a dataset directory");
  gen->add_option("--config", cfg_path, "experiment config json")->required();
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "fit a model on a dataset");
  train->add_option("--config", cfg_path, "experiment config json")->required();
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--no-mask", no_mask, "disable self-supervised masking");

  auto* eval = app.add_subcommand("eval", "bound diagnostics for a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint json")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();

  auto* predict = app.add_subcommand("predict", "score forecasts on the test split");
  predict->add_option("--ckpt", ckpt_path, "checkpoint json")->required();
  predict->add_option("--data", data_dir, "dataset directory")->required();
  predict->add_option("--prefix", prefix, "frames to condition on");
  predict->add_option("--horizon", horizon, "frames to forecast");
  predict->add_option("--trajectories", trajectories, "sample paths per sequence");

  auto* bench = app.add_subcommand("bench", "time the gradient backends");
  bench->add_option("--lengths", lengths, "sequence lengths")->delimiter(',');
  bench->add_option("--backends", backends, "seq and/or par")->delimiter(',');
  bench->add_option("--reps", reps, "timed repetitions per cell");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) svae::set_thread_budget(threads);
  const bool have_seed = seed_opt->count() > 0;

  try {
    if (gen->parsed()) {
      const auto cfg = load_experiment(cfg_path, have_seed, seed);
      svae::expt::generate_dataset(cfg, out_dir);
      std::cout << "dataset written to " << out_dir << '\n';
    } else if (train->parsed()) {
      auto cfg = load_experiment(cfg_path, have_seed, seed);
      if (no_mask) cfg.train.use_mask = false;
      const auto o = svae::expt::train_run(cfg, data_dir, out_dir);
      std::cout << "checkpoint written to " << out_dir << '\n';
      if (std::isfinite(o.tr.final_val_elbo))
        std::cout << "final val elbo " << o.tr.final_val_elbo << '\n';
    } else if (eval->parsed()) {
      const auto j = svae::expt::eval_checkpoint(ckpt_path, data_dir, seed);
      std::cout << j.dump(2) << '\n';
    } else if (predict->parsed()) {
      svae::expt::PredictConfig pc;
      pc.prefix = prefix;
      pc.horizon = horizon;
      pc.trajectories = trajectories;
      const auto j =
          svae::expt::predict_checkpoint(ckpt_path, data_dir, pc, seed);
      std::cout << j.dump(2) << '\n';
    } else if (bench->parsed()) {
      svae::expt::BenchConfig bc;
      bc.lengths = lengths;
      bc.backends = backends;
      bc.reps = reps;
      bc.seed = seed;
      const auto rep = svae::expt::benchmark_runtime(bc);
      std::cout << "cores " << rep.cores << ", threads " << rep.threads << '\n';
      std::cout << "T\tbackend\tmedian_ms\tmin_ms\tmax_ms\tloss\n";
      for (const auto& row : rep.rows)
        std::cout << row.T << '\t' << row.backend << '\t' << row.median_ms
                  << '\t' << row.min_ms << '\t' << row.max_ms << '\t'
                  << row.loss << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
