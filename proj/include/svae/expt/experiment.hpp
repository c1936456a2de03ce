// SPDX-License-Identifier: Apache-2.0
//
// End-to-end study orchestration: generate a dataset directory, fit a
// model, evaluate bounds and forecasts, and write results. All result
// files are written atomically (tmp file plus rename); wall-clock numbers
// go to a separate timings.json so result files are bit-reproducible for
// a fixed seed and thread count.
#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "svae/expt/datasets.hpp"
#include "svae/expt/metrics.hpp"
#include "svae/train.hpp"

namespace svae::expt {

inline constexpr const char* kCodeVersion = "svae-0.1.1";

namespace fs = std::filesystem;

inline void atomic_write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  io::write_text_file(tmp, text);
  fs::rename(tmp, path);
}

inline void atomic_save_json(const fs::path& path, const io::json& j) {
  atomic_write_text(path, j.dump(2) + "\n");
}

// Writes header + payload into a scratch dir first so the payload name
// recorded in the header matches the final location.
inline void atomic_write_sequence_set(const fs::path& dir,
                                      const std::string& stem,
                                      const io::SequenceSet& set) {
  const fs::path tdir = dir / (".tmp-" + stem);
  fs::create_directories(tdir);
  io::write_sequence_set(tdir / (stem + ".json"), set);
  fs::rename(tdir / (stem + ".bin"), dir / (stem + ".bin"));
  fs::rename(tdir / (stem + ".json"), dir / (stem + ".json"));
  fs::remove(tdir);
}

inline void append_timing(const fs::path& dir, const std::string& key,
                          double seconds) {
  const fs::path path = dir / "timings.json";
  io::json j = fs::exists(path) ? io::load_json(path) : io::json::object();
  j[key] = seconds;
  atomic_save_json(path, j);
}

class WallClock {
 public:
  WallClock() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t0_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

inline io::json true_model_to_json(const lgssm::LgssmParams& theta,
                                   const lgssm::LinearEmission& em,
                                   double snr) {
  io::json j;
  j["mu1"] = io::mat_to_json(theta.mu1);
  j["Q1"] = io::mat_to_json(theta.Q1);
  j["A"] = io::mat_to_json(theta.A);
  j["b"] = io::mat_to_json(theta.b);
  j["Q"] = io::mat_to_json(theta.Q);
  j["C"] = io::mat_to_json(em.C);
  j["d"] = io::mat_to_json(em.d);
  j["R"] = io::mat_to_json(em.R);
  j["snr"] = snr;
  return j;
}

inline void true_model_from_json(const io::json& j, lgssm::LgssmParams& theta,
                                 lgssm::LinearEmission& em) {
  theta.mu1 = io::mat_from_json(j.at("mu1"));
  theta.Q1 = io::mat_from_json(j.at("Q1"));
  theta.A = io::mat_from_json(j.at("A"));
  theta.b = io::mat_from_json(j.at("b"));
  theta.Q = io::mat_from_json(j.at("Q"));
  em.C = io::mat_from_json(j.at("C"));
  em.d = io::mat_from_json(j.at("d"));
  em.R = io::mat_from_json(j.at("R"));
}

struct PredictConfig {
  int prefix = 50;
  int horizon = 50;
  int trajectories = 200;

  void validate() const {
    require(prefix >= 1 && horizon >= 1 && trajectories >= 1,
            "PredictConfig: all fields must be positive");
  }
};

inline PredictConfig predict_config_from_json(const io::json& j) {
  model::check_keys(j, {"prefix", "horizon", "trajectories"},
                    "predict config");
  PredictConfig pc;
  pc.prefix = j.value("prefix", pc.prefix);
  pc.horizon = j.value("horizon", pc.horizon);
  pc.trajectories = j.value("trajectories", pc.trajectories);
  pc.validate();
  return pc;
}

inline io::json to_json(const PredictConfig& pc) {
  io::json j;
  j["prefix"] = pc.prefix;
  j["horizon"] = pc.horizon;
  j["trajectories"] = pc.trajectories;
  return j;
}

// One study: a dataset recipe, a model, a training schedule, and how to
// score forecasts.
struct ExperimentConfig {
  std::string name = "experiment";
  std::string kind;  // "lds" or "pendulum"
  io::json dataset = io::json::object();
  model::ModelConfig model;
  model::TrainConfig train;
  PredictConfig predict;
  bool ablate_mask = false;
  std::uint64_t seed = 1;

  void validate() const {
    require(kind == "lds" || kind == "pendulum",
            "ExperimentConfig: kind must be lds or pendulum");
    model.validate();
    train.validate();
    predict.validate();
  }
};

inline ExperimentConfig experiment_config_from_json(const io::json& j) {
  model::check_keys(j,
                    {"name", "kind", "dataset", "model", "train", "predict",
                     "ablate_mask", "seed"},
                    "experiment config");
  ExperimentConfig cfg;
  cfg.name = j.value("name", cfg.name);
  require(j.contains("kind"), "experiment config: missing kind");
  cfg.kind = j.at("kind").get<std::string>();
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("dataset")) cfg.dataset = j.at("dataset");
  require(j.contains("model"), "experiment config: missing model section");
  cfg.model = model::model_config_from_json(j.at("model"));
  if (j.contains("train"))
    cfg.train = model::train_config_from_json(j.at("train"));
  if (j.contains("predict"))
    cfg.predict = predict_config_from_json(j.at("predict"));
  cfg.ablate_mask = j.value("ablate_mask", cfg.ablate_mask);
  cfg.validate();
  // Parse the dataset section eagerly so bad keys fail before any work.
  if (cfg.kind == "lds") {
    const auto dcfg = lds_config_from_json(cfg.dataset, cfg.seed);
    require(cfg.model.obs_dim == dcfg.obs_dim,
            "experiment config: model obs_dim must match dataset obs_dim");
  } else {
    const auto dcfg = pendulum_config_from_json(cfg.dataset, cfg.seed);
    require(cfg.model.obs_dim == dcfg.image * dcfg.image,
            "experiment config: model obs_dim must match image pixels");
  }
  return cfg;
}

inline io::json to_json(const ExperimentConfig& cfg) {
  io::json j;
  j["name"] = cfg.name;
  j["kind"] = cfg.kind;
  j["dataset"] = cfg.dataset;
  j["model"] = model::to_json(cfg.model);
  j["train"] = model::to_json(cfg.train);
  j["predict"] = to_json(cfg.predict);
  j["ablate_mask"] = cfg.ablate_mask;
  j["seed"] = cfg.seed;
  return j;
}

inline void generate_dataset(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  WallClock clock;
  io::json summary;
  summary["kind"] = cfg.kind;
  if (cfg.kind == "lds") {
    const auto dcfg = lds_config_from_json(cfg.dataset, cfg.seed);
    const auto data = gen_lds_dataset(dcfg);
    atomic_write_sequence_set(out, "train", data.y_train);
    atomic_write_sequence_set(out, "val", data.y_val);
    atomic_write_sequence_set(out, "test", data.y_test);
    atomic_write_sequence_set(out, "truth_train", data.x_train);
    atomic_write_sequence_set(out, "truth_val", data.x_val);
    atomic_write_sequence_set(out, "truth_test", data.x_test);
    atomic_save_json(out / "true_model.json",
                     true_model_to_json(data.theta, data.em, data.snr));
    summary["config"] = to_json(dcfg);
    summary["snr"] = data.snr;
  } else {
    const auto dcfg = pendulum_config_from_json(cfg.dataset, cfg.seed);
    const auto data = gen_pendulum_dataset(dcfg);
    atomic_write_sequence_set(out, "train", data.y_train);
    atomic_write_sequence_set(out, "val", data.y_val);
    atomic_write_sequence_set(out, "test", data.y_test);
    atomic_write_sequence_set(out, "truth_train", data.truth_train);
    atomic_write_sequence_set(out, "truth_val", data.truth_val);
    atomic_write_sequence_set(out, "truth_test", data.truth_test);
    summary["config"] = to_json(dcfg);
  }
  atomic_save_json(out / "dataset.json", summary);
  append_timing(out, "generate_seconds", clock.seconds());
}

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string history_csv(const std::vector<model::TrainLogRow>& rows) {
  std::string csv = "iter,loss,val_elbo\n";
  for (const auto& r : rows) {
    csv += std::to_string(r.iter);
    csv += ',';
    csv += detail::g17(r.loss);
    csv += ',';
    if (r.has_val) csv += detail::g17(r.val_elbo);
    csv += '\n';
  }
  return csv;
}

struct TrainRunOutput {
  model::Checkpoint ck;
  model::TrainResult tr;
};

// Fits the configured model on <data>/train, validating on <data>/val, and
// writes checkpoint.json, metrics.csv, run.json and train.log into `out`.
// The log streams during training so an aborted run leaves a partial log
// but no partial result files.
inline TrainRunOutput train_run(const ExperimentConfig& cfg,
                                const fs::path& data, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  const auto train_set = io::read_sequence_set(data / "train.json");
  const auto val_set = io::read_sequence_set(data / "val.json");
  require(train_set.dims == cfg.model.obs_dim,
          "train_run: dataset dims do not match model obs_dim");

  std::ofstream log(out / "train.log");
  Rng rng(cfg.seed);
  WallClock clock;
  TrainRunOutput o;
  try {
    o.tr = model::train(cfg.model, cfg.train, train_set, val_set, rng, &log);
  } catch (const std::exception& e) {
    log << "aborted: " << e.what() << '\n';
    log.flush();
    throw;
  }
  const double train_seconds = clock.seconds();

  o.ck.model = cfg.model;
  o.ck.train = cfg.train;
  o.ck.params = o.tr.params;
  o.ck.opt = o.tr.opt;
  o.ck.rng_state = rng.state();
  const fs::path ck_tmp = out / "checkpoint.json.tmp";
  model::save_checkpoint(ck_tmp, o.ck);
  fs::rename(ck_tmp, out / "checkpoint.json");

  atomic_write_text(out / "metrics.csv", history_csv(o.tr.history));

  io::json run;
  run["name"] = cfg.name;
  run["kind"] = cfg.kind;
  run["code_version"] = kCodeVersion;
  run["seed"] = cfg.seed;
  run["config"] = to_json(cfg);
  run["data"] = {{"dims", train_set.dims},
                 {"T", train_set.T},
                 {"n_train", train_set.n_seq()},
                 {"n_val", val_set.n_seq()}};
  io::json fin;
  fin["iters"] = cfg.train.iters;
  fin["skipped_batches"] = o.tr.skipped;
  fin["final_loss"] =
      o.tr.history.empty() ? 0.0 : o.tr.history.back().loss;
  if (std::isfinite(o.tr.final_val_elbo))
    fin["final_val_elbo"] = o.tr.final_val_elbo;
  run["final"] = fin;
  atomic_save_json(out / "run.json", run);
  append_timing(out, "train_seconds", train_seconds);
  return o;
}

// Bound diagnostics for the val and test splits; when the directory holds
// a true model the normalized bound against the exact and null anchors is
// included.
inline io::json eval_checkpoint(const fs::path& ckpt_path,
                                const fs::path& data, std::uint64_t seed) {
  const auto ck = model::load_checkpoint(ckpt_path);
  const auto reg = model::make_registry(ck.model);
  const auto pv = grad::from_unconstrained(reg, ck.params);
  const auto mode = ck.train.resolve_mode(ck.model);
  Rng rng(seed);

  lgssm::LgssmParams theta;
  lgssm::LinearEmission em;
  const bool have_true = fs::exists(data / "true_model.json");
  if (have_true)
    true_model_from_json(io::load_json(data / "true_model.json"), theta, em);

  io::json out;
  out["code_version"] = kCodeVersion;
  out["seed"] = seed;
  for (const std::string split : {"val", "test"}) {
    const auto set = io::read_sequence_set(data / (split + ".json"));
    io::json js;
    const double elbo = model::mean_elbo(ck.model, reg, pv, set, mode,
                                         ck.train.n_samples, rng);
    js["elbo"] = elbo;
    js["n_seq"] = set.n_seq();
    if (have_true) {
      double ex = 0.0, nl = 0.0;
      for (const Mat& y : set.seqs) {
        ex += lgssm::exact_mll(theta, em, y);
        nl += lgssm::null_model_mll(theta, em, y);
      }
      ex /= set.n_seq();
      nl /= set.n_seq();
      js["exact_mll"] = ex;
      js["null_mll"] = nl;
      js["normalized_elbo"] = normalized_elbo(elbo, nl, ex);
    }
    out[split] = js;
  }
  return out;
}

// Forecast scoring on the test split: per-sequence joint predictive
// likelihood of the horizon given the prefix, plus the per-frame-per-dim
// average.
inline io::json predict_checkpoint(const fs::path& ckpt_path,
                                   const fs::path& data,
                                   const PredictConfig& pc,
                                   std::uint64_t seed) {
  pc.validate();
  const auto ck = model::load_checkpoint(ckpt_path);
  const auto reg = model::make_registry(ck.model);
  const auto pv = grad::from_unconstrained(reg, ck.params);
  const auto set = io::read_sequence_set(data / "test.json");
  Rng rng(seed);

  io::json out;
  out["code_version"] = kCodeVersion;
  out["seed"] = seed;
  out["prefix"] = pc.prefix;
  out["horizon"] = pc.horizon;
  out["trajectories"] = pc.trajectories;
  out["n_seq"] = set.n_seq();
  double sum_ll = 0.0, sum_pd = 0.0;
  io::json per_seq = io::json::array();
  for (const Mat& y : set.seqs) {
    const auto fr = model::predict_forecast(ck.model, reg, pv, y, pc.prefix,
                                            pc.horizon, pc.trajectories, rng);
    sum_ll += fr.log_lik;
    sum_pd += fr.per_dim;
    per_seq.push_back(fr.log_lik);
  }
  out["mean_log_lik"] = sum_ll / set.n_seq();
  out["mean_per_frame_dim"] = sum_pd / set.n_seq();
  out["per_seq_log_lik"] = per_seq;
  return out;
}

// generate -> train -> eval -> predict in one output tree. With
// ablate_mask a second training run with the mask toggled lands in
// run_ablation so the pair shares one dataset and seed.
inline void run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  const fs::path data = out / "data";
  generate_dataset(cfg, data);

  auto run_one = [&](const ExperimentConfig& c, const fs::path& rdir) {
    train_run(c, data, rdir);
    WallClock ec;
    atomic_save_json(rdir / "eval.json",
                     eval_checkpoint(rdir / "checkpoint.json", data, c.seed));
    append_timing(rdir, "eval_seconds", ec.seconds());
    WallClock pcl;
    atomic_save_json(
        rdir / "predict.json",
        predict_checkpoint(rdir / "checkpoint.json", data, c.predict, c.seed));
    append_timing(rdir, "predict_seconds", pcl.seconds());
  };

  run_one(cfg, out / "run");
  io::json res;
  res["name"] = cfg.name;
  res["kind"] = cfg.kind;
  res["seed"] = cfg.seed;
  res["code_version"] = kCodeVersion;
  res["runs"] = io::json::array({"run"});
  if (cfg.ablate_mask) {
    ExperimentConfig alt = cfg;
    alt.train.use_mask = !alt.train.use_mask;
    run_one(alt, out / "run_ablation");
    res["runs"].push_back("run_ablation");
  }
  atomic_save_json(out / "result.json", res);
}

}  // namespace svae::expt
