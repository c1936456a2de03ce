// SPDX-License-Identifier: Apache-2.0
//
// Training loop, config and checkpoint serialization, and the sampled
// forecaster. Checkpoints store the unconstrained parameter vector, so a
// save/load round trip is bit-exact and training can resume mid-run.
#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "svae/io.hpp"
#include "svae/model.hpp"

namespace svae::model {

inline void check_keys(const io::json& j,
                       std::initializer_list<const char*> allowed,
                       const std::string& ctx) {
  require(j.is_object(), ctx + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    require(known, ctx + ": unknown key \"" + it.key() + "\"");
  }
}

inline io::json to_json(const ModelConfig& cfg) {
  io::json j;
  j["latent_dim"] = cfg.latent_dim;
  j["obs_dim"] = cfg.obs_dim;
  j["encoder"] = cfg.encoder;
  j["decoder"] = cfg.decoder;
  j["enc_hidden"] = cfg.enc_hidden;
  j["dec_hidden"] = cfg.dec_hidden;
  j["full_potential_cov"] = cfg.full_potential_cov;
  return j;
}

inline ModelConfig model_config_from_json(const io::json& j) {
  check_keys(j,
             {"latent_dim", "obs_dim", "encoder", "decoder", "enc_hidden",
              "dec_hidden", "full_potential_cov"},
             "model config");
  ModelConfig cfg;
  cfg.latent_dim = j.at("latent_dim").get<int>();
  cfg.obs_dim = j.at("obs_dim").get<int>();
  cfg.encoder = j.value("encoder", cfg.encoder);
  cfg.decoder = j.value("decoder", cfg.decoder);
  cfg.enc_hidden = j.value("enc_hidden", cfg.enc_hidden);
  cfg.dec_hidden = j.value("dec_hidden", cfg.dec_hidden);
  cfg.full_potential_cov =
      j.value("full_potential_cov", cfg.full_potential_cov);
  cfg.validate();
  return cfg;
}

struct TrainConfig {
  int iters = 5000;
  int batch = 10;
  double lr = 1e-3;
  double mask_fraction = 0.4;
  bool use_mask = true;
  int n_samples = 1;
  std::string elbo_mode = "auto";
  int eval_every = 200;

  void validate() const {
    require(iters >= 1, "TrainConfig: iters must be positive");
    require(batch >= 1, "TrainConfig: batch must be positive");
    require(lr > 0.0, "TrainConfig: lr must be positive");
    require(mask_fraction >= 0.0 && mask_fraction <= 1.0,
            "TrainConfig: mask_fraction out of range");
    require(n_samples >= 1, "TrainConfig: n_samples must be positive");
    require(elbo_mode == "auto" || elbo_mode == "analytic" ||
                elbo_mode == "sampled",
            "TrainConfig: elbo_mode must be auto, analytic or sampled");
    require(eval_every >= 1, "TrainConfig: eval_every must be positive");
  }

  DecodeMode resolve_mode(const ModelConfig& cfg) const {
    if (elbo_mode == "analytic") return DecodeMode::kAnalytic;
    if (elbo_mode == "sampled") return DecodeMode::kSampled;
    return cfg.natural_mode();
  }
};

inline io::json to_json(const TrainConfig& tc) {
  io::json j;
  j["iters"] = tc.iters;
  j["batch"] = tc.batch;
  j["lr"] = tc.lr;
  j["mask_fraction"] = tc.mask_fraction;
  j["use_mask"] = tc.use_mask;
  j["n_samples"] = tc.n_samples;
  j["elbo_mode"] = tc.elbo_mode;
  j["eval_every"] = tc.eval_every;
  return j;
}

inline TrainConfig train_config_from_json(const io::json& j) {
  check_keys(j,
             {"iters", "batch", "lr", "mask_fraction", "use_mask",
              "n_samples", "elbo_mode", "eval_every"},
             "train config");
  TrainConfig tc;
  tc.iters = j.value("iters", tc.iters);
  tc.batch = j.value("batch", tc.batch);
  tc.lr = j.value("lr", tc.lr);
  tc.mask_fraction = j.value("mask_fraction", tc.mask_fraction);
  tc.use_mask = j.value("use_mask", tc.use_mask);
  tc.n_samples = j.value("n_samples", tc.n_samples);
  tc.elbo_mode = j.value("elbo_mode", tc.elbo_mode);
  tc.eval_every = j.value("eval_every", tc.eval_every);
  tc.validate();
  return tc;
}

namespace detail {

inline const char* kind_name(grad::ParamKind k) {
  switch (k) {
    case grad::ParamKind::kPlain:
      return "plain";
    case grad::ParamKind::kSpdFull:
      return "spd_full";
    case grad::ParamKind::kSpdDiag:
      return "spd_diag";
  }
  throw ShapeError("kind_name: bad enum");
}

inline std::string b64_vec(const Vec& v) {
  return io::encode_f64(v.data(), static_cast<std::size_t>(v.size()));
}

inline Vec vec_b64(const std::string& s, long want) {
  const auto d = io::decode_f64(s);
  require(static_cast<long>(d.size()) == want,
          "checkpoint: payload length mismatch");
  return Eigen::Map<const Vec>(d.data(), want);
}

}  // namespace detail

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  grad::UnconstrainedParams params;
  grad::AdamState opt;
  std::string rng_state;
};

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ck) {
  const auto reg = make_registry(ck.model);
  require(ck.params.flat.size() == reg.flat_size(),
          "save_checkpoint: parameter size mismatch");
  io::json j;
  j["format_version"] = 1;
  j["model"] = to_json(ck.model);
  j["train"] = to_json(ck.train);
  io::json regj = io::json::array();
  io::json data;
  for (int i = 0; i < reg.count(); ++i) {
    const auto& s = reg.spec(i);
    io::json e;
    e["name"] = s.name;
    e["rows"] = s.rows;
    e["cols"] = s.cols;
    e["kind"] = detail::kind_name(s.kind);
    regj.push_back(e);
    data[s.name] = detail::b64_vec(
        ck.params.flat.segment(reg.offset(i), s.unconstrained_len()));
  }
  j["params"]["registry"] = regj;
  j["params"]["data"] = data;
  j["optimizer"]["step"] = ck.opt.step;
  j["optimizer"]["m"] = detail::b64_vec(ck.opt.m);
  j["optimizer"]["v"] = detail::b64_vec(ck.opt.v);
  j["rng"] = ck.rng_state;
  io::save_json(path, j);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const io::json j = io::load_json(path);
  check_keys(j, {"format_version", "model", "train", "params", "optimizer",
                 "rng"},
             "checkpoint");
  require(j.at("format_version").get<int>() == 1,
          "checkpoint: unsupported format_version");
  Checkpoint ck;
  ck.model = model_config_from_json(j.at("model"));
  ck.train = train_config_from_json(j.at("train"));
  const auto reg = make_registry(ck.model);

  const auto& pj = j.at("params");
  check_keys(pj, {"registry", "data"}, "checkpoint params");
  const auto& regj = pj.at("registry");
  require(static_cast<int>(regj.size()) == reg.count(),
          "checkpoint: registry size mismatch");
  ck.params.flat = Vec::Zero(reg.flat_size());
  for (int i = 0; i < reg.count(); ++i) {
    const auto& s = reg.spec(i);
    const auto& e = regj.at(static_cast<std::size_t>(i));
    check_keys(e, {"name", "rows", "cols", "kind"}, "checkpoint registry");
    require(e.at("name").get<std::string>() == s.name &&
                e.at("rows").get<int>() == s.rows &&
                e.at("cols").get<int>() == s.cols &&
                e.at("kind").get<std::string>() == detail::kind_name(s.kind),
            "checkpoint: registry entry mismatch for " + s.name);
    ck.params.flat.segment(reg.offset(i), s.unconstrained_len()) =
        detail::vec_b64(pj.at("data").at(s.name).get<std::string>(),
                        s.unconstrained_len());
  }
  const auto& oj = j.at("optimizer");
  check_keys(oj, {"step", "m", "v"}, "checkpoint optimizer");
  ck.opt.step = oj.at("step").get<long>();
  ck.opt.m = detail::vec_b64(oj.at("m").get<std::string>(), reg.flat_size());
  ck.opt.v = detail::vec_b64(oj.at("v").get<std::string>(), reg.flat_size());
  ck.rng_state = j.at("rng").get<std::string>();
  return ck;
}

inline double log_mean_exp(const Vec& v) {
  require(v.size() >= 1, "log_mean_exp: empty input");
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().mean());
}

// Mean per-sequence bound over a set, without masking.
inline double mean_elbo(const ModelConfig& cfg,
                        const grad::ParamRegistry& reg,
                        const grad::ParamVector& pv,
                        const io::SequenceSet& set, DecodeMode mode,
                        int n_samples, Rng& rng) {
  require(set.n_seq() >= 1, "mean_elbo: empty set");
  require(set.dims == cfg.obs_dim, "mean_elbo: dims mismatch");
  double total = 0.0;
  for (const Mat& y : set.seqs) {
    Mat noise;
    if (mode == DecodeMode::kSampled)
      noise = rng.normal_mat(cfg.latent_dim, set.T * n_samples);
    total += elbo(cfg, reg, pv, y, {}, mode, n_samples, noise).elbo;
  }
  return total / set.n_seq();
}

struct TrainLogRow {
  int iter = 0;
  double loss = 0.0;
  double val_elbo = 0.0;
  bool has_val = false;
};

struct TrainResult {
  grad::UnconstrainedParams params;
  grad::AdamState opt;
  std::vector<TrainLogRow> history;
  long skipped = 0;
  double final_val_elbo = std::numeric_limits<double>::quiet_NaN();
};

// One iteration is one minibatch step. Sequences are visited in shuffled
// epochs; every sequence gets a fresh mask each time it is drawn. Batches
// with a non-finite loss or gradient are skipped; fifty unusable batches
// in a row abort the run.
inline TrainResult train(const ModelConfig& cfg, const TrainConfig& tc,
                         const io::SequenceSet& train_set,
                         const io::SequenceSet& val_set, Rng& rng,
                         std::ostream* log = nullptr) {
  cfg.validate();
  tc.validate();
  require(train_set.n_seq() >= 1, "train: empty training set");
  require(train_set.dims == cfg.obs_dim, "train: obs dim mismatch");
  require(train_set.T >= 1, "train: empty sequences");

  const auto reg = make_registry(cfg);
  const DecodeMode mode = tc.resolve_mode(cfg);
  if (mode == DecodeMode::kAnalytic)
    require(cfg.decoder == "linear",
            "train: analytic mode needs the linear decoder");

  TrainResult out;
  out.params = init_params(cfg, reg, rng);
  out.opt = grad::AdamState::init(reg.flat_size());
  grad::AdamHyper hyper;
  hyper.lr = tc.lr;

  const int n = train_set.n_seq();
  const int B = std::min(tc.batch, n);
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  int cursor = n;

  std::vector<BatchItem> batch;
  grad::TapeLoss loss(reg, [&](ad::Tape& tape, const grad::TapeParams& tp) {
    return batch_loss_tape(cfg, reg, tape, tp, batch, mode, tc.n_samples);
  });

  long consecutive_bad = 0;
  for (int it = 1; it <= tc.iters; ++it) {
    batch.clear();
    for (int k = 0; k < B; ++k) {
      if (cursor >= n) {
        rng.shuffle(perm);
        cursor = 0;
      }
      BatchItem item;
      item.y = train_set.seqs[static_cast<std::size_t>(
          perm[static_cast<std::size_t>(cursor++)])];
      if (tc.use_mask && tc.mask_fraction > 0.0)
        item.mask = random_mask(rng, train_set.T, tc.mask_fraction);
      if (mode == DecodeMode::kSampled)
        item.noise =
            rng.normal_mat(cfg.latent_dim, train_set.T * tc.n_samples);
      batch.push_back(std::move(item));
    }

    bool usable = true;
    double v = 0.0;
    Vec g;
    try {
      auto vg = loss.value_and_grad(out.params);
      v = vg.first;
      g = std::move(vg.second);
      usable = std::isfinite(v) && g.allFinite();
    } catch (const DegenerateCovarianceError&) {
      usable = false;
    } catch (const CannotNormalizeError&) {
      usable = false;
    }
    if (!usable) {
      ++out.skipped;
      ++consecutive_bad;
      if (log) *log << "iter " << it << ": unusable batch, skipped\n";
      if (consecutive_bad >= 50)
        throw std::runtime_error(
            "train: 50 consecutive unusable batches, aborting");
      continue;
    }
    consecutive_bad = 0;
    grad::adam_step(out.opt, out.params, g, hyper);

    TrainLogRow row;
    row.iter = it;
    row.loss = v;
    if (val_set.n_seq() >= 1 &&
        (it % tc.eval_every == 0 || it == tc.iters)) {
      row.val_elbo = mean_elbo(cfg, reg, from_unconstrained(reg, out.params),
                               val_set, mode, tc.n_samples, rng);
      row.has_val = true;
      out.final_val_elbo = row.val_elbo;
      if (log)
        *log << "iter " << it << ": loss " << v << ", val elbo "
             << row.val_elbo << '\n';
    }
    out.history.push_back(row);
  }
  return out;
}

struct ForecastResult {
  double log_lik = 0.0;
  double per_dim = 0.0;
  std::vector<double> per_step;
};

// Filter the prefix, draw the last filtered state, roll it through the
// transition, decode, and score the next `horizon` frames. The returned
// likelihoods are log-mean-exp over trajectories: jointly over the whole
// horizon for log_lik, marginally per frame for per_step.
inline ForecastResult predict_forecast(const ModelConfig& cfg,
                                       const grad::ParamRegistry& reg,
                                       const grad::ParamVector& pv,
                                       const Mat& y, int prefix, int horizon,
                                       int n_traj, Rng& rng) {
  cfg.validate();
  const int D = cfg.latent_dim;
  const int N = cfg.obs_dim;
  require(y.rows() == N, "predict_forecast: obs dim mismatch");
  require(prefix >= 1 && horizon >= 1 && n_traj >= 1,
          "predict_forecast: prefix, horizon and trajectories must be positive");
  require(prefix + horizon <= y.cols(),
          "predict_forecast: sequence shorter than prefix + horizon");

  const auto mv = make_view(cfg, reg, pv);
  const Mat yp = y.leftCols(prefix);
  const auto pots = encode_core(cfg, mv, yp, prefix, {});
  const auto f = inference::core::filter_core(mv.prior, pots);
  const Mat Lf =
      Mat(checked_llt(symmetrize(f.Pfil.back()), "predict_forecast: Pfil")
              .matrixL());
  const Mat LQ =
      Mat(checked_llt(symmetrize(mv.prior.Q), "predict_forecast: Q")
              .matrixL());

  Mat X(D, static_cast<Eigen::Index>(n_traj) * horizon);
  for (int j = 0; j < n_traj; ++j) {
    Vec x = f.mfil.back() + Lf * rng.normal_vec(D);
    for (int k = 0; k < horizon; ++k) {
      x = mv.prior.A * x + mv.prior.b + LQ * rng.normal_vec(D);
      X.col(static_cast<Eigen::Index>(j) * horizon + k) = x;
    }
  }
  const Mat means = decode_mean_core(cfg, mv, X, n_traj * horizon);
  const Vec rdiag = mv.dec_R.diagonal();
  const Vec rinv = rdiag.cwiseInverse();
  const double base = N * kLog2Pi + rdiag.array().log().sum();

  Mat ll(n_traj, horizon);
  for (int j = 0; j < n_traj; ++j)
    for (int k = 0; k < horizon; ++k) {
      const Vec res =
          y.col(prefix + k) -
          means.col(static_cast<Eigen::Index>(j) * horizon + k);
      ll(j, k) = -0.5 * (base + res.dot(rinv.cwiseProduct(res)));
    }

  ForecastResult out;
  out.log_lik = log_mean_exp(ll.rowwise().sum());
  out.per_dim = out.log_lik / (static_cast<double>(horizon) * N);
  out.per_step.reserve(static_cast<std::size_t>(horizon));
  for (int k = 0; k < horizon; ++k)
    out.per_step.push_back(log_mean_exp(ll.col(k)));
  return out;
}

}  // namespace svae::model
