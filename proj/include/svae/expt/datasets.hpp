// SPDX-License-Identifier: Apache-2.0
//
// Synthetic datasets: sequences from randomly rotated linear dynamical
// systems, and rendered pendulum movies with ground-truth angles. Both
// generators are pure functions of their config (including the seed), so
// regeneration is bit-identical.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "svae/io.hpp"
#include "svae/lgssm.hpp"
#include "svae/rng.hpp"
#include "svae/train.hpp"

namespace svae::expt {

struct LdsDatasetConfig {
  int latent_dim = 3;
  int obs_dim = 5;
  double q = 0.1;
  double r = 0.1;
  int T = 200;
  int n_seq = 100;
  double rotation_angle = 2.0 * std::numbers::pi * 3.0 / 200.0;
  std::uint64_t seed = 1;

  void validate() const {
    require(latent_dim >= 2, "LdsDatasetConfig: need at least 2 latent dims");
    require(obs_dim >= 1, "LdsDatasetConfig: obs_dim must be positive");
    require(q > 0.0 && r > 0.0, "LdsDatasetConfig: noise scales must be positive");
    require(T >= 1, "LdsDatasetConfig: T must be positive");
    require(n_seq >= 3, "LdsDatasetConfig: need at least 3 sequences");
  }

  double snr() const { return q / r; }
};

inline LdsDatasetConfig lds_config_from_json(const io::json& j,
                                             std::uint64_t default_seed) {
  model::check_keys(j,
                    {"latent_dim", "obs_dim", "q", "r", "T", "n_seq",
                     "rotation_angle", "seed"},
                    "lds dataset config");
  LdsDatasetConfig cfg;
  cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
  cfg.obs_dim = j.value("obs_dim", cfg.obs_dim);
  cfg.q = j.value("q", cfg.q);
  cfg.r = j.value("r", cfg.r);
  cfg.T = j.value("T", cfg.T);
  cfg.n_seq = j.value("n_seq", cfg.n_seq);
  cfg.rotation_angle = j.value("rotation_angle", cfg.rotation_angle);
  cfg.seed = j.value("seed", default_seed);
  cfg.validate();
  return cfg;
}

inline io::json to_json(const LdsDatasetConfig& cfg) {
  io::json j;
  j["latent_dim"] = cfg.latent_dim;
  j["obs_dim"] = cfg.obs_dim;
  j["q"] = cfg.q;
  j["r"] = cfg.r;
  j["T"] = cfg.T;
  j["n_seq"] = cfg.n_seq;
  j["rotation_angle"] = cfg.rotation_angle;
  j["seed"] = cfg.seed;
  return j;
}

// Rotation by `angle` in a uniformly random 2-plane, identity on the
// orthogonal complement.
inline Mat rotation_in_random_plane(Rng& rng, int D, double angle) {
  require(D >= 2, "rotation_in_random_plane: need D >= 2");
  Vec u = rng.normal_vec(D);
  u /= u.norm();
  Vec v = rng.normal_vec(D);
  v -= u.dot(v) * u;
  v /= v.norm();
  const double ca = std::cos(angle), sa = std::sin(angle);
  return Mat::Identity(D, D) + (ca - 1.0) * (u * u.transpose() + v * v.transpose()) +
         sa * (u * v.transpose() - v * u.transpose());
}

struct SplitSizes {
  int train = 0, val = 0, test = 0;
};

inline SplitSizes split_sizes(int n) {
  SplitSizes s;
  s.val = std::max(1, n / 10);
  s.test = std::max(1, n / 10);
  s.train = n - s.val - s.test;
  require(s.train >= 1, "split_sizes: too few sequences");
  return s;
}

namespace detail {

inline void split_three(Rng& rng, std::vector<Mat> seqs, int dims, int T,
                        io::SequenceSet& train, io::SequenceSet& val,
                        io::SequenceSet& test,
                        std::vector<Mat>* companion = nullptr,
                        io::SequenceSet* ctrain = nullptr,
                        io::SequenceSet* cval = nullptr,
                        io::SequenceSet* ctest = nullptr) {
  const int n = static_cast<int>(seqs.size());
  const auto sz = split_sizes(n);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  auto fill = [&](io::SequenceSet& dst, std::vector<Mat>& src, int cdims,
                  int lo, int hi) {
    dst.dims = cdims;
    dst.T = T;
    dst.seqs.clear();
    for (int i = lo; i < hi; ++i)
      dst.seqs.push_back(
          std::move(src[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]));
  };
  fill(train, seqs, dims, 0, sz.train);
  fill(val, seqs, dims, sz.train, sz.train + sz.val);
  fill(test, seqs, dims, sz.train + sz.val, n);
  if (companion != nullptr) {
    const int cdims = static_cast<int>((*companion)[0].rows());
    fill(*ctrain, *companion, cdims, 0, sz.train);
    fill(*cval, *companion, cdims, sz.train, sz.train + sz.val);
    fill(*ctest, *companion, cdims, sz.train + sz.val, n);
  }
}

}  // namespace detail

struct LdsDataset {
  lgssm::LgssmParams theta;
  lgssm::LinearEmission em;
  io::SequenceSet y_train, y_val, y_test;
  io::SequenceSet x_train, x_val, x_test;
  double snr = 0.0;
};

inline LdsDataset gen_lds_dataset(const LdsDatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int D = cfg.latent_dim, N = cfg.obs_dim;

  LdsDataset out;
  out.theta.mu1 = Vec::Zero(D);
  out.theta.Q1 = Mat::Identity(D, D);
  out.theta.A = rotation_in_random_plane(rng, D, cfg.rotation_angle);
  out.theta.b = Vec::Zero(D);
  out.theta.Q = cfg.q * Mat::Identity(D, D);
  out.em.C = rng.normal_mat(N, D) / std::sqrt(static_cast<double>(D));
  out.em.d = Vec::Zero(N);
  out.em.R = cfg.r * Mat::Identity(N, N);
  out.snr = cfg.snr();

  std::vector<Mat> ys, xs;
  ys.reserve(static_cast<std::size_t>(cfg.n_seq));
  xs.reserve(static_cast<std::size_t>(cfg.n_seq));
  const double sr = std::sqrt(cfg.r);
  for (int i = 0; i < cfg.n_seq; ++i) {
    const Mat x = lgssm::sample_prior(out.theta, cfg.T,
                                      rng.normal_mat(D, cfg.T));
    const Mat y = out.em.C * x +
                  out.em.d.replicate(1, cfg.T) +
                  sr * rng.normal_mat(N, cfg.T);
    xs.push_back(x);
    ys.push_back(y);
  }
  detail::split_three(rng, std::move(ys), N, cfg.T, out.y_train, out.y_val,
                      out.y_test, &xs, &out.x_train, &out.x_val,
                      &out.x_test);
  return out;
}

struct PendulumConfig {
  int image = 24;
  int T = 100;
  int n_seq = 100;
  double g_over_l = 9.81;
  double dt = 0.05;
  int substeps = 8;
  double theta0_min = -std::numbers::pi;
  double theta0_max = std::numbers::pi;
  double omega0_min = -1.0;
  double omega0_max = 1.0;
  double noise_std = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    require(image >= 4, "PendulumConfig: image too small");
    require(T >= 1 && n_seq >= 3, "PendulumConfig: need T >= 1, n_seq >= 3");
    require(g_over_l > 0.0 && dt > 0.0, "PendulumConfig: physical constants must be positive");
    require(substeps >= 1, "PendulumConfig: substeps must be positive");
    require(theta0_min <= theta0_max && omega0_min <= omega0_max,
            "PendulumConfig: empty initial-condition range");
    require(noise_std >= 0.0, "PendulumConfig: negative noise std");
  }
};

inline PendulumConfig pendulum_config_from_json(const io::json& j,
                                                std::uint64_t default_seed) {
  model::check_keys(j,
                    {"image", "T", "n_seq", "g_over_l", "dt", "substeps",
                     "theta0_min", "theta0_max", "omega0_min", "omega0_max",
                     "noise_std", "seed"},
                    "pendulum dataset config");
  PendulumConfig cfg;
  cfg.image = j.value("image", cfg.image);
  cfg.T = j.value("T", cfg.T);
  cfg.n_seq = j.value("n_seq", cfg.n_seq);
  cfg.g_over_l = j.value("g_over_l", cfg.g_over_l);
  cfg.dt = j.value("dt", cfg.dt);
  cfg.substeps = j.value("substeps", cfg.substeps);
  cfg.theta0_min = j.value("theta0_min", cfg.theta0_min);
  cfg.theta0_max = j.value("theta0_max", cfg.theta0_max);
  cfg.omega0_min = j.value("omega0_min", cfg.omega0_min);
  cfg.omega0_max = j.value("omega0_max", cfg.omega0_max);
  cfg.noise_std = j.value("noise_std", cfg.noise_std);
  cfg.seed = j.value("seed", default_seed);
  cfg.validate();
  return cfg;
}

inline io::json to_json(const PendulumConfig& cfg) {
  io::json j;
  j["image"] = cfg.image;
  j["T"] = cfg.T;
  j["n_seq"] = cfg.n_seq;
  j["g_over_l"] = cfg.g_over_l;
  j["dt"] = cfg.dt;
  j["substeps"] = cfg.substeps;
  j["theta0_min"] = cfg.theta0_min;
  j["theta0_max"] = cfg.theta0_max;
  j["omega0_min"] = cfg.omega0_min;
  j["omega0_max"] = cfg.omega0_max;
  j["noise_std"] = cfg.noise_std;
  j["seed"] = cfg.seed;
  return j;
}

// States (theta, omega) at frame times for theta'' = -(g/l) sin theta,
// classic fixed-step fourth-order integration with `substeps` internal
// steps per frame.
inline Mat simulate_pendulum(double g_over_l, double dt, int substeps,
                             double theta0, double omega0, int T) {
  require(T >= 1 && substeps >= 1 && dt > 0.0, "simulate_pendulum: bad args");
  Mat states(2, T);
  double th = theta0, om = omega0;
  states(0, 0) = th;
  states(1, 0) = om;
  const double h = dt / substeps;
  auto acc = [g_over_l](double a) { return -g_over_l * std::sin(a); };
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < substeps; ++s) {
      const double k1t = om, k1o = acc(th);
      const double k2t = om + 0.5 * h * k1o, k2o = acc(th + 0.5 * h * k1t);
      const double k3t = om + 0.5 * h * k2o, k3o = acc(th + 0.5 * h * k2t);
      const double k4t = om + h * k3o, k4o = acc(th + h * k3t);
      th += h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t);
      om += h / 6.0 * (k1o + 2.0 * k2o + 2.0 * k3o + k4o);
    }
    states(0, t) = th;
    states(1, t) = om;
  }
  return states;
}

inline double pendulum_energy(double g_over_l, double theta, double omega) {
  return 0.5 * omega * omega - g_over_l * std::cos(theta);
}

// Anti-aliased rod of width 2 px from the image center, angle measured
// from the downward vertical; intensities in [0, 1].
inline Mat render_pendulum_frame(int S, double theta) {
  require(S >= 4, "render_pendulum_frame: image too small");
  const double cx = 0.5 * (S - 1), cy = 0.5 * (S - 1);
  const double len = 0.5 * S - 1.5;
  const double ex = cx + len * std::sin(theta);
  const double ey = cy + len * std::cos(theta);
  const double dx = ex - cx, dy = ey - cy;
  const double seg2 = dx * dx + dy * dy;
  Mat img(S, S);
  for (int r = 0; r < S; ++r) {
    for (int c = 0; c < S; ++c) {
      const double px = static_cast<double>(c), py = static_cast<double>(r);
      double u = seg2 > 0.0 ? ((px - cx) * dx + (py - cy) * dy) / seg2 : 0.0;
      u = std::clamp(u, 0.0, 1.0);
      const double qx = cx + u * dx - px, qy = cy + u * dy - py;
      const double dist = std::sqrt(qx * qx + qy * qy);
      img(r, c) = std::clamp(1.5 - dist, 0.0, 1.0);
    }
  }
  return img;
}

struct PendulumDataset {
  io::SequenceSet y_train, y_val, y_test;
  io::SequenceSet truth_train, truth_val, truth_test;  // rows: angle, velocity
};

inline PendulumDataset gen_pendulum_dataset(const PendulumConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int S = cfg.image;
  const int P = S * S;

  std::vector<Mat> ys, truths;
  ys.reserve(static_cast<std::size_t>(cfg.n_seq));
  truths.reserve(static_cast<std::size_t>(cfg.n_seq));
  for (int i = 0; i < cfg.n_seq; ++i) {
    const double th0 = rng.uniform(cfg.theta0_min, cfg.theta0_max);
    const double om0 = rng.uniform(cfg.omega0_min, cfg.omega0_max);
    const Mat states = simulate_pendulum(cfg.g_over_l, cfg.dt, cfg.substeps,
                                         th0, om0, cfg.T);
    Mat y(P, cfg.T);
    for (int t = 0; t < cfg.T; ++t) {
      const Mat img = render_pendulum_frame(S, states(0, t));
      for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) y(r * S + c, t) = img(r, c);
    }
    if (cfg.noise_std > 0.0)
      y += cfg.noise_std * rng.normal_mat(P, cfg.T);
    ys.push_back(std::move(y));
    truths.push_back(states);
  }

  PendulumDataset out;
  detail::split_three(rng, std::move(ys), P, cfg.T, out.y_train, out.y_val,
                      out.y_test, &truths, &out.truth_train, &out.truth_val,
                      &out.truth_test);
  return out;
}

}  // namespace svae::expt
