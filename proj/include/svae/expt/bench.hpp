// SPDX-License-Identifier: Apache-2.0
//
// Wall-clock comparison of the sequential and scan-structured gradient
// backends on one full bound-plus-gradient evaluation over a fixed batch.
// Parameters stay fixed across reps so every timing sees identical inputs
// and both backends must report the same loss.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "svae/grad.hpp"
#include "svae/model.hpp"
#include "svae/parallel_elbo.hpp"
#include "svae/threading.hpp"

namespace svae::expt {

struct BenchConfig {
  std::vector<int> lengths{1024, 4096, 16384};
  std::vector<std::string> backends{"seq", "par"};
  int reps = 5;
  int warmup = 1;
  int batch = 10;
  int latent_dim = 3;
  int obs_dim = 5;
  std::uint64_t seed = 1;

  void validate() const {
    require(!lengths.empty() && !backends.empty(), "BenchConfig: nothing to run");
    for (const int T : lengths) require(T >= 1, "BenchConfig: bad length");
    for (const auto& b : backends)
      require(b == "seq" || b == "par", "BenchConfig: unknown backend " + b);
    require(reps >= 1 && warmup >= 0, "BenchConfig: bad rep counts");
    require(batch >= 1, "BenchConfig: bad batch size");
    require(latent_dim >= 1 && obs_dim >= 1, "BenchConfig: bad dims");
  }
};

struct BenchRow {
  int T = 0;
  std::string backend;
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  double loss = 0.0;
};

struct BenchReport {
  int cores = 0;
  int threads = 0;
  std::vector<BenchRow> rows;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

inline BenchReport benchmark_runtime(const BenchConfig& bc) {
  bc.validate();
  model::ModelConfig cfg;
  cfg.latent_dim = bc.latent_dim;
  cfg.obs_dim = bc.obs_dim;
  cfg.encoder = "linear";
  cfg.decoder = "linear";
  cfg.validate();

  BenchReport rep;
  rep.cores = hardware_cores();
  rep.threads = thread_budget();

  for (const int T : bc.lengths) {
    Rng rng(bc.seed);
    const auto reg = model::make_registry(cfg);
    const auto u = model::init_params(cfg, reg, rng);

    std::vector<model::BatchItem> batch;
    batch.reserve(static_cast<std::size_t>(bc.batch));
    for (int i = 0; i < bc.batch; ++i) {
      model::BatchItem item;
      item.y = rng.normal_mat(cfg.obs_dim, T);
      item.mask.assign(static_cast<std::size_t>(T), 0);
      batch.push_back(std::move(item));
    }

    // One pass over the batch with per-sequence tapes; gradients accumulate
    // into a running mean so memory stays bounded in T.
    auto eval_seq = [&]() {
      double loss = 0.0;
      Vec g = Vec::Zero(reg.flat_size());
      for (const auto& item : batch) {
        const std::vector<model::BatchItem> one{item};
        grad::TapeLoss tl(reg, [&](ad::Tape& tape, const grad::TapeParams& tp) {
          return model::batch_loss_tape(cfg, reg, tape, tp, one,
                                        model::DecodeMode::kAnalytic, 1);
        });
        const auto vg = tl.value_and_grad(u);
        loss += vg.first;
        g += vg.second;
      }
      g /= static_cast<double>(batch.size());
      return loss / static_cast<double>(batch.size());
    };
    par::ParallelBatchLoss pl(cfg, reg, &batch, model::DecodeMode::kAnalytic,
                              1, par::Executor::kParallel);
    auto eval_par = [&]() { return pl.value_and_grad(u).first; };
    auto eval_backend = [&](const std::string& name) {
      return name == "seq" ? eval_seq() : eval_par();
    };

    for (const auto& name : bc.backends)
      for (int w = 0; w < bc.warmup; ++w) (void)eval_backend(name);

    std::vector<std::vector<double>> times(bc.backends.size());
    std::vector<double> losses(bc.backends.size(), 0.0);
    for (int r = 0; r < bc.reps; ++r) {
      for (std::size_t bi = 0; bi < bc.backends.size(); ++bi) {
        const auto t0 = std::chrono::steady_clock::now();
        const double loss = eval_backend(bc.backends[bi]);
        const auto t1 = std::chrono::steady_clock::now();
        times[bi].push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
        losses[bi] = loss;
      }
    }

    for (std::size_t bi = 0; bi < bc.backends.size(); ++bi) {
      BenchRow row;
      row.T = T;
      row.backend = bc.backends[bi];
      row.median_ms = detail::median_of(times[bi]);
      row.min_ms = *std::min_element(times[bi].begin(), times[bi].end());
      row.max_ms = *std::max_element(times[bi].begin(), times[bi].end());
      row.loss = losses[bi];
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

}  // namespace svae::expt
