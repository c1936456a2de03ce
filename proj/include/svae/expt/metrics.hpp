// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: normalized bound values against the null/true model
// anchors, and held-out R^2 of ordinary least squares readouts from
// inferred latents.
#pragma once

#include <cmath>
#include <vector>

#include "svae/common.hpp"
#include "svae/inference.hpp"
#include "svae/model.hpp"

namespace svae::expt {

// Maps a per-sequence bound so the null model sits at 0 and the true model
// at 1. Requires a non-degenerate gap.
inline double normalized_elbo(double elbo, double null_mll, double true_mll) {
  require(true_mll > null_mll,
          "normalized_elbo: true-model likelihood does not exceed the null model");
  return (elbo - null_mll) / (true_mll - null_mll);
}

struct R2Result {
  double r2 = 0.0;
  bool pinv_fallback = false;
};

// Ordinary least squares with intercept, fit on the train design and scored
// on held-out data. Multiple target columns pool residuals into a single
// R^2. Rank-deficient designs fall back to the minimum-norm solution and
// set the flag.
inline R2Result linear_decode_r2(const Mat& Xtr, const Mat& Ytr,
                                 const Mat& Xte, const Mat& Yte) {
  const auto n_tr = Xtr.rows(), d = Xtr.cols();
  require(Ytr.rows() == n_tr, "linear_decode_r2: train target rows mismatch");
  require(Xte.cols() == d, "linear_decode_r2: feature dim mismatch");
  require(Yte.rows() == Xte.rows(), "linear_decode_r2: test target rows mismatch");
  require(Yte.cols() == Ytr.cols(), "linear_decode_r2: target dim mismatch");
  require(n_tr >= d + 2, "linear_decode_r2: need at least d + 2 train samples");

  Mat Atr(n_tr, d + 1);
  Atr.col(0).setOnes();
  Atr.rightCols(d) = Xtr;
  Mat Ate(Xte.rows(), d + 1);
  Ate.col(0).setOnes();
  Ate.rightCols(d) = Xte;

  R2Result out;
  Eigen::ColPivHouseholderQR<Mat> qr(Atr);
  Mat W;
  if (qr.rank() < d + 1) {
    out.pinv_fallback = true;
    W = Atr.completeOrthogonalDecomposition().pseudoInverse() * Ytr;
  } else {
    W = qr.solve(Ytr);
  }

  const Mat res = Yte - Ate * W;
  const Mat centered = Yte.rowwise() - Yte.colwise().mean();
  const double ss_res = res.squaredNorm();
  const double ss_tot = centered.squaredNorm();
  require(ss_tot > 0.0, "linear_decode_r2: constant held-out targets");
  out.r2 = 1.0 - ss_res / ss_tot;
  return out;
}

// Posterior mean latents under the fitted model, one row per (sequence,
// frame) pair, aligned with rows produced from the matching truth set.
inline Mat smoothed_latents(const model::ModelConfig& cfg,
                            const grad::ParamRegistry& reg,
                            const grad::ParamVector& pv,
                            const io::SequenceSet& set) {
  const auto mv = model::make_view(cfg, reg, pv);
  const int D = cfg.latent_dim;
  Mat out(static_cast<Eigen::Index>(set.n_seq()) * set.T, D);
  Eigen::Index row = 0;
  for (const Mat& y : set.seqs) {
    const model::Mask mask(static_cast<std::size_t>(set.T), 0);
    const auto pots = model::encode_core<Mat>(cfg, mv, y, set.T, mask);
    const auto fr = inference::core::filter_core(mv.prior, pots);
    const auto G = inference::core::gains_core(mv.prior, fr);
    const auto sm = inference::core::smooth_core(fr, G);
    for (int t = 0; t < set.T; ++t)
      out.row(row++) = sm.ms[static_cast<std::size_t>(t)].transpose();
  }
  return out;
}

// Stacks ground-truth rows to match smoothed_latents: one row per frame.
inline Mat stack_truth_rows(const io::SequenceSet& truth) {
  Mat out(static_cast<Eigen::Index>(truth.n_seq()) * truth.T, truth.dims);
  Eigen::Index row = 0;
  for (const Mat& s : truth.seqs)
    for (int t = 0; t < truth.T; ++t)
      out.row(row++) = s.col(t).transpose();
  return out;
}

}  // namespace svae::expt
