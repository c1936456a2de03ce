// SPDX-License-Identifier: Apache-2.0
//
// Linear-Gaussian latent prior x_1 ~ N(mu1, Q1), x_t | x_{t-1} ~
// N(A x_{t-1} + b, Q), with a linear-Gaussian emission used by the
// synthetic studies. Marginal-likelihood routines that need the Kalman
// filter live at the bottom of inference.hpp.
#pragma once

#include <vector>

#include "svae/common.hpp"
#include "svae/gaussian.hpp"

namespace svae::lgssm {

struct LgssmParams {
  Vec mu1;
  Mat Q1;
  Mat A;
  Vec b;
  Mat Q;

  int dim() const { return static_cast<int>(mu1.size()); }

  void check() const {
    const auto d = mu1.size();
    require(Q1.rows() == d && Q1.cols() == d && A.rows() == d &&
                A.cols() == d && b.size() == d && Q.rows() == d &&
                Q.cols() == d,
            "LgssmParams: inconsistent shapes");
  }
};

struct LinearEmission {
  Mat C;
  Vec d;
  Mat R;

  int dim_obs() const { return static_cast<int>(C.rows()); }
  int dim_latent() const { return static_cast<int>(C.cols()); }

  void check() const {
    require(d.size() == C.rows() && R.rows() == C.rows() &&
                R.cols() == C.rows(),
            "LinearEmission: inconsistent shapes");
  }
};

// noise: D x T standard-normal draws, column t for step t.
inline Mat sample_prior(const LgssmParams& theta, int T, const Mat& noise) {
  theta.check();
  const int D = theta.dim();
  require(T >= 1, "sample_prior: T < 1");
  require(noise.rows() == D && noise.cols() == T,
          "sample_prior: noise must be D x T");
  const Mat L1 = checked_llt(symmetrize(theta.Q1), "sample_prior").matrixL();
  const Mat L = checked_llt(symmetrize(theta.Q), "sample_prior").matrixL();
  Mat x(D, T);
  x.col(0) = theta.mu1 + L1 * noise.col(0);
  for (int t = 1; t < T; ++t)
    x.col(t) = theta.A * x.col(t - 1) + theta.b + L * noise.col(t);
  return x;
}

inline double log_prior(const LgssmParams& theta, const Mat& x) {
  theta.check();
  require(x.rows() == theta.dim() && x.cols() >= 1,
          "log_prior: x must be D x T");
  const int T = static_cast<int>(x.cols());
  double lp = gaussian::log_density({theta.mu1, theta.Q1}, x.col(0));
  gaussian::GaussianMoment step{Vec(), theta.Q};
  for (int t = 1; t < T; ++t) {
    step.mean = theta.A * x.col(t - 1) + theta.b;
    lp += gaussian::log_density(step, x.col(t));
  }
  return lp;
}

inline std::vector<gaussian::GaussianMoment> prior_marginals(
    const LgssmParams& theta, int T) {
  theta.check();
  require(T >= 1, "prior_marginals: T < 1");
  std::vector<gaussian::GaussianMoment> out;
  out.reserve(T);
  out.push_back({theta.mu1, symmetrize(theta.Q1)});
  const gaussian::LinearGaussianCond cond{theta.A, theta.b, theta.Q};
  for (int t = 1; t < T; ++t)
    out.push_back(gaussian::pushforward(out.back(), cond));
  return out;
}

// Exact emission likelihoods N(y_t; C x_t + d, R) rewritten as Gaussian
// factors in x_t; the log_norm carries the full likelihood constant, so
// the factor equals the likelihood pointwise.
inline std::vector<gaussian::GaussianNatural> emission_potentials(
    const LinearEmission& em, const Mat& y) {
  em.check();
  require(y.rows() == em.dim_obs(), "emission_potentials: obs dim mismatch");
  const int T = static_cast<int>(y.cols());
  const int N = em.dim_obs();
  const auto llt = checked_llt(symmetrize(em.R), "emission_potentials");
  const Mat Rinv_C = llt.solve(em.C);
  const Mat J = symmetrize(em.C.transpose() * Rinv_C);
  const double logdet_R = logdet_from_llt(llt);
  std::vector<gaussian::GaussianNatural> out;
  out.reserve(T);
  for (int t = 0; t < T; ++t) {
    const Vec r = y.col(t) - em.d;
    const Vec Rinv_r = llt.solve(r);
    const double c =
        -0.5 * (r.dot(Rinv_r) + N * kLog2Pi + logdet_R);
    out.push_back({em.C.transpose() * Rinv_r, J, c, false});
  }
  return out;
}

}  // namespace svae::lgssm
