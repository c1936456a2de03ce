// SPDX-License-Identifier: Apache-2.0
//
// Dense multivariate Gaussian algebra in moment and information form.
// Factors in information form read exp(-1/2 x'Jx + h'x + log_norm); the
// zero-precision factor (J=0, h=0, log_norm=0) is the multiplicative
// identity and models a dropped (masked) observation.
#pragma once

#include <utility>

#include "svae/common.hpp"

namespace svae::gaussian {

struct GaussianMoment {
  Vec mean;
  Mat cov;

  int dim() const { return static_cast<int>(mean.size()); }
};

struct GaussianNatural {
  Vec h;
  Mat J;
  double log_norm = 0.0;
  // Diagonal-precision fast path; when set, J is stored as a full matrix
  // whose off-diagonal entries are zero.
  bool diagonal = false;

  int dim() const { return static_cast<int>(h.size()); }

  static GaussianNatural masked(int dim) {
    return {Vec::Zero(dim), Mat::Zero(dim, dim), 0.0, true};
  }

  bool is_masked() const {
    return h.isZero(0.0) && J.isZero(0.0) && log_norm == 0.0;
  }
};

struct LinearGaussianCond {
  Mat A;
  Vec b;
  Mat Q;

  int dim_out() const { return static_cast<int>(A.rows()); }
  int dim_in() const { return static_cast<int>(A.cols()); }
};

inline GaussianNatural to_natural(const GaussianMoment& g) {
  require_symmetric(g.cov, "to_natural");
  const int d = g.dim();
  const auto llt = checked_llt(g.cov, "to_natural");
  Mat J = llt.solve(Mat::Identity(d, d));
  J = symmetrize(J);
  Vec h = J * g.mean;
  // log_norm makes the factor integrate to one: the factor is then exactly
  // the normalized density N(x; mean, cov).
  const double log_det_cov = logdet_from_llt(llt);
  const double log_norm =
      -0.5 * g.mean.dot(h) - 0.5 * d * kLog2Pi - 0.5 * log_det_cov;
  return {std::move(h), std::move(J), log_norm, false};
}

inline GaussianMoment to_moment(const GaussianNatural& n) {
  const int d = n.dim();
  if (n.diagonal) {
    Vec jd = n.J.diagonal();
    if ((jd.array() <= 0.0).any())
      throw CannotNormalizeError("to_moment: singular diagonal precision");
    Vec var = jd.cwiseInverse();
    return {var.cwiseProduct(n.h), Mat(var.asDiagonal())};
  }
  require_symmetric(n.J, "to_moment");
  Eigen::LLT<Mat> llt(n.J);
  if (llt.info() != Eigen::Success)
    throw CannotNormalizeError("to_moment: precision not positive definite");
  Mat cov = symmetrize(llt.solve(Mat::Identity(d, d)));
  Vec mean = cov * n.h;
  return {std::move(mean), std::move(cov)};
}

inline GaussianNatural multiply(const GaussianNatural& a,
                                const GaussianNatural& b) {
  require(a.dim() == b.dim(), "multiply: dimension mismatch");
  return {a.h + b.h, a.J + b.J, a.log_norm + b.log_norm,
          a.diagonal && b.diagonal};
}

inline GaussianMoment pushforward(const GaussianMoment& p,
                                  const LinearGaussianCond& cond) {
  require(cond.dim_in() == p.dim(), "pushforward: shape mismatch");
  require(cond.b.size() == cond.A.rows() && cond.Q.rows() == cond.A.rows() &&
              cond.Q.cols() == cond.A.rows(),
          "pushforward: inconsistent conditional");
  Vec mean = cond.A * p.mean + cond.b;
  Mat cov = symmetrize(cond.A * p.cov * cond.A.transpose() + cond.Q);
  return {std::move(mean), std::move(cov)};
}

inline double kl_moment(const GaussianMoment& p, const GaussianMoment& q) {
  require(p.dim() == q.dim(), "kl_moment: dimension mismatch");
  require_symmetric(p.cov, "kl_moment(p)");
  require_symmetric(q.cov, "kl_moment(q)");
  const int d = p.dim();
  const auto llt_q = checked_llt(q.cov, "kl_moment(q)");
  const auto llt_p = checked_llt(p.cov, "kl_moment(p)");
  const Mat qinv_p = llt_q.solve(p.cov);
  const Vec dm = q.mean - p.mean;
  const double quad = dm.dot(llt_q.solve(dm));
  const double logdet_ratio = logdet_from_llt(llt_q) - logdet_from_llt(llt_p);
  return 0.5 * (qinv_p.trace() + quad - d + logdet_ratio);
}

// E_{x~under}[-1/2 x'Jx + h'x + log_norm], the analytic expectation of a
// log-factor; linear in (h, J, log_norm).
inline double expected_log_factor(const GaussianNatural& factor,
                                  const GaussianMoment& under) {
  require(factor.dim() == under.dim(), "expected_log_factor: shape mismatch");
  const Vec& m = under.mean;
  double quad;
  if (factor.diagonal) {
    quad = factor.J.diagonal().dot(under.cov.diagonal() + m.cwiseProduct(m));
  } else {
    quad = factor.J.cwiseProduct(under.cov).sum() + m.dot(factor.J * m);
  }
  return -0.5 * quad + factor.h.dot(m) + factor.log_norm;
}

inline double log_density(const GaussianMoment& g, const Vec& x) {
  require(x.size() == g.mean.size(), "log_density: shape mismatch");
  require_symmetric(g.cov, "log_density");
  const auto llt = checked_llt(g.cov, "log_density");
  const Vec r = x - g.mean;
  return -0.5 * (g.dim() * kLog2Pi + logdet_from_llt(llt) +
                 r.dot(llt.solve(r)));
}

}  // namespace svae::gaussian
