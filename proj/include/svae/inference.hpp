// SPDX-License-Identifier: Apache-2.0
//
// Sequential exact inference for the surrogate problem prior x potentials:
// Kalman filter with accumulated log-normalizer, RTS smoother with
// cross-covariances, reparameterized forward-filter backward-sampling, and
// the analytic KL(q || prior).
//
// The numeric cores are templates over the algebra value type, so they run
// both on plain matrices and under the reverse-mode tape.
#pragma once

#include <vector>

#include "svae/algebra.hpp"
#include "svae/common.hpp"
#include "svae/gaussian.hpp"
#include "svae/lgssm.hpp"

namespace svae::inference {

using PotentialSeq = std::vector<gaussian::GaussianNatural>;

struct FilterResult {
  std::vector<gaussian::GaussianMoment> predicted;
  std::vector<gaussian::GaussianMoment> filtered;
  double log_normalizer = 0.0;

  int T() const { return static_cast<int>(filtered.size()); }
};

struct PosteriorResult {
  std::vector<gaussian::GaussianMoment> smoothed;
  std::vector<Mat> gains;      // T-1 entries, G_t maps x_{t+1} deviations
  std::vector<Mat> cross_cov;  // T-1 entries, Cov(x_t, x_{t+1})
  double log_normalizer = 0.0;

  int T() const { return static_cast<int>(smoothed.size()); }
};

namespace core {

template <class T>
struct PriorT {
  T mu1, Q1, A, b, Q;
};

// One potential exp(-1/2 x'Jx + h'x + c); c is a 1x1 scalar. A masked
// potential is skipped structurally so it contributes nothing to values or
// gradients.
template <class T>
struct PotT {
  T h, J, c;
  bool masked = false;
};

template <class T>
struct FilterCore {
  std::vector<T> mpred, Ppred, Jpred, mfil, Pfil;
  T log_z;
};

template <class T>
FilterCore<T> filter_core(const PriorT<T>& pr,
                          const std::vector<PotT<T>>& psi) {
  const int Tn = static_cast<int>(psi.size());
  require(Tn >= 1, "filter_core: empty potential sequence");
  FilterCore<T> out;
  out.mpred.reserve(Tn);
  out.Ppred.reserve(Tn);
  out.Jpred.reserve(Tn);
  out.mfil.reserve(Tn);
  out.Pfil.reserve(Tn);
  T log_z = alg::lift(pr.mu1, Mat::Zero(1, 1));
  T m = pr.mu1;
  T P = pr.Q1;
  for (int t = 0; t < Tn; ++t) {
    if (t > 0) {
      m = alg::add(alg::matmul(pr.A, out.mfil.back()), pr.b);
      P = alg::sym(alg::add(
          alg::matmul(alg::matmul(pr.A, out.Pfil.back()),
                      alg::transpose(pr.A)),
          pr.Q));
    }
    out.mpred.push_back(m);
    out.Ppred.push_back(P);
    T Jp = alg::spd_inverse(P);
    out.Jpred.push_back(Jp);
    if (psi[t].masked) {
      out.mfil.push_back(m);
      out.Pfil.push_back(P);
      continue;
    }
    T hp = alg::matmul(Jp, m);
    T Jf = alg::add(Jp, psi[t].J);
    T hf = alg::add(hp, psi[t].h);
    T Pf = alg::spd_inverse(Jf);
    T mf = alg::matmul(Pf, hf);
    // log ∫ N(x; m, P) ψ(x) dx =
    //   -1/2 m'h_p - 1/2 log|P| + c - 1/2 log|J_f| + 1/2 h_f' P_f h_f
    T inc = alg::add(
        alg::add(alg::scale(alg::dot(m, hp), -0.5),
                 alg::scale(alg::spd_logdet(P), -0.5)),
        alg::add(psi[t].c,
                 alg::add(alg::scale(alg::spd_logdet(Jf), -0.5),
                          alg::scale(alg::dot(hf, mf), 0.5))));
    log_z = alg::add(log_z, inc);
    out.mfil.push_back(mf);
    out.Pfil.push_back(Pf);
  }
  out.log_z = log_z;
  return out;
}

template <class T>
std::vector<T> gains_core(const PriorT<T>& pr, const FilterCore<T>& f) {
  const int Tn = static_cast<int>(f.mfil.size());
  std::vector<T> G;
  G.reserve(Tn > 0 ? Tn - 1 : 0);
  for (int t = 0; t + 1 < Tn; ++t)
    G.push_back(alg::matmul(alg::matmul(f.Pfil[t], alg::transpose(pr.A)),
                            f.Jpred[t + 1]));
  return G;
}

template <class T>
struct SmoothCore {
  std::vector<T> ms, Ps, cross;
};

template <class T>
SmoothCore<T> smooth_core(const FilterCore<T>& f, const std::vector<T>& G) {
  const int Tn = static_cast<int>(f.mfil.size());
  SmoothCore<T> out;
  out.ms.resize(Tn);
  out.Ps.resize(Tn);
  out.cross.resize(Tn > 0 ? Tn - 1 : 0);
  out.ms[Tn - 1] = f.mfil[Tn - 1];
  out.Ps[Tn - 1] = f.Pfil[Tn - 1];
  for (int t = Tn - 2; t >= 0; --t) {
    out.ms[t] = alg::add(
        f.mfil[t],
        alg::matmul(G[t], alg::sub(out.ms[t + 1], f.mpred[t + 1])));
    out.Ps[t] = alg::sym(alg::add(
        f.Pfil[t],
        alg::matmul(
            alg::matmul(G[t], alg::sub(out.Ps[t + 1], f.Ppred[t + 1])),
            alg::transpose(G[t]))));
    out.cross[t] = alg::matmul(G[t], out.Ps[t + 1]);
  }
  return out;
}

// eps: one D x 1 value per step. Backward conditional sampling; with all
// eps zero this reproduces the smoothed means.
template <class T>
std::vector<T> ffbs_core(const FilterCore<T>& f, const std::vector<T>& G,
                         const std::vector<T>& eps) {
  const int Tn = static_cast<int>(f.mfil.size());
  require(static_cast<int>(eps.size()) == Tn, "ffbs_core: noise length");
  std::vector<T> x(Tn);
  x[Tn - 1] =
      alg::add(f.mfil[Tn - 1],
               alg::matmul(alg::cholesky_lower(f.Pfil[Tn - 1]), eps[Tn - 1]));
  for (int t = Tn - 2; t >= 0; --t) {
    T cond_cov = alg::sym(alg::sub(
        f.Pfil[t], alg::matmul(alg::matmul(G[t], f.Ppred[t + 1]),
                               alg::transpose(G[t]))));
    x[t] = alg::add(
        alg::add(f.mfil[t],
                 alg::matmul(G[t], alg::sub(x[t + 1], f.mpred[t + 1]))),
        alg::matmul(alg::cholesky_lower(cond_cov), eps[t]));
  }
  return x;
}

// Sum_t E_q[log psi_t] - log Z over unmasked steps.
template <class T>
T kl_core(const std::vector<PotT<T>>& psi, const SmoothCore<T>& s,
          const T& log_z) {
  T kl = alg::neg(log_z);
  const int Tn = static_cast<int>(psi.size());
  for (int t = 0; t < Tn; ++t) {
    if (psi[t].masked) continue;
    T Jm = alg::matmul(psi[t].J, s.ms[t]);
    T e = alg::add(
        alg::scale(alg::add(alg::dot(psi[t].J, s.Ps[t]),
                            alg::dot(s.ms[t], Jm)),
                   -0.5),
        alg::add(alg::dot(psi[t].h, s.ms[t]), psi[t].c));
    kl = alg::add(kl, e);
  }
  return kl;
}

inline PriorT<Mat> to_core(const lgssm::LgssmParams& theta) {
  theta.check();
  return {Mat(theta.mu1), symmetrize(theta.Q1), theta.A, Mat(theta.b),
          symmetrize(theta.Q)};
}

inline std::vector<PotT<Mat>> to_core(const PotentialSeq& psi) {
  std::vector<PotT<Mat>> out;
  out.reserve(psi.size());
  for (const auto& p : psi) {
    Mat c(1, 1);
    c(0, 0) = p.log_norm;
    out.push_back({Mat(p.h), p.J, c, p.is_masked()});
  }
  return out;
}

}  // namespace core

inline FilterResult kalman_filter(const lgssm::LgssmParams& theta,
                                  const PotentialSeq& psi) {
  require(!psi.empty(), "kalman_filter: empty potential sequence");
  for (const auto& p : psi)
    require(p.dim() == theta.dim(), "kalman_filter: potential dim mismatch");
  const auto f = core::filter_core(core::to_core(theta), core::to_core(psi));
  FilterResult out;
  const int Tn = static_cast<int>(f.mfil.size());
  out.predicted.reserve(Tn);
  out.filtered.reserve(Tn);
  for (int t = 0; t < Tn; ++t) {
    out.predicted.push_back({Vec(f.mpred[t]), f.Ppred[t]});
    out.filtered.push_back({Vec(f.mfil[t]), f.Pfil[t]});
  }
  out.log_normalizer = f.log_z(0, 0);
  return out;
}

namespace detail {

inline core::FilterCore<Mat> rebuild_core(const lgssm::LgssmParams& theta,
                                          const FilterResult& fr) {
  require(fr.T() >= 1, "rebuild_core: empty FilterResult");
  core::FilterCore<Mat> f;
  const int Tn = fr.T();
  f.mpred.reserve(Tn);
  f.Ppred.reserve(Tn);
  f.Jpred.reserve(Tn);
  f.mfil.reserve(Tn);
  f.Pfil.reserve(Tn);
  for (int t = 0; t < Tn; ++t) {
    f.mpred.push_back(Mat(fr.predicted[t].mean));
    f.Ppred.push_back(fr.predicted[t].cov);
    f.Jpred.push_back(alg::spd_inverse(fr.predicted[t].cov));
    f.mfil.push_back(Mat(fr.filtered[t].mean));
    f.Pfil.push_back(fr.filtered[t].cov);
  }
  Mat z(1, 1);
  z(0, 0) = fr.log_normalizer;
  f.log_z = z;
  (void)theta;
  return f;
}

}  // namespace detail

inline PosteriorResult rts_smooth(const lgssm::LgssmParams& theta,
                                  const FilterResult& fr) {
  const auto f = detail::rebuild_core(theta, fr);
  const auto pr = core::to_core(theta);
  const auto G = core::gains_core(pr, f);
  const auto s = core::smooth_core(f, G);
  PosteriorResult out;
  const int Tn = fr.T();
  out.smoothed.reserve(Tn);
  for (int t = 0; t < Tn; ++t)
    out.smoothed.push_back({Vec(s.ms[t]), s.Ps[t]});
  out.gains = G;
  out.cross_cov = s.cross;
  out.log_normalizer = fr.log_normalizer;
  return out;
}

// noise: D x T standard-normal draws, column t for step t.
inline Mat ffbs_sample(const lgssm::LgssmParams& theta,
                       const FilterResult& fr, const Mat& noise) {
  const int Tn = fr.T();
  require(noise.rows() == theta.dim() && noise.cols() == Tn,
          "ffbs_sample: noise must be D x T");
  const auto f = detail::rebuild_core(theta, fr);
  const auto pr = core::to_core(theta);
  const auto G = core::gains_core(pr, f);
  std::vector<Mat> eps;
  eps.reserve(Tn);
  for (int t = 0; t < Tn; ++t) eps.push_back(Mat(noise.col(t)));
  const auto xs = core::ffbs_core(f, G, eps);
  Mat x(theta.dim(), Tn);
  for (int t = 0; t < Tn; ++t) x.col(t) = xs[t];
  return x;
}

struct ExpectedStats {
  std::vector<Vec> ex;        // E[x_t]
  std::vector<Mat> exx;       // E[x_t x_t']
  std::vector<Mat> exx_next;  // E[x_t x_{t+1}']
};

inline ExpectedStats expected_stats(const PosteriorResult& pr) {
  ExpectedStats out;
  const int Tn = pr.T();
  out.ex.reserve(Tn);
  out.exx.reserve(Tn);
  out.exx_next.reserve(Tn > 0 ? Tn - 1 : 0);
  for (int t = 0; t < Tn; ++t) {
    const auto& g = pr.smoothed[t];
    out.ex.push_back(g.mean);
    out.exx.push_back(g.cov + g.mean * g.mean.transpose());
  }
  for (int t = 0; t + 1 < Tn; ++t)
    out.exx_next.push_back(pr.cross_cov[t] +
                           pr.smoothed[t].mean *
                               pr.smoothed[t + 1].mean.transpose());
  return out;
}

inline double surrogate_kl(const PotentialSeq& psi,
                           const PosteriorResult& pr) {
  require(static_cast<int>(psi.size()) == pr.T(),
          "surrogate_kl: length mismatch");
  double kl = -pr.log_normalizer;
  for (int t = 0; t < pr.T(); ++t) {
    if (psi[t].is_masked()) continue;
    kl += gaussian::expected_log_factor(psi[t], pr.smoothed[t]);
  }
  return kl;
}

}  // namespace svae::inference

namespace svae::lgssm {

// Marginal likelihood under the linear emission: exact likelihood factors
// pushed through the filter; the accumulated normalizer is log p(y_1:T).
inline double exact_mll(const LgssmParams& theta, const LinearEmission& em,
                        const Mat& y) {
  require(em.dim_latent() == theta.dim(), "exact_mll: latent dim mismatch");
  return inference::kalman_filter(theta, emission_potentials(em, y))
      .log_normalizer;
}

// Static baseline: per-timestep marginals only, no temporal structure.
inline double null_model_mll(const LgssmParams& theta,
                             const LinearEmission& em, const Mat& y) {
  require(em.dim_latent() == theta.dim(),
          "null_model_mll: latent dim mismatch");
  const int Tn = static_cast<int>(y.cols());
  const auto marg = prior_marginals(theta, Tn);
  double total = 0.0;
  for (int t = 0; t < Tn; ++t) {
    const Vec mean = em.C * marg[t].mean + em.d;
    const Mat cov =
        symmetrize(em.C * marg[t].cov * em.C.transpose() + em.R);
    total += gaussian::log_density({mean, cov}, y.col(t));
  }
  return total;
}

}  // namespace svae::lgssm
