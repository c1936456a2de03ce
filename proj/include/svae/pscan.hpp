// SPDX-License-Identifier: Apache-2.0
//
// Parallel-in-time message passing. A prefix scan is first planned as a
// static DAG of pairwise compositions (phases of independent blocks), then
// executed over any element type. The same plan drives plain evaluation,
// fork-join parallel evaluation, and the reverse sweep used for gradients,
// so results are bit-identical across thread counts by construction.
//
// The parallel plan is the classic three-phase chunked scan: per-block
// local scans, a recursive scan over block totals, then a combine phase
// that skips each block's last element (its prefix is the block-total
// prefix itself). Total compositions stay below twice the sequential
// count.
#pragma once

#include <algorithm>
#include <vector>

#include "svae/algebra.hpp"
#include "svae/common.hpp"
#include "svae/inference.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace svae::pscan {

enum class Executor { kSequential, kParallel };

inline constexpr int kDefaultChunk = 32;

struct ScanPlan {
  struct Rec {
    int a, b, out;
  };
  using Block = std::vector<Rec>;
  struct Phase {
    std::vector<Block> blocks;
  };

  int n_in = 0;
  int n_slots = 0;
  std::vector<int> prefix_slots;
  std::vector<Phase> phases;

  long n_composes() const {
    long c = 0;
    for (const auto& ph : phases)
      for (const auto& bl : ph.blocks) c += static_cast<long>(bl.size());
    return c;
  }
};

namespace detail {

inline std::vector<int> plan_chain(const std::vector<int>& in,
                                   ScanPlan& plan) {
  const int n = static_cast<int>(in.size());
  if (n == 1) return in;
  ScanPlan::Phase ph;
  ph.blocks.emplace_back();
  auto& recs = ph.blocks.back();
  std::vector<int> pref(n);
  pref[0] = in[0];
  for (int i = 1; i < n; ++i) {
    const int s = plan.n_slots++;
    recs.push_back({pref[i - 1], in[i], s});
    pref[i] = s;
  }
  plan.phases.push_back(std::move(ph));
  return pref;
}

inline std::vector<int> plan_blocked(const std::vector<int>& in, int chunk,
                                     ScanPlan& plan) {
  const int n = static_cast<int>(in.size());
  if (n <= chunk) return plan_chain(in, plan);

  const int nb = (n + chunk - 1) / chunk;
  ScanPlan::Phase p1;
  p1.blocks.resize(nb);
  std::vector<std::vector<int>> loc(nb);
  for (int k = 0; k < nb; ++k) {
    const int lo = k * chunk;
    const int hi = std::min(n, lo + chunk);
    auto& recs = p1.blocks[k];
    loc[k].resize(hi - lo);
    loc[k][0] = in[lo];
    for (int i = lo + 1; i < hi; ++i) {
      const int s = plan.n_slots++;
      recs.push_back({loc[k][i - lo - 1], in[i], s});
      loc[k][i - lo] = s;
    }
  }
  plan.phases.push_back(std::move(p1));

  std::vector<int> totals(nb);
  for (int k = 0; k < nb; ++k) totals[k] = loc[k].back();
  const std::vector<int> tp = plan_blocked(totals, chunk, plan);

  ScanPlan::Phase p3;
  p3.blocks.resize(nb);
  std::vector<int> pref(n);
  for (std::size_t i = 0; i < loc[0].size(); ++i)
    pref[i] = loc[0][i];
  for (int k = 1; k < nb; ++k) {
    const int lo = k * chunk;
    const int len = static_cast<int>(loc[k].size());
    auto& recs = p3.blocks[k];
    for (int i = 0; i + 1 < len; ++i) {
      const int s = plan.n_slots++;
      recs.push_back({tp[k - 1], loc[k][i], s});
      pref[lo + i] = s;
    }
    pref[lo + len - 1] = tp[k];
  }
  plan.phases.push_back(std::move(p3));
  return pref;
}

}  // namespace detail

inline ScanPlan plan_scan(int n, Executor ex, int chunk = kDefaultChunk) {
  require(n >= 1, "plan_scan: empty input");
  require(chunk >= 2, "plan_scan: chunk must be at least 2");
  ScanPlan plan;
  plan.n_in = n;
  plan.n_slots = n;
  std::vector<int> in(n);
  for (int i = 0; i < n; ++i) in[i] = i;
  plan.prefix_slots = ex == Executor::kSequential
                          ? detail::plan_chain(in, plan)
                          : detail::plan_blocked(in, chunk, plan);
  return plan;
}

// Runs the plan in place over `slots` (first n_in entries hold the input
// elements; the vector must be sized n_slots). Blocks of a phase are
// independent and may run on different threads.
template <class E, class F>
void run_plan(const ScanPlan& plan, std::vector<E>& slots, F&& compose,
              bool threaded) {
  require(static_cast<int>(slots.size()) == plan.n_slots,
          "run_plan: slot count mismatch");
  for (const auto& ph : plan.phases) {
    const int nb = static_cast<int>(ph.blocks.size());
    if (threaded && nb > 1) {
#pragma omp parallel for schedule(static)
      for (int k = 0; k < nb; ++k)
        for (const auto& r : ph.blocks[k])
          slots[r.out] = compose(slots[r.a], slots[r.b]);
    } else {
      for (int k = 0; k < nb; ++k)
        for (const auto& r : ph.blocks[k])
          slots[r.out] = compose(slots[r.a], slots[r.b]);
    }
  }
}

// Reverse sweep over a finished plan. `vjp(a, b, out_adj, a_adj, b_adj)`
// accumulates into the two input adjoints. Within a block the records run
// in reverse; a block's accumulation targets are touched by that block
// alone within its phase, so the sweep is race-free and deterministic.
template <class E, class A, class Vjp>
void run_plan_backward(const ScanPlan& plan, const std::vector<E>& slots,
                       std::vector<A>& adj, Vjp&& vjp, bool threaded) {
  require(static_cast<int>(adj.size()) == plan.n_slots,
          "run_plan_backward: adjoint count mismatch");
  for (auto ph = plan.phases.rbegin(); ph != plan.phases.rend(); ++ph) {
    const int nb = static_cast<int>(ph->blocks.size());
    if (threaded && nb > 1) {
#pragma omp parallel for schedule(static)
      for (int k = 0; k < nb; ++k)
        for (auto r = ph->blocks[k].rbegin(); r != ph->blocks[k].rend(); ++r)
          vjp(slots[r->a], slots[r->b], adj[r->out], adj[r->a], adj[r->b]);
    } else {
      for (int k = 0; k < nb; ++k)
        for (auto r = ph->blocks[k].rbegin(); r != ph->blocks[k].rend(); ++r)
          vjp(slots[r->a], slots[r->b], adj[r->out], adj[r->a], adj[r->b]);
    }
  }
}

template <class E, class F>
std::vector<E> prefix_scan(const std::vector<E>& elems, F&& compose,
                           Executor ex, long* composes = nullptr,
                           int chunk = kDefaultChunk) {
  const ScanPlan plan =
      plan_scan(static_cast<int>(elems.size()), ex, chunk);
  if (composes != nullptr) *composes = plan.n_composes();
  std::vector<E> slots(plan.n_slots);
  for (int i = 0; i < plan.n_in; ++i) slots[i] = elems[i];
  run_plan(plan, slots, compose, ex == Executor::kParallel);
  std::vector<E> out;
  out.reserve(plan.n_in);
  for (int t = 0; t < plan.n_in; ++t)
    out.push_back(std::move(slots[plan.prefix_slots[t]]));
  return out;
}

// ---- element algebra ----

template <class T>
struct MargElementT {
  T A, b, Q;
};
using MargElement = MargElementT<Mat>;

// Composed law of x_j given x_{i-1} and the potentials in (i..j):
// element(x, z) = N(z; F x + c, C) exp(-1/2 x'Jx + eta'x + rho).
template <class T>
struct FilterElementT {
  T F, c, C, eta, J, rho;
};
using FilterElement = FilterElementT<Mat>;

// Backward conditional x_t | x_{t+1} as N(x_t; E x_{t+1} + g, L).
template <class T>
struct SmoothElementT {
  T E, g, L;
};
using SmoothElement = SmoothElementT<Mat>;

template <class T>
MargElementT<T> marg_compose(const MargElementT<T>& ai,
                             const MargElementT<T>& aj) {
  return {alg::matmul(aj.A, ai.A),
          alg::add(alg::matmul(aj.A, ai.b), aj.b),
          alg::sym(alg::add(
              alg::matmul(alg::matmul(aj.A, ai.Q), alg::transpose(aj.A)),
              aj.Q))};
}

inline MargElement marg_identity(int d) {
  return {Mat::Identity(d, d), Mat::Zero(d, 1), Mat::Zero(d, d)};
}

template <class T>
FilterElementT<T> filter_compose(const FilterElementT<T>& ei,
                                 const FilterElementT<T>& ej) {
  const Mat& probe = alg::value_of(ei.F);
  const int d = static_cast<int>(probe.rows());
  T I = alg::lift(ei.F, Mat::Identity(d, d));
  T ICJ = alg::add(I, alg::matmul(ei.C, ej.J));
  T K = alg::inverse(ICJ);
  T Jt = alg::sym(alg::matmul(ej.J, K));
  T FjK = alg::matmul(ej.F, K);
  T Kt_eta = alg::matmul(alg::transpose(K), ej.eta);
  T K_ci = alg::matmul(K, ei.c);

  T F = alg::matmul(FjK, ei.F);
  T c = alg::add(
      alg::matmul(FjK, alg::add(ei.c, alg::matmul(ei.C, ej.eta))), ej.c);
  T C = alg::sym(alg::add(
      alg::matmul(alg::matmul(FjK, ei.C), alg::transpose(ej.F)), ej.C));
  T eta = alg::add(
      ei.eta, alg::matmul(alg::transpose(ei.F),
                          alg::sub(Kt_eta, alg::matmul(Jt, ei.c))));
  T J = alg::add(ei.J, alg::sym(alg::matmul(
                           alg::matmul(alg::transpose(ei.F), Jt), ei.F)));
  // log-weight of the marginalized middle state
  T sigma = alg::add(
      alg::add(alg::scale(alg::logdet_pos(ICJ), -0.5),
               alg::scale(alg::dot(ei.c, alg::matmul(Jt, ei.c)), -0.5)),
      alg::add(alg::dot(ej.eta, K_ci),
               alg::scale(alg::dot(ej.eta, alg::matmul(K, alg::matmul(
                                                              ei.C, ej.eta))),
                          0.5)));
  T rho = alg::add(alg::add(ei.rho, ej.rho), sigma);
  return {F, c, C, eta, J, rho};
}

inline FilterElement filter_identity(int d) {
  return {Mat::Identity(d, d), Mat::Zero(d, 1), Mat::Zero(d, d),
          Mat::Zero(d, 1),     Mat::Zero(d, d), Mat::Zero(1, 1)};
}

// Element for step t >= 2: transition composed with the potential.
template <class T>
FilterElementT<T> make_step_element(const inference::core::PriorT<T>& pr,
                                    const inference::core::PotT<T>& psi) {
  const Mat& probe = alg::value_of(pr.A);
  const int d = static_cast<int>(probe.rows());
  T zero_v = alg::lift(pr.A, Mat::Zero(d, 1));
  T zero_m = alg::lift(pr.A, Mat::Zero(d, d));
  T zero_s = alg::lift(pr.A, Mat::Zero(1, 1));
  FilterElementT<T> trans{pr.A, pr.b, pr.Q, zero_v, zero_m, zero_s};
  if (psi.masked) return trans;
  T I = alg::lift(pr.A, Mat::Identity(d, d));
  FilterElementT<T> pot{I, zero_v, zero_m, psi.h, psi.J, psi.c};
  return filter_compose(trans, pot);
}

// First element: initial distribution composed with the first potential;
// its F block is zero, so every prefix containing it is a plain Gaussian
// in the current state.
template <class T>
FilterElementT<T> make_first_element(const inference::core::PriorT<T>& pr,
                                     const inference::core::PotT<T>& psi) {
  const Mat& probe = alg::value_of(pr.A);
  const int d = static_cast<int>(probe.rows());
  T zero_v = alg::lift(pr.A, Mat::Zero(d, 1));
  T zero_m = alg::lift(pr.A, Mat::Zero(d, d));
  T zero_s = alg::lift(pr.A, Mat::Zero(1, 1));
  FilterElementT<T> init{zero_m, pr.mu1, pr.Q1, zero_v, zero_m, zero_s};
  if (psi.masked) return init;
  T I = alg::lift(pr.A, Mat::Identity(d, d));
  FilterElementT<T> pot{I, zero_v, zero_m, psi.h, psi.J, psi.c};
  return filter_compose(init, pot);
}

template <class T>
std::vector<FilterElementT<T>> make_filter_elements(
    const inference::core::PriorT<T>& pr,
    const std::vector<inference::core::PotT<T>>& psi) {
  require(!psi.empty(), "make_filter_elements: empty potentials");
  std::vector<FilterElementT<T>> out;
  out.reserve(psi.size());
  out.push_back(make_first_element(pr, psi[0]));
  for (std::size_t t = 1; t < psi.size(); ++t)
    out.push_back(make_step_element(pr, psi[t]));
  return out;
}

// ---- high-level parallel inference ----

inline std::vector<gaussian::GaussianMoment> marginals_chain(
    const lgssm::LgssmParams& theta, int T,
    Executor ex = Executor::kParallel) {
  theta.check();
  require(T >= 1, "marginals_chain: T < 1");
  const int d = theta.dim();
  std::vector<MargElement> elems;
  elems.reserve(T);
  elems.push_back({Mat::Zero(d, d), Mat(theta.mu1), symmetrize(theta.Q1)});
  for (int t = 1; t < T; ++t)
    elems.push_back({theta.A, Mat(theta.b), symmetrize(theta.Q)});
  const auto pref =
      prefix_scan(elems, &marg_compose<Mat>, ex);
  std::vector<gaussian::GaussianMoment> out;
  out.reserve(T);
  for (const auto& e : pref) out.push_back({Vec(e.b), e.Q});
  return out;
}

inline inference::FilterResult parallel_filter(
    const lgssm::LgssmParams& theta, const inference::PotentialSeq& psi,
    Executor ex = Executor::kParallel) {
  require(!psi.empty(), "parallel_filter: empty potential sequence");
  for (const auto& p : psi)
    require(p.dim() == theta.dim(), "parallel_filter: potential dim");
  const auto pr = inference::core::to_core(theta);
  const auto pots = inference::core::to_core(psi);
  const auto elems = make_filter_elements(pr, pots);
  const auto pref = prefix_scan(elems, &filter_compose<Mat>, ex);
  const int T = static_cast<int>(psi.size());
  inference::FilterResult out;
  out.predicted.resize(T);
  out.filtered.resize(T);
  const bool threaded = ex == Executor::kParallel;
#pragma omp parallel for schedule(static) if (threaded)
  for (int t = 0; t < T; ++t) {
    out.filtered[t] = {Vec(pref[t].c), pref[t].C};
    if (t == 0) {
      out.predicted[t] = {theta.mu1, symmetrize(theta.Q1)};
    } else {
      out.predicted[t] = gaussian::pushforward(
          {Vec(pref[t - 1].c), pref[t - 1].C}, {theta.A, theta.b, theta.Q});
    }
  }
  out.log_normalizer = pref.back().rho(0, 0);
  return out;
}

namespace detail {

struct BackwardPieces {
  std::vector<Mat> gains;            // T-1
  std::vector<SmoothElement> elems;  // T, last is the terminal element
};

inline BackwardPieces backward_pieces(const lgssm::LgssmParams& theta,
                                      const inference::FilterResult& fr,
                                      bool threaded) {
  const int T = fr.T();
  require(T >= 1, "backward_pieces: empty filter result");
  BackwardPieces out;
  out.gains.resize(T > 0 ? T - 1 : 0);
  out.elems.resize(T);
#pragma omp parallel for schedule(static) if (threaded)
  for (int t = 0; t < T - 1; ++t) {
    const Mat Jpred = alg::spd_inverse(fr.predicted[t + 1].cov);
    const Mat G = fr.filtered[t].cov * theta.A.transpose() * Jpred;
    out.gains[t] = G;
    const Vec g = fr.filtered[t].mean - G * fr.predicted[t + 1].mean;
    const Mat L = symmetrize(fr.filtered[t].cov -
                             G * fr.predicted[t + 1].cov * G.transpose());
    out.elems[t] = {G, Mat(g), L};
  }
  out.elems[T - 1] = {Mat::Zero(theta.dim(), theta.dim()),
                      Mat(fr.filtered[T - 1].mean), fr.filtered[T - 1].cov};
  return out;
}

}  // namespace detail

inline inference::PosteriorResult parallel_smooth(
    const lgssm::LgssmParams& theta, const inference::FilterResult& fr,
    Executor ex = Executor::kParallel) {
  const bool threaded = ex == Executor::kParallel;
  const int T = fr.T();
  auto pieces = detail::backward_pieces(theta, fr, threaded);
  std::vector<MargElement> rev(T);
  for (int t = 0; t < T; ++t) {
    auto& s = pieces.elems[T - 1 - t];
    rev[t] = {std::move(s.E), std::move(s.g), std::move(s.L)};
  }
  const auto pref = prefix_scan(rev, &marg_compose<Mat>, ex);
  inference::PosteriorResult out;
  out.smoothed.resize(T);
#pragma omp parallel for schedule(static) if (threaded)
  for (int t = 0; t < T; ++t) {
    const auto& e = pref[T - 1 - t];
    out.smoothed[t] = {Vec(e.b), e.Q};
  }
  out.gains = std::move(pieces.gains);
  out.cross_cov.resize(T > 0 ? T - 1 : 0);
#pragma omp parallel for schedule(static) if (threaded)
  for (int t = 0; t < T - 1; ++t)
    out.cross_cov[t] = out.gains[t] * out.smoothed[t + 1].cov;
  out.log_normalizer = fr.log_normalizer;
  return out;
}

// Forward-filter backward-sampling with the backward pass run as a scan of
// affine maps; matches inference::ffbs_sample for equal noise.
inline Mat parallel_ffbs(const lgssm::LgssmParams& theta,
                         const inference::FilterResult& fr, const Mat& noise,
                         Executor ex = Executor::kParallel) {
  const bool threaded = ex == Executor::kParallel;
  const int T = fr.T();
  const int d = theta.dim();
  require(noise.rows() == d && noise.cols() == T,
          "parallel_ffbs: noise must be D x T");
  auto pieces = detail::backward_pieces(theta, fr, threaded);
  std::vector<MargElement> rev(T);
#pragma omp parallel for schedule(static) if (threaded)
  for (int t = 0; t < T; ++t) {
    auto& s = pieces.elems[T - 1 - t];
    const Mat L = checked_llt(symmetrize(s.L), "parallel_ffbs").matrixL();
    rev[t] = {std::move(s.E), Mat(s.g + L * noise.col(T - 1 - t)),
              Mat::Zero(d, d)};
  }
  const auto pref = prefix_scan(rev, &marg_compose<Mat>, ex);
  Mat x(d, T);
  for (int t = 0; t < T; ++t) x.col(t) = pref[T - 1 - t].b;
  return x;
}

}  // namespace svae::pscan
