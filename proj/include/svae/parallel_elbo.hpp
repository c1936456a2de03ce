// SPDX-License-Identifier: Apache-2.0
//
// Evidence-bound gradients with the time recursions run as prefix scans.
// The forward pass is plain matrix arithmetic driven by a static scan
// plan; the backward pass reverses the plan, replaying each pairwise
// composition and each per-step map on a tiny tape to get its
// vector-Jacobian product. Every per-step loop writes to its own slot and
// all cross-step reductions run in a fixed order, so values and gradients
// are bit-identical for any thread count.
#pragma once

#include <map>
#include <utility>
#include <vector>

#include "svae/model.hpp"
#include "svae/pscan.hpp"

namespace svae::par {

using pscan::Executor;
using pscan::FilterElement;
using pscan::MargElement;

namespace detail {

inline FilterElement zero_filter(int d) {
  return {Mat::Zero(d, d), Mat::Zero(d, 1), Mat::Zero(d, d),
          Mat::Zero(d, 1), Mat::Zero(d, d), Mat::Zero(1, 1)};
}

inline MargElement zero_marg(int d) {
  return {Mat::Zero(d, d), Mat::Zero(d, 1), Mat::Zero(d, d)};
}

inline bool is_zero(const FilterElement& e) {
  return e.F.isZero(0.0) && e.c.isZero(0.0) && e.C.isZero(0.0) &&
         e.eta.isZero(0.0) && e.J.isZero(0.0) && e.rho.isZero(0.0);
}

inline bool is_zero(const MargElement& e) {
  return e.A.isZero(0.0) && e.b.isZero(0.0) && e.Q.isZero(0.0);
}

inline void filter_vjp(const FilterElement& a, const FilterElement& b,
                       const FilterElement& oadj, FilterElement& aadj,
                       FilterElement& badj) {
  if (is_zero(oadj)) return;
  ad::Tape t;
  pscan::FilterElementT<ad::Var> av{t.input(a.F),   t.input(a.c),
                                    t.input(a.C),   t.input(a.eta),
                                    t.input(a.J),   t.input(a.rho)};
  pscan::FilterElementT<ad::Var> bv{t.input(b.F),   t.input(b.c),
                                    t.input(b.C),   t.input(b.eta),
                                    t.input(b.J),   t.input(b.rho)};
  const auto ov = pscan::filter_compose(av, bv);
  t.seed_and_backward({{ov.F, oadj.F},
                       {ov.c, oadj.c},
                       {ov.C, oadj.C},
                       {ov.eta, oadj.eta},
                       {ov.J, oadj.J},
                       {ov.rho, oadj.rho}});
  aadj.F += t.grad_of(av.F);
  aadj.c += t.grad_of(av.c);
  aadj.C += t.grad_of(av.C);
  aadj.eta += t.grad_of(av.eta);
  aadj.J += t.grad_of(av.J);
  aadj.rho += t.grad_of(av.rho);
  badj.F += t.grad_of(bv.F);
  badj.c += t.grad_of(bv.c);
  badj.C += t.grad_of(bv.C);
  badj.eta += t.grad_of(bv.eta);
  badj.J += t.grad_of(bv.J);
  badj.rho += t.grad_of(bv.rho);
}

inline void marg_vjp(const MargElement& a, const MargElement& b,
                     const MargElement& oadj, MargElement& aadj,
                     MargElement& badj) {
  if (is_zero(oadj)) return;
  ad::Tape t;
  pscan::MargElementT<ad::Var> av{t.input(a.A), t.input(a.b), t.input(a.Q)};
  pscan::MargElementT<ad::Var> bv{t.input(b.A), t.input(b.b), t.input(b.Q)};
  const auto ov = pscan::marg_compose(av, bv);
  t.seed_and_backward({{ov.A, oadj.A}, {ov.b, oadj.b}, {ov.Q, oadj.Q}});
  aadj.A += t.grad_of(av.A);
  aadj.b += t.grad_of(av.b);
  aadj.Q += t.grad_of(av.Q);
  badj.A += t.grad_of(bv.A);
  badj.b += t.grad_of(bv.b);
  badj.Q += t.grad_of(bv.Q);
}

// Backward conditional of step t from the filtered and one-step moments.
template <class T>
pscan::SmoothElementT<T> smooth_element_core(const T& mf, const T& Pf,
                                             const T& A, const T& b,
                                             const T& Q) {
  T mpred = alg::add(alg::matmul(A, mf), b);
  T Ppred = alg::sym(
      alg::add(alg::matmul(alg::matmul(A, Pf), alg::transpose(A)), Q));
  T G = alg::matmul(alg::matmul(Pf, alg::transpose(A)),
                    alg::spd_inverse(Ppred));
  T g = alg::sub(mf, alg::matmul(G, mpred));
  T L = alg::sym(alg::sub(
      Pf, alg::matmul(alg::matmul(G, Ppred), alg::transpose(G))));
  return {G, g, L};
}

// E_q[log psi_t]; mirrors the sequential bound term for term.
template <class T>
T kl_term_core(const T& h, const T& J, const T& c, const T& ms,
               const T& Ps) {
  T Jm = alg::matmul(J, ms);
  return alg::add(
      alg::scale(alg::add(alg::dot(J, Ps), alg::dot(ms, Jm)), -0.5),
      alg::add(alg::dot(h, ms), c));
}

template <class T>
T recon_term_core(const T& ms, const T& Ps, const T& C, const T& d,
                  const T& R, const Mat& y_t) {
  const int N = static_cast<int>(y_t.rows());
  const int D = static_cast<int>(alg::value_of(ms).rows());
  T rdiag = alg::diag_part(R);
  T rinv = alg::recip(rdiag);
  T res = alg::sub(alg::lift(C, y_t), alg::add(alg::matmul(C, ms), d));
  T quad = alg::dot(res, alg::hadamard(rinv, res));
  T tr = alg::dot(
      alg::matmul(alg::transpose(C),
                  alg::hadamard(alg::broadcast_cols(rinv, D), C)),
      Ps);
  T logdet = alg::sum(alg::log(rdiag));
  return alg::add(
      alg::scale(alg::add(alg::add(logdet, quad), tr), -0.5),
      alg::lift(ms, Mat::Constant(1, 1, -0.5 * N * kLog2Pi)));
}

template <class T>
T sample_recon_core(const model::ModelConfig& cfg,
                    const model::ModelViewT<T>& dv, const T& x,
                    const Mat& y_t) {
  const int N = static_cast<int>(y_t.rows());
  T mean = model::decode_mean_core(cfg, dv, x, 1);
  T rdiag = alg::diag_part(dv.dec_R);
  T res = alg::sub(alg::lift(x, y_t), mean);
  T quad = alg::dot(res, alg::hadamard(alg::recip(rdiag), res));
  T logdet = alg::sum(alg::log(rdiag));
  return alg::add(
      alg::scale(alg::add(logdet, quad), -0.5),
      alg::lift(x, Mat::Constant(1, 1, -0.5 * N * kLog2Pi)));
}

// The sampled state at step t as a function of its backward conditional.
template <class T>
T ffbs_shift_core(const T& g, const T& L, const Mat& eps) {
  return alg::add(g,
                  alg::matmul(alg::cholesky_lower(L), alg::lift(g, eps)));
}

}  // namespace detail

// Mean negative evidence bound of a batch with scan-structured inference.
// Both `value` and `value_and_grad` run the scan forward, so the two
// executors disagree only by floating-point reassociation.
class ParallelBatchLoss : public grad::DifferentiableLoss {
 public:
  ParallelBatchLoss(model::ModelConfig cfg, const grad::ParamRegistry& reg,
                    const std::vector<model::BatchItem>* batch,
                    model::DecodeMode mode, int n_samples, Executor ex,
                    int chunk = pscan::kDefaultChunk)
      : cfg_(std::move(cfg)),
        reg_(reg),
        batch_(batch),
        mode_(mode),
        n_samples_(n_samples),
        ex_(ex),
        chunk_(chunk) {
    cfg_.validate();
    if (mode_ == model::DecodeMode::kAnalytic)
      require(cfg_.decoder == "linear",
              "ParallelBatchLoss: analytic mode needs the linear decoder");
    require(n_samples_ >= 1, "ParallelBatchLoss: n_samples must be positive");
    for (int i = 0; i < reg_.count(); ++i) {
      const auto& name = reg_.spec(i).name;
      if (name.rfind("dec.", 0) == 0) dec_idx_.push_back(i);
    }
  }

  double value(const grad::UnconstrainedParams& u) const override {
    const auto pv = from_unconstrained(reg_, u);
    const auto mv = model::make_view(cfg_, reg_, pv);
    require(batch_ != nullptr && !batch_->empty(),
            "ParallelBatchLoss: empty batch");
    double total = 0.0;
    for (const auto& item : *batch_)
      total += forward_seq(mv, item, plan_for(item)).elbo;
    return -total / static_cast<double>(batch_->size());
  }

  std::pair<double, Vec> value_and_grad(
      const grad::UnconstrainedParams& u) const override {
    require(batch_ != nullptr && !batch_->empty(),
            "ParallelBatchLoss: empty batch");
    const auto pv = from_unconstrained(reg_, u);
    const auto mv = model::make_view(cfg_, reg_, pv);

    std::vector<Mat> acc(static_cast<std::size_t>(reg_.count()));
    for (int i = 0; i < reg_.count(); ++i)
      acc[static_cast<std::size_t>(i)] =
          Mat::Zero(reg_.spec(i).rows, reg_.spec(i).cols);

    const double w = -1.0 / static_cast<double>(batch_->size());
    double total = 0.0;
    for (const auto& item : *batch_) {
      const auto& plan = plan_for(item);
      SeqForward fw = forward_seq(mv, item, plan);
      total += fw.elbo;
      backward_seq(mv, item, plan, fw, w, acc);
    }

    ad::Tape tape;
    const auto tp = make_tape_params(tape, reg_, u);
    std::vector<std::pair<ad::Var, Mat>> seeds;
    seeds.reserve(acc.size());
    for (int i = 0; i < reg_.count(); ++i)
      seeds.emplace_back(tp.values[static_cast<std::size_t>(i)],
                         acc[static_cast<std::size_t>(i)]);
    tape.seed_and_backward(seeds);
    return {-total / static_cast<double>(batch_->size()),
            collect_grad(tape, reg_, tp)};
  }

 private:
  struct SeqForward {
    int T = 0;
    std::vector<inference::core::PotT<Mat>> pots;
    std::vector<FilterElement> fslots;
    std::vector<Mat> mf, Pf;
    std::vector<pscan::SmoothElement> selems;
    std::vector<MargElement> sslots;
    std::vector<Mat> ms, Ps;
    std::vector<std::vector<MargElement>> xslots;
    std::vector<Mat> xs;
    double log_z = 0.0;
    double elbo = 0.0;
  };

  const pscan::ScanPlan& plan_for(const model::BatchItem& item) const {
    const int T = static_cast<int>(item.y.cols());
    require(T >= 1, "ParallelBatchLoss: empty sequence");
    auto it = plans_.find(T);
    if (it == plans_.end())
      it = plans_.emplace(T, pscan::plan_scan(T, ex_, chunk_)).first;
    return it->second;
  }

  SeqForward forward_seq(const model::ModelViewT<Mat>& mv,
                         const model::BatchItem& item,
                         const pscan::ScanPlan& plan) const {
    const bool threaded = ex_ == Executor::kParallel;
    const int T = plan.n_in;
    const int D = cfg_.latent_dim;
    require(static_cast<int>(item.y.rows()) == cfg_.obs_dim,
            "ParallelBatchLoss: obs dim mismatch");
    if (mode_ == model::DecodeMode::kSampled)
      require(item.noise.rows() == D &&
                  item.noise.cols() ==
                      static_cast<Eigen::Index>(T) * n_samples_,
              "ParallelBatchLoss: noise must be D x (T * n_samples)");

    SeqForward fw;
    fw.T = T;
    fw.pots = model::encode_core(cfg_, mv, item.y, T, item.mask);

    const auto elems = pscan::make_filter_elements(mv.prior, fw.pots);
    fw.fslots.resize(static_cast<std::size_t>(plan.n_slots));
    for (int t = 0; t < T; ++t)
      fw.fslots[static_cast<std::size_t>(t)] =
          elems[static_cast<std::size_t>(t)];
    pscan::run_plan(plan, fw.fslots, &pscan::filter_compose<Mat>, threaded);

    fw.mf.resize(static_cast<std::size_t>(T));
    fw.Pf.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      const auto& p =
          fw.fslots[static_cast<std::size_t>(plan.prefix_slots[t])];
      fw.mf[static_cast<std::size_t>(t)] = p.c;
      fw.Pf[static_cast<std::size_t>(t)] = p.C;
    }
    fw.log_z =
        fw.fslots[static_cast<std::size_t>(plan.prefix_slots[T - 1])].rho(0,
                                                                          0);

    fw.selems.resize(static_cast<std::size_t>(T));
#pragma omp parallel for schedule(static) if (threaded)
    for (int t = 0; t < T - 1; ++t)
      fw.selems[static_cast<std::size_t>(t)] =
          detail::smooth_element_core<Mat>(
              fw.mf[static_cast<std::size_t>(t)],
              fw.Pf[static_cast<std::size_t>(t)], mv.prior.A, mv.prior.b,
              mv.prior.Q);
    fw.selems[static_cast<std::size_t>(T - 1)] = {
        Mat::Zero(D, D), fw.mf[static_cast<std::size_t>(T - 1)],
        fw.Pf[static_cast<std::size_t>(T - 1)]};

    fw.sslots.resize(static_cast<std::size_t>(plan.n_slots));
    for (int t = 0; t < T; ++t) {
      const auto& s = fw.selems[static_cast<std::size_t>(T - 1 - t)];
      fw.sslots[static_cast<std::size_t>(t)] = {s.E, s.g, s.L};
    }
    pscan::run_plan(plan, fw.sslots, &pscan::marg_compose<Mat>, threaded);
    fw.ms.resize(static_cast<std::size_t>(T));
    fw.Ps.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      const auto& p = fw.sslots[static_cast<std::size_t>(
          plan.prefix_slots[T - 1 - t])];
      fw.ms[static_cast<std::size_t>(t)] = p.b;
      fw.Ps[static_cast<std::size_t>(t)] = p.Q;
    }

    if (mode_ == model::DecodeMode::kSampled) {
      fw.xslots.resize(static_cast<std::size_t>(n_samples_));
      fw.xs.resize(static_cast<std::size_t>(n_samples_));
      for (int s = 0; s < n_samples_; ++s) {
        auto& slots = fw.xslots[static_cast<std::size_t>(s)];
        slots.resize(static_cast<std::size_t>(plan.n_slots));
#pragma omp parallel for schedule(static) if (threaded)
        for (int t = 0; t < T; ++t) {
          const int tt = T - 1 - t;
          const auto& e = fw.selems[static_cast<std::size_t>(tt)];
          slots[static_cast<std::size_t>(t)] = {
              e.E,
              detail::ffbs_shift_core<Mat>(
                  e.g, e.L, item.noise.col(s * T + tt)),
              Mat::Zero(D, D)};
        }
        pscan::run_plan(plan, slots, &pscan::marg_compose<Mat>, threaded);
        Mat x(D, T);
        for (int t = 0; t < T; ++t)
          x.col(t) = slots[static_cast<std::size_t>(
              plan.prefix_slots[T - 1 - t])].b;
        fw.xs[static_cast<std::size_t>(s)] = std::move(x);
      }
    }

    std::vector<double> kl_terms(static_cast<std::size_t>(T), 0.0);
    std::vector<double> rec_terms(
        static_cast<std::size_t>(T) *
            (mode_ == model::DecodeMode::kSampled
                 ? static_cast<std::size_t>(n_samples_)
                 : 1u),
        0.0);
#pragma omp parallel for schedule(static) if (threaded)
    for (int t = 0; t < T; ++t) {
      const auto& pot = fw.pots[static_cast<std::size_t>(t)];
      if (!pot.masked)
        kl_terms[static_cast<std::size_t>(t)] = detail::kl_term_core<Mat>(
            pot.h, pot.J, pot.c, fw.ms[static_cast<std::size_t>(t)],
            fw.Ps[static_cast<std::size_t>(t)])(0, 0);
      if (mode_ == model::DecodeMode::kAnalytic) {
        rec_terms[static_cast<std::size_t>(t)] =
            detail::recon_term_core<Mat>(
                fw.ms[static_cast<std::size_t>(t)],
                fw.Ps[static_cast<std::size_t>(t)], mv.dec_C, mv.dec_d,
                mv.dec_R, item.y.col(t))(0, 0);
      } else {
        for (int s = 0; s < n_samples_; ++s)
          rec_terms[static_cast<std::size_t>(s * T + t)] =
              detail::sample_recon_core<Mat>(
                  cfg_, mv, Mat(fw.xs[static_cast<std::size_t>(s)].col(t)),
                  item.y.col(t))(0, 0);
      }
    }

    double rec_sum = 0.0;
    if (mode_ == model::DecodeMode::kAnalytic) {
      for (int t = 0; t < T; ++t)
        rec_sum += rec_terms[static_cast<std::size_t>(t)];
    } else {
      for (int t = 0; t < T; ++t) {
        double a = 0.0;
        for (int s = 0; s < n_samples_; ++s)
          a += rec_terms[static_cast<std::size_t>(s * T + t)];
        rec_sum += a / n_samples_;
      }
    }
    double kl_sum = 0.0;
    for (int t = 0; t < T; ++t)
      kl_sum += kl_terms[static_cast<std::size_t>(t)];
    fw.elbo = rec_sum - kl_sum + fw.log_z;
    return fw;
  }

  void backward_seq(const model::ModelViewT<Mat>& mv,
                    const model::BatchItem& item,
                    const pscan::ScanPlan& plan, const SeqForward& fw,
                    double w, std::vector<Mat>& acc) const {
    const bool threaded = ex_ == Executor::kParallel;
    const int T = fw.T;
    const int D = cfg_.latent_dim;
    const std::size_t sT = static_cast<std::size_t>(T);

    std::vector<Mat> dms(sT, Mat::Zero(D, 1)), dPs(sT, Mat::Zero(D, D));
    std::vector<Mat> dh(sT, Mat::Zero(D, 1)), dJ(sT, Mat::Zero(D, D)),
        dc(sT, Mat::Zero(1, 1));
    std::vector<Mat> dE(sT, Mat::Zero(D, D)), dg(sT, Mat::Zero(D, 1)),
        dL(sT, Mat::Zero(D, D));
    std::vector<Mat> dmf(sT, Mat::Zero(D, 1)), dPf(sT, Mat::Zero(D, D));
    std::vector<Mat> dA(sT, Mat::Zero(D, D)), db(sT, Mat::Zero(D, 1)),
        dQ(sT, Mat::Zero(D, D));
    Mat dmu1 = Mat::Zero(D, 1), dQ1 = Mat::Zero(D, D);

    const std::size_t ndec = dec_idx_.size();
    std::vector<std::vector<Mat>> ddec(sT);
    std::vector<std::vector<Mat>> dxs;
    if (mode_ == model::DecodeMode::kSampled)
      dxs.assign(static_cast<std::size_t>(n_samples_),
                 std::vector<Mat>(sT, Mat::Zero(D, 1)));

    // Bound terms: d elbo / d term is w for reconstruction and log Z,
    // -w for the KL pieces.
#pragma omp parallel for schedule(static) if (threaded)
    for (int t = 0; t < T; ++t) {
      const std::size_t st = static_cast<std::size_t>(t);
      ddec[st] = zero_dec_adj();
      if (mode_ == model::DecodeMode::kAnalytic) {
        ad::Tape tp;
        const ad::Var msv = tp.input(fw.ms[st]);
        const ad::Var Psv = tp.input(fw.Ps[st]);
        const ad::Var Cv = tp.input(mv.dec_C);
        const ad::Var dv = tp.input(mv.dec_d);
        const ad::Var Rv = tp.input(mv.dec_R);
        const ad::Var out = detail::recon_term_core<ad::Var>(
            msv, Psv, Cv, dv, Rv, item.y.col(t));
        tp.seed_and_backward({{out, Mat::Constant(1, 1, w)}});
        dms[st] += tp.grad_of(msv);
        dPs[st] += tp.grad_of(Psv);
        add_dec_adj(ddec[st], {tp.grad_of(Cv), tp.grad_of(dv),
                               tp.grad_of(Rv)});
      } else {
        for (int s = 0; s < n_samples_; ++s) {
          ad::Tape tp;
          model::ModelViewT<ad::Var> dv;
          std::vector<ad::Var> dleaves = make_dec_leaves(tp, mv, dv);
          const ad::Var xv =
              tp.input(Mat(fw.xs[static_cast<std::size_t>(s)].col(t)));
          const ad::Var out = detail::sample_recon_core<ad::Var>(
              cfg_, dv, xv, item.y.col(t));
          tp.seed_and_backward(
              {{out, Mat::Constant(1, 1, w / n_samples_)}});
          dxs[static_cast<std::size_t>(s)][st] += tp.grad_of(xv);
          std::vector<Mat> gs;
          gs.reserve(dleaves.size());
          for (const auto& lv : dleaves) gs.push_back(tp.grad_of(lv));
          add_dec_adj(ddec[st], gs);
        }
      }
      const auto& pot = fw.pots[st];
      if (!pot.masked) {
        ad::Tape tp;
        const ad::Var hv = tp.input(pot.h);
        const ad::Var Jv = tp.input(pot.J);
        const ad::Var cv = tp.input(pot.c);
        const ad::Var msv = tp.input(fw.ms[st]);
        const ad::Var Psv = tp.input(fw.Ps[st]);
        const ad::Var out =
            detail::kl_term_core<ad::Var>(hv, Jv, cv, msv, Psv);
        tp.seed_and_backward({{out, Mat::Constant(1, 1, -w)}});
        dh[st] += tp.grad_of(hv);
        dJ[st] += tp.grad_of(Jv);
        dc[st] += tp.grad_of(cv);
        dms[st] += tp.grad_of(msv);
        dPs[st] += tp.grad_of(Psv);
      }
    }

    if (mode_ == model::DecodeMode::kSampled) {
      for (int s = 0; s < n_samples_; ++s) {
        std::vector<MargElement> adj(
            static_cast<std::size_t>(plan.n_slots), detail::zero_marg(D));
        for (int t = 0; t < T; ++t)
          adj[static_cast<std::size_t>(plan.prefix_slots[T - 1 - t])].b +=
              dxs[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
        pscan::run_plan_backward(plan,
                                 fw.xslots[static_cast<std::size_t>(s)],
                                 adj, &detail::marg_vjp, threaded);
#pragma omp parallel for schedule(static) if (threaded)
        for (int t = 0; t < T; ++t) {
          const std::size_t st = static_cast<std::size_t>(t);
          const auto& la = adj[static_cast<std::size_t>(T - 1 - t)];
          dE[st] += la.A;
          if (la.b.isZero(0.0)) continue;
          const auto& e = fw.selems[st];
          ad::Tape tp;
          const ad::Var gv = tp.input(e.g);
          const ad::Var Lv = tp.input(e.L);
          const ad::Var out = detail::ffbs_shift_core<ad::Var>(
              gv, Lv, item.noise.col(s * T + t));
          tp.seed_and_backward({{out, la.b}});
          dg[st] += tp.grad_of(gv);
          dL[st] += tp.grad_of(Lv);
        }
      }
    }

    {
      std::vector<MargElement> adj(static_cast<std::size_t>(plan.n_slots),
                                   detail::zero_marg(D));
      for (int t = 0; t < T; ++t) {
        auto& a =
            adj[static_cast<std::size_t>(plan.prefix_slots[T - 1 - t])];
        a.b += dms[static_cast<std::size_t>(t)];
        a.Q += dPs[static_cast<std::size_t>(t)];
      }
      pscan::run_plan_backward(plan, fw.sslots, adj, &detail::marg_vjp,
                               threaded);
      for (int t = 0; t < T; ++t) {
        const std::size_t st = static_cast<std::size_t>(t);
        const auto& la = adj[static_cast<std::size_t>(T - 1 - t)];
        dE[st] += la.A;
        dg[st] += la.b;
        dL[st] += la.Q;
      }
    }

#pragma omp parallel for schedule(static) if (threaded)
    for (int t = 0; t < T - 1; ++t) {
      const std::size_t st = static_cast<std::size_t>(t);
      if (dE[st].isZero(0.0) && dg[st].isZero(0.0) && dL[st].isZero(0.0))
        continue;
      ad::Tape tp;
      const ad::Var mfv = tp.input(fw.mf[st]);
      const ad::Var Pfv = tp.input(fw.Pf[st]);
      const ad::Var Av = tp.input(mv.prior.A);
      const ad::Var bv = tp.input(mv.prior.b);
      const ad::Var Qv = tp.input(mv.prior.Q);
      const auto ev =
          detail::smooth_element_core<ad::Var>(mfv, Pfv, Av, bv, Qv);
      tp.seed_and_backward(
          {{ev.E, dE[st]}, {ev.g, dg[st]}, {ev.L, dL[st]}});
      dmf[st] += tp.grad_of(mfv);
      dPf[st] += tp.grad_of(Pfv);
      dA[st] += tp.grad_of(Av);
      db[st] += tp.grad_of(bv);
      dQ[st] += tp.grad_of(Qv);
    }
    dmf[sT - 1] += dg[sT - 1];
    dPf[sT - 1] += dL[sT - 1];

    {
      std::vector<FilterElement> adj(static_cast<std::size_t>(plan.n_slots),
                                     detail::zero_filter(D));
      for (int t = 0; t < T; ++t) {
        auto& a = adj[static_cast<std::size_t>(plan.prefix_slots[t])];
        a.c += dmf[static_cast<std::size_t>(t)];
        a.C += dPf[static_cast<std::size_t>(t)];
      }
      adj[static_cast<std::size_t>(plan.prefix_slots[T - 1])].rho(0, 0) +=
          w;
      pscan::run_plan_backward(plan, fw.fslots, adj, &detail::filter_vjp,
                               threaded);

#pragma omp parallel for schedule(static) if (threaded)
      for (int t = 0; t < T; ++t) {
        const std::size_t st = static_cast<std::size_t>(t);
        const auto& la = adj[st];
        if (detail::is_zero(la)) continue;
        const auto& pot = fw.pots[st];
        ad::Tape tp;
        inference::core::PriorT<ad::Var> prv{
            tp.input(mv.prior.mu1), tp.input(mv.prior.Q1),
            tp.input(mv.prior.A), tp.input(mv.prior.b),
            tp.input(mv.prior.Q)};
        inference::core::PotT<ad::Var> potv;
        potv.masked = pot.masked;
        if (!pot.masked) {
          potv.h = tp.input(pot.h);
          potv.J = tp.input(pot.J);
          potv.c = tp.input(pot.c);
        }
        const auto ev = t == 0 ? pscan::make_first_element(prv, potv)
                               : pscan::make_step_element(prv, potv);
        tp.seed_and_backward({{ev.F, la.F},
                              {ev.c, la.c},
                              {ev.C, la.C},
                              {ev.eta, la.eta},
                              {ev.J, la.J},
                              {ev.rho, la.rho}});
        if (t == 0) {
          dmu1 += tp.grad_of(prv.mu1);
          dQ1 += tp.grad_of(prv.Q1);
        }
        dA[st] += tp.grad_of(prv.A);
        db[st] += tp.grad_of(prv.b);
        dQ[st] += tp.grad_of(prv.Q);
        if (!pot.masked) {
          dh[st] += tp.grad_of(potv.h);
          dJ[st] += tp.grad_of(potv.J);
          dc[st] += tp.grad_of(potv.c);
        }
      }
    }

    auto& accA = acc[static_cast<std::size_t>(idx("prior.A"))];
    auto& accb = acc[static_cast<std::size_t>(idx("prior.b"))];
    auto& accQ = acc[static_cast<std::size_t>(idx("prior.Q"))];
    for (int t = 0; t < T; ++t) {
      accA += dA[static_cast<std::size_t>(t)];
      accb += db[static_cast<std::size_t>(t)];
      accQ += dQ[static_cast<std::size_t>(t)];
    }
    acc[static_cast<std::size_t>(idx("prior.mu1"))] += dmu1;
    acc[static_cast<std::size_t>(idx("prior.Q1"))] += dQ1;
    for (std::size_t j = 0; j < ndec; ++j) {
      auto& a = acc[static_cast<std::size_t>(dec_idx_[j])];
      for (int t = 0; t < T; ++t)
        a += ddec[static_cast<std::size_t>(t)][j];
    }

    // Recognition-network pullback on one tape per sequence.
    {
      ad::Tape tape;
      std::vector<std::pair<int, ad::Var>> enc_leaves;
      auto leaf = [&](const Mat& value, const std::string& n) {
        const ad::Var v = tape.input(value);
        enc_leaves.emplace_back(reg_.require_index(n), v);
        return v;
      };
      model::ModelViewT<ad::Var> ev;
      if (cfg_.encoder == "mlp") {
        for (std::size_t i = 0; i < cfg_.enc_hidden.size(); ++i) {
          const std::string tag = "enc.l" + std::to_string(i);
          ev.enc_lw.push_back(leaf(mv.enc_lw[i], tag + ".W"));
          ev.enc_lb.push_back(leaf(mv.enc_lb[i], tag + ".b"));
        }
      }
      ev.enc_Wm = leaf(mv.enc_Wm, "enc.Wm");
      ev.enc_bm = leaf(mv.enc_bm, "enc.bm");
      if (cfg_.encoder == "linear") {
        ev.enc_V = leaf(mv.enc_V, "enc.V");
      } else {
        ev.enc_Wv = leaf(mv.enc_Wv, "enc.Wv");
        ev.enc_bv = leaf(mv.enc_bv, "enc.bv");
        if (cfg_.full_potential_cov && D > 1) {
          ev.enc_Wl = leaf(mv.enc_Wl, "enc.Wl");
          ev.enc_bl = leaf(mv.enc_bl, "enc.bl");
        }
      }
      const ad::Var ylift = tape.constant(item.y);
      const auto potsv =
          model::encode_core(cfg_, ev, ylift, T, item.mask);
      std::vector<std::pair<ad::Var, Mat>> seeds;
      for (int t = 0; t < T; ++t) {
        const std::size_t st = static_cast<std::size_t>(t);
        if (fw.pots[st].masked) continue;
        seeds.emplace_back(potsv[st].h, dh[st]);
        seeds.emplace_back(potsv[st].J, dJ[st]);
        seeds.emplace_back(potsv[st].c, dc[st]);
      }
      if (!seeds.empty()) {
        tape.seed_and_backward(seeds);
        for (const auto& [i, v] : enc_leaves)
          acc[static_cast<std::size_t>(i)] += tape.grad_of(v);
      }
    }
  }

  std::vector<Mat> zero_dec_adj() const {
    std::vector<Mat> out;
    out.reserve(dec_idx_.size());
    for (const int i : dec_idx_)
      out.push_back(Mat::Zero(reg_.spec(i).rows, reg_.spec(i).cols));
    return out;
  }

  static void add_dec_adj(std::vector<Mat>& acc,
                          const std::vector<Mat>& gs) {
    require(acc.size() == gs.size(), "add_dec_adj: size mismatch");
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gs[j];
  }

  std::vector<ad::Var> make_dec_leaves(ad::Tape& tape,
                                       const model::ModelViewT<Mat>& mv,
                                       model::ModelViewT<ad::Var>& dv) const {
    std::vector<ad::Var> leaves;
    for (std::size_t i = 0; i < mv.dec_lw.size(); ++i) {
      dv.dec_lw.push_back(tape.input(mv.dec_lw[i]));
      dv.dec_lb.push_back(tape.input(mv.dec_lb[i]));
      leaves.push_back(dv.dec_lw.back());
      leaves.push_back(dv.dec_lb.back());
    }
    dv.dec_C = tape.input(mv.dec_C);
    dv.dec_d = tape.input(mv.dec_d);
    dv.dec_R = tape.input(mv.dec_R);
    leaves.push_back(dv.dec_C);
    leaves.push_back(dv.dec_d);
    leaves.push_back(dv.dec_R);
    return leaves;
  }

  int idx(const char* name) const { return reg_.require_index(name); }

  model::ModelConfig cfg_;
  const grad::ParamRegistry& reg_;
  const std::vector<model::BatchItem>* batch_;
  model::DecodeMode mode_;
  int n_samples_;
  Executor ex_;
  int chunk_;
  std::vector<int> dec_idx_;
  mutable std::map<int, pscan::ScanPlan> plans_;
};

}  // namespace svae::par
