// SPDX-License-Identifier: Apache-2.0
//
// Loss differentiation contract and optimizer. A DifferentiableLoss pairs
// plain evaluation with a reverse-mode gradient; finite_diff_check is the
// correctness arbiter for every gradient path in the library.
#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "svae/params.hpp"

namespace svae::grad {

struct DifferentiableLoss {
  virtual ~DifferentiableLoss() = default;
  virtual double value(const UnconstrainedParams& u) const = 0;
  virtual std::pair<double, Vec> value_and_grad(
      const UnconstrainedParams& u) const = 0;
};

inline Vec loss_gradient(const DifferentiableLoss& loss,
                         const UnconstrainedParams& at) {
  auto [v, g] = loss.value_and_grad(at);
  require(std::isfinite(v), "loss_gradient: non-finite loss");
  return g;
}

// Loss defined by a tape-building closure; value() runs the same tape and
// reads the output, so value and gradient always agree.
class TapeLoss : public DifferentiableLoss {
 public:
  using Builder =
      std::function<ad::Var(ad::Tape&, const TapeParams&)>;

  TapeLoss(const ParamRegistry& reg, Builder builder)
      : reg_(reg), builder_(std::move(builder)) {}

  double value(const UnconstrainedParams& u) const override {
    ad::Tape tape;
    const TapeParams tp = make_tape_params(tape, reg_, u);
    const ad::Var out = builder_(tape, tp);
    return alg::as_double(tape.val(out));
  }

  std::pair<double, Vec> value_and_grad(
      const UnconstrainedParams& u) const override {
    ad::Tape tape;
    const TapeParams tp = make_tape_params(tape, reg_, u);
    const ad::Var out = builder_(tape, tp);
    const double v = alg::as_double(tape.val(out));
    tape.backward(out);
    return {v, collect_grad(tape, reg_, tp)};
  }

 private:
  const ParamRegistry& reg_;
  Builder builder_;
};

struct FdReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  long worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline FdReport finite_diff_check(const DifferentiableLoss& loss,
                                  const UnconstrainedParams& at,
                                  double step = 1e-5) {
  const Vec g = loss_gradient(loss, at);
  FdReport report;
  double sum_rel = 0.0;
  for (long i = 0; i < at.flat.size(); ++i) {
    UnconstrainedParams u = at;
    u.flat(i) = at.flat(i) + step;
    const double fp = loss.value(u);
    u.flat(i) = at.flat(i) - step;
    const double fm = loss.value(u);
    const double fd = (fp - fm) / (2.0 * step);
    const double rel =
        std::abs(g(i) - fd) / std::max(std::abs(fd), 1e-8);
    sum_rel += rel;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coord = i;
      report.worst_analytic = g(i);
      report.worst_numeric = fd;
    }
  }
  report.mean_rel_error =
      at.flat.size() > 0 ? sum_rel / static_cast<double>(at.flat.size())
                         : 0.0;
  return report;
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m, v;
  long step = 0;

  static AdamState init(long n) {
    AdamState s;
    s.m = Vec::Zero(n);
    s.v = Vec::Zero(n);
    return s;
  }
};

// Descent step on the supplied gradient (pass the gradient of the
// negative ELBO to ascend the ELBO).
inline void adam_step(AdamState& state, UnconstrainedParams& params,
                      const Vec& g, const AdamHyper& hyper) {
  require(params.flat.size() == g.size() && state.m.size() == g.size() &&
              state.v.size() == g.size(),
          "adam_step: shape mismatch");
  require(g.allFinite(), "adam_step: non-finite gradient");
  state.step += 1;
  state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * g;
  state.v = hyper.beta2 * state.v +
            (1.0 - hyper.beta2) * g.cwiseProduct(g).eval();
  const double bc1 = 1.0 - std::pow(hyper.beta1, state.step);
  const double bc2 = 1.0 - std::pow(hyper.beta2, state.step);
  const Vec mhat = state.m / bc1;
  const Vec denom =
      (state.v / bc2).cwiseSqrt() + Vec::Constant(g.size(), hyper.eps);
  params.flat -= hyper.lr * mhat.cwiseQuotient(denom);
}

}  // namespace svae::grad
