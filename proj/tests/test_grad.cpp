// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <limits>

#include "oracles.hpp"
#include "svae/grad.hpp"
#include "svae/inference.hpp"
#include "svae/rng.hpp"

using namespace svae;
using namespace svae::grad;

TEST_CASE("registry tracks shapes offsets and names") {
  ParamRegistry reg;
  const int ia = reg.add("A", 2, 3);
  const int iq = reg.add("Q", 3, 3, ParamKind::kSpdFull);
  const int ir = reg.add("R", 2, 2, ParamKind::kSpdDiag);
  CHECK(reg.count() == 3);
  CHECK(reg.offset(ia) == 0);
  CHECK(reg.spec(ia).unconstrained_len() == 6);
  CHECK(reg.offset(iq) == 6);
  CHECK(reg.spec(iq).unconstrained_len() == 6);
  CHECK(reg.offset(ir) == 12);
  CHECK(reg.spec(ir).unconstrained_len() == 2);
  CHECK(reg.flat_size() == 14);
  CHECK(reg.index_of("Q") == iq);
  CHECK(reg.index_of("missing") == -1);
  CHECK(reg.require_index("R") == ir);
  CHECK_THROWS_AS(reg.require_index("missing"), ShapeError);
  CHECK_THROWS_AS(reg.add("A", 1, 1), ShapeError);
  CHECK_THROWS_AS(reg.add("bad", 2, 3, ParamKind::kSpdFull), ShapeError);
  CHECK_THROWS_AS(reg.add("worse", 0, 1), ShapeError);
}

TEST_CASE("constrained and unconstrained forms round trip") {
  Rng rng(71);
  ParamRegistry reg;
  reg.add("W", 3, 2);
  reg.add("S", 3, 3, ParamKind::kSpdFull);
  reg.add("D", 4, 4, ParamKind::kSpdDiag);

  ParamVector p;
  p.values.push_back(rng.normal_mat(3, 2));
  p.values.push_back(oracles::random_spd(rng, 3));
  Vec dv = rng.normal_vec(4).cwiseAbs() + Vec::Constant(4, 0.2);
  p.values.push_back(Mat(dv.asDiagonal()));

  const UnconstrainedParams u = to_unconstrained(reg, p);
  REQUIRE(u.flat.size() == reg.flat_size());
  const ParamVector back = from_unconstrained(reg, u);
  for (int i = 0; i < reg.count(); ++i)
    CHECK((back.values[i] - p.values[i]).cwiseAbs().maxCoeff() < 1e-12);

  // And the reverse direction, starting from a random flat vector.
  UnconstrainedParams u2{rng.normal_vec(reg.flat_size())};
  const UnconstrainedParams u3 =
      to_unconstrained(reg, from_unconstrained(reg, u2));
  CHECK((u3.flat - u2.flat).cwiseAbs().maxCoeff() < 1e-12);

  // SPD blocks decode to positive definite matrices for any flat input.
  const ParamVector any = from_unconstrained(reg, u2);
  CHECK_NOTHROW(checked_llt(any.values[1], "test"));
  CHECK((any.values[2].diagonal().array() > 0.0).all());
}

TEST_CASE("flatten and unflatten preserve constrained values") {
  Rng rng(72);
  ParamRegistry reg;
  reg.add("a", 2, 2);
  reg.add("b", 3, 1);
  ParamVector p;
  p.values.push_back(rng.normal_mat(2, 2));
  p.values.push_back(rng.normal_mat(3, 1));
  const Vec flat = p.flatten();
  REQUIRE(flat.size() == 7);
  const ParamVector back = ParamVector::unflatten(reg, flat);
  CHECK((back.values[0] - p.values[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.values[1] - p.values[1]).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(ParamVector::unflatten(reg, Vec::Zero(6)), ShapeError);
}

TEST_CASE("tape parameters mirror the plain decoding") {
  Rng rng(73);
  ParamRegistry reg;
  reg.add("W", 2, 3);
  reg.add("S", 3, 3, ParamKind::kSpdFull);
  reg.add("D", 2, 2, ParamKind::kSpdDiag);
  UnconstrainedParams u{rng.normal_vec(reg.flat_size())};

  ad::Tape tape;
  const TapeParams tp = make_tape_params(tape, reg, u);
  const ParamVector plain = from_unconstrained(reg, u);
  REQUIRE(static_cast<int>(tp.values.size()) == reg.count());
  for (int i = 0; i < reg.count(); ++i)
    CHECK((tape.val(tp.values[i]) - plain.values[i]).cwiseAbs().maxCoeff() <
          1e-13);
}

TEST_CASE("quadratic tape loss has an exact gradient") {
  Rng rng(74);
  const int n = 5;
  Mat H = oracles::random_spd(rng, n);
  const Vec b = rng.normal_vec(n);
  ParamRegistry reg;
  reg.add("x", n, 1);
  TapeLoss loss(reg, [&](ad::Tape& t, const TapeParams& tp) {
    const ad::Var x = tp.values[0];
    const ad::Var quad =
        alg::scale(alg::dot(x, alg::matmul(t.constant(H), x)), 0.5);
    return alg::add(quad, alg::dot(t.constant(b), x));
  });

  UnconstrainedParams u{rng.normal_vec(n)};
  const double want = 0.5 * u.flat.dot(H * u.flat) + b.dot(u.flat);
  CHECK(loss.value(u) == Catch::Approx(want).margin(1e-12));
  const auto [v, g] = loss.value_and_grad(u);
  CHECK(v == Catch::Approx(want).margin(1e-12));
  CHECK((g - (H * u.flat + b)).cwiseAbs().maxCoeff() < 1e-12);
  const FdReport rep = finite_diff_check(loss, u);
  CHECK(rep.max_rel_error < 1e-7);
}

TEST_CASE("structured parameter gradients pass finite differences") {
  Rng rng(75);
  ParamRegistry reg;
  reg.add("W", 3, 3);
  reg.add("S", 3, 3, ParamKind::kSpdFull);
  reg.add("D", 3, 3, ParamKind::kSpdDiag);
  const Mat Mw = rng.normal_mat(3, 3);
  TapeLoss loss(reg, [&](ad::Tape& t, const TapeParams& tp) {
    ad::Var acc = alg::dot(tp.values[0], t.constant(Mw));
    acc = alg::add(acc, alg::spd_logdet(tp.values[1]));
    acc = alg::add(acc, alg::dot(tp.values[1], t.constant(Mw)));
    acc = alg::add(acc,
                   alg::trace(alg::matmul(tp.values[2], tp.values[2])));
    return acc;
  });
  UnconstrainedParams u{0.5 * rng.normal_vec(reg.flat_size())};
  const FdReport rep = finite_diff_check(loss, u);
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("filter log normalizer differentiates on the tape") {
  Rng rng(76);
  const int D = 2, T = 5;
  const lgssm::LgssmParams theta = oracles::random_prior(rng, D);
  const auto psi = oracles::random_potentials(rng, T, D);

  ad::Tape tape;
  using V = ad::Var;
  const V q1_raw = tape.input(theta.Q1);
  const V q_raw = tape.input(theta.Q);
  inference::core::PriorT<V> pr{tape.input(theta.mu1), tape.sym(q1_raw),
                                tape.input(theta.A), tape.input(theta.b),
                                tape.sym(q_raw)};
  std::vector<inference::core::PotT<V>> pots;
  std::vector<std::array<V, 3>> leaves;
  const int masked_t = 2;
  for (int t = 0; t < T; ++t) {
    V h = tape.input(psi[t].h);
    V Jraw = tape.input(psi[t].J);
    V c = tape.input(Mat::Constant(1, 1, psi[t].log_norm));
    leaves.push_back({h, Jraw, c});
    pots.push_back({h, tape.sym(Jraw), c, t == masked_t});
  }
  const auto f = inference::core::filter_core(pr, pots);
  tape.backward(f.log_z);

  // Value agrees with the plain filter run on the same masking.
  auto psi_masked = psi;
  psi_masked[masked_t] = gaussian::GaussianNatural::masked(D);
  const auto fr = inference::kalman_filter(theta, psi_masked);
  CHECK(tape.val(f.log_z)(0, 0) ==
        Catch::Approx(fr.log_normalizer).margin(1e-10));

  // Masked potential leaves receive exactly zero gradient.
  CHECK(tape.grad_of(leaves[masked_t][0]).isZero(0.0));
  CHECK(tape.grad_of(leaves[masked_t][1]).isZero(0.0));
  CHECK(tape.grad_of(leaves[masked_t][2]).isZero(0.0));
  CHECK_FALSE(tape.grad_of(leaves[0][0]).isZero(0.0));

  // All leaf gradients pass finite differences via replay.
  auto fd_leaf = [&](V leaf) {
    const Mat base = tape.val(leaf);
    Mat fd(base.rows(), base.cols());
    const double h = 1e-6;
    for (int c = 0; c < base.cols(); ++c)
      for (int r = 0; r < base.rows(); ++r) {
        Mat xp = base, xm = base;
        xp(r, c) += h;
        xm(r, c) -= h;
        tape.set_value(leaf, xp);
        tape.replay();
        const double fp = tape.val(f.log_z)(0, 0);
        tape.set_value(leaf, xm);
        tape.replay();
        const double fm = tape.val(f.log_z)(0, 0);
        fd(r, c) = (fp - fm) / (2.0 * h);
        tape.set_value(leaf, base);
      }
    tape.replay();
    return fd;
  };
  for (const V leaf : {pr.mu1, pr.A, pr.b, q1_raw, q_raw}) {
    const Mat fd = fd_leaf(leaf);
    CHECK((tape.grad_of(leaf) - fd).cwiseAbs().maxCoeff() < 2e-5);
  }
  for (int t = 0; t < T; ++t) {
    for (const V leaf : {leaves[t][0], leaves[t][1], leaves[t][2]}) {
      const Mat fd = fd_leaf(leaf);
      CHECK((tape.grad_of(leaf) - fd).cwiseAbs().maxCoeff() < 2e-5);
    }
  }
}

TEST_CASE("adam descends a quadratic bowl") {
  Rng rng(77);
  const int n = 6;
  const Vec target = rng.normal_vec(n);
  UnconstrainedParams u{rng.normal_vec(n)};
  AdamState state = AdamState::init(n);
  AdamHyper hyper;
  hyper.lr = 0.05;
  for (int it = 0; it < 2000; ++it) {
    const Vec g = u.flat - target;
    adam_step(state, u, g, hyper);
  }
  CHECK((u.flat - target).cwiseAbs().maxCoeff() < 1e-3);
  CHECK(state.step == 2000);
}

TEST_CASE("adam first step moves by about the learning rate") {
  UnconstrainedParams u{Vec::Zero(3)};
  AdamState state = AdamState::init(3);
  AdamHyper hyper;
  Vec g(3);
  g << 4.0, -0.3, 1e-4;
  adam_step(state, u, g, hyper);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(u.flat(i)) <= hyper.lr * (1.0 + 1e-6));
    CHECK(u.flat(i) * g(i) <= 0.0);
  }
  CHECK(std::abs(u.flat(0)) == Catch::Approx(hyper.lr).epsilon(1e-4));

  Vec bad(3);
  bad << 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0;
  CHECK_THROWS_AS(adam_step(state, u, bad, hyper), ShapeError);
  CHECK_THROWS_AS(adam_step(state, u, Vec::Zero(2), hyper), ShapeError);
}
