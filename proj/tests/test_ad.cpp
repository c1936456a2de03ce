// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "svae/ad.hpp"
#include "svae/rng.hpp"

using namespace svae;

namespace {

// Checks d(build)/dX against central differences, replaying the same tape
// for every perturbed evaluation.
void check_grad_fd(const Mat& X0,
                   const std::function<ad::Var(ad::Tape&, ad::Var)>& build,
                   double tol = 2e-5) {
  ad::Tape tape;
  const ad::Var x = tape.input(X0);
  const ad::Var out = build(tape, x);
  REQUIRE(tape.val(out).size() == 1);
  tape.backward(out);
  const Mat g = tape.grad_of(x);

  const double h = 1e-6;
  Mat gfd(X0.rows(), X0.cols());
  for (int c = 0; c < X0.cols(); ++c) {
    for (int r = 0; r < X0.rows(); ++r) {
      Mat Xp = X0, Xm = X0;
      Xp(r, c) += h;
      Xm(r, c) -= h;
      tape.set_value(x, Xp);
      tape.replay();
      const double fp = tape.val(out)(0, 0);
      tape.set_value(x, Xm);
      tape.replay();
      const double fm = tape.val(out)(0, 0);
      gfd(r, c) = (fp - fm) / (2.0 * h);
    }
  }
  tape.set_value(x, X0);
  tape.replay();
  const double scale = std::max(1.0, gfd.cwiseAbs().maxCoeff());
  CHECK((g - gfd).cwiseAbs().maxCoeff() / scale < tol);
}

}  // namespace

TEST_CASE("arithmetic op gradients match finite differences") {
  Rng rng(51);
  const Mat X = rng.normal_mat(3, 3);
  const Mat W = rng.normal_mat(3, 3);
  const Mat B = rng.normal_mat(3, 3);

  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.add(x, t.constant(B)), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.sub(t.constant(B), x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.neg(x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.scale(x, -2.5), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.matmul(x, t.constant(B)), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.matmul(t.constant(B), x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.transpose(x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.sym(x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.hadamard(x, t.constant(B)), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.hadamard(x, x), t.constant(W));
  });
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(52);
  const Mat X = rng.normal_mat(3, 4);
  const Mat W = rng.normal_mat(3, 4);

  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.relu(x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.softplus(x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.exp(t.scale(x, 0.5)), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    // keep the log argument positive
    ad::Var pos = t.add(t.softplus(x), t.constant(Mat::Constant(3, 4, 0.1)));
    return t.dot(t.log(pos), t.constant(W));
  });
  const Mat Xpos = rng.normal_mat(3, 4).cwiseAbs() +
                   Mat::Constant(3, 4, 0.5);
  check_grad_fd(Xpos, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.recip(x), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) { return t.sum(x); });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(x, x);
  });
}

TEST_CASE("linear algebra op gradients match finite differences") {
  Rng rng(53);
  const int d = 3;
  const Mat X = 0.3 * rng.normal_mat(d, d);
  const Mat W = rng.normal_mat(d, d);
  const Mat I3 = 3.0 * Mat::Identity(d, d);

  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.inverse(t.add(x, t.constant(I3))), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.logdet_pos(t.add(x, t.constant(I3)));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.trace(t.matmul(x, t.constant(W)));
  });

  // LLT-backed ops take sym-wrapped inputs by convention.
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    ad::Var M = t.sym(t.add(x, t.constant(I3)));
    return t.dot(t.spd_inverse(M), t.constant(W));
  });
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    ad::Var M = t.sym(t.add(x, t.constant(I3)));
    return t.spd_logdet(M);
  });
  Mat Wl = rng.normal_mat(d, d);
  Wl = Wl.triangularView<Eigen::Lower>();
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    ad::Var M = t.sym(t.add(x, t.constant(I3)));
    return t.dot(t.cholesky_lower(M), t.constant(Wl));
  });
}

TEST_CASE("spd values agree with direct dense computation") {
  Rng rng(54);
  const int d = 4;
  Mat S = rng.normal_mat(d, d);
  S = (S * S.transpose() / d + Mat::Identity(d, d)).eval();
  ad::Tape tape;
  const ad::Var s = tape.input(S);
  const ad::Var inv = tape.spd_inverse(tape.sym(s));
  const ad::Var ld = tape.spd_logdet(tape.sym(s));
  const ad::Var L = tape.cholesky_lower(tape.sym(s));
  CHECK((tape.val(inv) - S.inverse()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(tape.val(ld)(0, 0) ==
        Catch::Approx(std::log(S.determinant())).margin(1e-10));
  const Mat Lv = tape.val(L);
  CHECK((Lv * Lv.transpose() - S).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(Lv.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().isZero());
}

TEST_CASE("shape op gradients match finite differences") {
  Rng rng(55);
  const Mat v = rng.normal_mat(4, 1);
  const Mat Wd = rng.normal_mat(4, 4);
  check_grad_fd(v, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.diag_embed(x), t.constant(Wd));
  });
  const Mat X = rng.normal_mat(4, 4);
  const Mat wv = rng.normal_mat(4, 1);
  check_grad_fd(X, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.diag_part(x), t.constant(wv));
  });
  const Mat Wb = rng.normal_mat(4, 3);
  check_grad_fd(v, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.broadcast_cols(x, 3), t.constant(Wb));
  });
  const Mat Xc = rng.normal_mat(4, 3);
  check_grad_fd(Xc, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.col(x, 1), t.constant(wv));
  });
  const Mat Wh = rng.normal_mat(4, 7);
  check_grad_fd(Xc, [&](ad::Tape& t, ad::Var x) {
    ad::Var other = t.constant(rng.normal_mat(4, 4));
    return t.dot(t.hstack({x, other}), t.constant(Wh));
  });
  const Mat packed = rng.normal_mat(6, 1);
  check_grad_fd(packed, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.tril_strict_unpack(x, 4), t.constant(Wd));
  });
  const Mat s0 = Mat::Constant(1, 1, 0.7);
  check_grad_fd(s0, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.scalar_mul(x, t.constant(Xc)), t.constant(Wb));
  });
  check_grad_fd(Xc, [&](ad::Tape& t, ad::Var x) {
    return t.dot(t.scalar_mul(t.constant(s0), x), t.constant(Wb));
  });
}

TEST_CASE("tril unpack layout is column major") {
  ad::Tape tape;
  Mat packed(3, 1);
  packed << 1, 2, 3;
  const Mat M = tape.val(tape.tril_strict_unpack(tape.input(packed), 3));
  Mat want(3, 3);
  want << 0, 0, 0, 1, 0, 0, 2, 3, 0;
  CHECK((M - want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("replay recomputes a composite function at new leaves") {
  Rng rng(56);
  ad::Tape tape;
  const Mat X0 = rng.normal_mat(3, 3);
  const ad::Var x = tape.input(X0);
  const ad::Var M =
      tape.sym(tape.add(tape.matmul(x, tape.transpose(x)),
                        tape.constant(Mat::Identity(3, 3))));
  const ad::Var out = tape.spd_logdet(M);

  const Mat X1 = rng.normal_mat(3, 3);
  tape.set_value(x, X1);
  tape.replay();
  const Mat S1 = X1 * X1.transpose() + Mat::Identity(3, 3);
  CHECK(tape.val(out)(0, 0) ==
        Catch::Approx(std::log(S1.determinant())).margin(1e-10));

  tape.backward(out);
  ad::Tape fresh;
  const ad::Var y = fresh.input(X1);
  const ad::Var out2 = fresh.spd_logdet(
      fresh.sym(fresh.add(fresh.matmul(y, fresh.transpose(y)),
                          fresh.constant(Mat::Identity(3, 3)))));
  fresh.backward(out2);
  CHECK((tape.grad_of(x) - fresh.grad_of(y)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("seeded backward chains two tapes like one") {
  Rng rng(57);
  const Mat X0 = rng.normal_mat(3, 1);
  const Mat A = rng.normal_mat(3, 3);

  // One tape end to end.
  ad::Tape whole;
  const ad::Var wx = whole.input(X0);
  const ad::Var wy = whole.matmul(whole.constant(A), wx);
  const ad::Var wz = whole.dot(whole.softplus(wy), whole.softplus(wy));
  whole.backward(wz);

  // Stage one produces y, stage two consumes it as a leaf.
  ad::Tape t1;
  const ad::Var x1 = t1.input(X0);
  const ad::Var y1 = t1.matmul(t1.constant(A), x1);

  ad::Tape t2;
  const ad::Var y2 = t2.input(t1.val(y1));
  const ad::Var z2 = t2.dot(t2.softplus(y2), t2.softplus(y2));
  t2.backward(z2);
  CHECK(t2.val(z2)(0, 0) == Catch::Approx(whole.val(wz)(0, 0)).margin(1e-12));

  t1.seed_and_backward({{y1, t2.grad_of(y2)}});
  CHECK((t1.grad_of(x1) - whole.grad_of(wx)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient flow respects requires_grad") {
  ad::Tape tape;
  const ad::Var a = tape.input(Mat::Constant(2, 2, 1.5), false);
  const ad::Var b = tape.input(Mat::Constant(2, 2, -0.5));
  const ad::Var out = tape.sum(tape.hadamard(a, b));
  tape.backward(out);
  CHECK(tape.grad_of(a).isZero());
  CHECK((tape.grad_of(b) - Mat::Constant(2, 2, 1.5)).cwiseAbs().maxCoeff() <
        1e-14);
}

TEST_CASE("tape guards against misuse") {
  ad::Tape a, b;
  const ad::Var va = a.input(Mat::Identity(2, 2));
  const ad::Var vb = b.input(Mat::Identity(2, 2));
  CHECK_THROWS_AS(a.add(va, vb), ShapeError);
  CHECK_THROWS_AS(a.matmul(va, a.constant(Mat::Identity(3, 3))), ShapeError);
  CHECK_THROWS_AS(a.backward(va), ShapeError);
  CHECK_THROWS_AS(a.set_value(a.add(va, va), Mat::Identity(2, 2)), ShapeError);
  CHECK_THROWS_AS(a.spd_inverse(a.constant(-Mat::Identity(2, 2))),
                  DegenerateCovarianceError);
  CHECK_THROWS_AS(a.logdet_pos(a.constant(-Mat::Identity(3, 3))), ShapeError);
}

TEST_CASE("softplus and sigmoid are stable at extremes") {
  CHECK(ad::detail::softplus_scalar(1000.0) == 1000.0);
  CHECK(ad::detail::softplus_scalar(-1000.0) == 0.0);
  CHECK(std::isfinite(ad::detail::sigmoid_scalar(800.0)));
  CHECK(std::isfinite(ad::detail::sigmoid_scalar(-800.0)));
  CHECK(ad::detail::sigmoid_scalar(800.0) == Catch::Approx(1.0));
  CHECK(ad::detail::sigmoid_scalar(-800.0) == Catch::Approx(0.0).margin(1e-12));
}
