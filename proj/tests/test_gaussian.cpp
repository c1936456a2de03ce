// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "svae/gaussian.hpp"
#include "svae/rng.hpp"

using namespace svae;
using namespace svae::gaussian;

TEST_CASE("natural form of a 1-d Gaussian matches hand values") {
  GaussianMoment g{Vec::Constant(1, 2.0), Mat::Constant(1, 1, 4.0)};
  const GaussianNatural n = to_natural(g);
  CHECK(n.J(0, 0) == Catch::Approx(0.25));
  CHECK(n.h(0) == Catch::Approx(0.5));
  // -m h / 2 - log(2 pi)/2 - log(4)/2
  CHECK(n.log_norm ==
        Catch::Approx(-0.5 - 0.5 * kLog2Pi - 0.5 * std::log(4.0)));
}

TEST_CASE("moment and natural forms round trip") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + int(rng.below(5));
    GaussianMoment g{rng.normal_vec(d), oracles::random_spd(rng, d)};
    const GaussianMoment back = to_moment(to_natural(g));
    CHECK(oracles::rel_err(back.mean, g.mean) < 1e-10);
    CHECK(oracles::rel_err(back.cov, g.cov) < 1e-10);
  }
}

TEST_CASE("normalized factor evaluates to the density") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 1 + int(rng.below(4));
    GaussianMoment g{rng.normal_vec(d), oracles::random_spd(rng, d)};
    const GaussianNatural n = to_natural(g);
    const Vec x = rng.normal_vec(d);
    const double lf = -0.5 * x.dot(n.J * x) + n.h.dot(x) + n.log_norm;
    CHECK(lf == Catch::Approx(log_density(g, x)).margin(1e-10));
  }
}

TEST_CASE("product normalizer matches the convolution identity") {
  // For normalized factors, int N(x;m1,V1) N(x;m2,V2) dx = N(m1; m2, V1+V2).
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 1 + int(rng.below(4));
    GaussianMoment g1{rng.normal_vec(d), oracles::random_spd(rng, d)};
    GaussianMoment g2{rng.normal_vec(d), oracles::random_spd(rng, d)};
    const GaussianNatural prod = multiply(to_natural(g1), to_natural(g2));
    // Direct Gaussian integral of exp(-x'Jx/2 + h'x + c).
    const auto llt = checked_llt(symmetrize(prod.J), "test");
    const double log_int = prod.log_norm + 0.5 * prod.dim() * kLog2Pi -
                           0.5 * logdet_from_llt(llt) +
                           0.5 * prod.h.dot(llt.solve(prod.h));
    const GaussianMoment conv{g2.mean, symmetrize(g1.cov + g2.cov)};
    CHECK(log_int == Catch::Approx(log_density(conv, g1.mean)).margin(1e-9));
  }
}

TEST_CASE("masked factor is the multiplicative identity") {
  Rng rng(14);
  const int d = 3;
  GaussianMoment g{rng.normal_vec(d), oracles::random_spd(rng, d)};
  const GaussianNatural n = to_natural(g);
  const GaussianNatural m = GaussianNatural::masked(d);
  REQUIRE(m.is_masked());
  REQUIRE_FALSE(n.is_masked());
  const GaussianNatural prod = multiply(n, m);
  CHECK(oracles::rel_err(prod.h, n.h) == 0.0);
  CHECK(oracles::rel_err(prod.J, n.J) == 0.0);
  CHECK(prod.log_norm == n.log_norm);
}

TEST_CASE("pushforward agrees with Monte Carlo") {
  Rng rng(15);
  const int d = 2;
  GaussianMoment p{rng.normal_vec(d), oracles::random_spd(rng, d)};
  LinearGaussianCond cond{rng.normal_mat(d, d), rng.normal_vec(d),
                          oracles::random_spd(rng, d)};
  const GaussianMoment out = pushforward(p, cond);

  const int n_samples = 200000;
  const Mat Lp = checked_llt(p.cov, "test").matrixL();
  const Mat Lq = checked_llt(cond.Q, "test").matrixL();
  Vec mean = Vec::Zero(d);
  Mat second = Mat::Zero(d, d);
  for (int s = 0; s < n_samples; ++s) {
    const Vec z = p.mean + Lp * rng.normal_vec(d);
    const Vec x = cond.A * z + cond.b + Lq * rng.normal_vec(d);
    mean += x;
    second += x * x.transpose();
  }
  mean /= n_samples;
  const Mat cov = second / n_samples - mean * mean.transpose();
  CHECK((mean - out.mean).cwiseAbs().maxCoeff() < 0.05);
  CHECK((cov - out.cov).cwiseAbs().maxCoeff() < 0.10);
}

TEST_CASE("expected log factor has the right closed forms") {
  Rng rng(16);
  const int d = 3;
  GaussianMoment g{rng.normal_vec(d), oracles::random_spd(rng, d)};
  // Self expectation: E_g[log N(x; m, S)] = -(d log 2pi + log|S| + d)/2.
  const double want =
      -0.5 * (d * kLog2Pi + std::log(g.cov.determinant()) + d);
  CHECK(expected_log_factor(to_natural(g), g) ==
        Catch::Approx(want).margin(1e-10));

  // Cross expectation against Monte Carlo.
  GaussianMoment u{rng.normal_vec(d), oracles::random_spd(rng, d)};
  const GaussianNatural f = to_natural(g);
  const Mat Lu = checked_llt(u.cov, "test").matrixL();
  double acc = 0.0;
  const int n_samples = 200000;
  for (int s = 0; s < n_samples; ++s) {
    const Vec x = u.mean + Lu * rng.normal_vec(d);
    acc += -0.5 * x.dot(f.J * x) + f.h.dot(x) + f.log_norm;
  }
  CHECK(expected_log_factor(f, u) == Catch::Approx(acc / n_samples).margin(0.05));
}

TEST_CASE("diagonal fast paths match the dense ones") {
  Rng rng(17);
  const int d = 4;
  Vec jd = rng.normal_vec(d).cwiseAbs() + Vec::Constant(d, 0.3);
  GaussianNatural diag{rng.normal_vec(d), Mat(jd.asDiagonal()), 0.7, true};
  GaussianNatural dense = diag;
  dense.diagonal = false;

  const GaussianMoment md = to_moment(diag);
  const GaussianMoment mf = to_moment(dense);
  CHECK(oracles::rel_err(md.mean, mf.mean) < 1e-12);
  CHECK(oracles::rel_err(md.cov, mf.cov) < 1e-12);

  GaussianMoment under{rng.normal_vec(d), oracles::random_spd(rng, d)};
  CHECK(expected_log_factor(diag, under) ==
        Catch::Approx(expected_log_factor(dense, under)).margin(1e-12));
}

TEST_CASE("kl matches the 1-d closed form and is nonnegative") {
  GaussianMoment p{Vec::Constant(1, 1.0), Mat::Constant(1, 1, 2.0)};
  GaussianMoment q{Vec::Constant(1, -0.5), Mat::Constant(1, 1, 3.0)};
  const double want =
      0.5 * (2.0 / 3.0 + 1.5 * 1.5 / 3.0 - 1.0 + std::log(3.0 / 2.0));
  CHECK(kl_moment(p, q) == Catch::Approx(want).margin(1e-12));
  CHECK(kl_moment(p, p) == Catch::Approx(0.0).margin(1e-12));

  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + int(rng.below(4));
    GaussianMoment a{rng.normal_vec(d), oracles::random_spd(rng, d)};
    GaussianMoment b{rng.normal_vec(d), oracles::random_spd(rng, d)};
    CHECK(kl_moment(a, b) >= -1e-12);
    CHECK(kl_moment(a, b) ==
          Catch::Approx(oracles::gaussian_kl(a.mean, a.cov, b.mean, b.cov))
              .margin(1e-9));
  }
}

TEST_CASE("degenerate inputs raise typed errors") {
  const int d = 2;
  GaussianMoment bad{Vec::Zero(d), -Mat::Identity(d, d)};
  CHECK_THROWS_AS(to_natural(bad), DegenerateCovarianceError);

  GaussianNatural flat = GaussianNatural::masked(d);
  flat.diagonal = false;
  CHECK_THROWS_AS(to_moment(flat), CannotNormalizeError);
  flat.diagonal = true;
  CHECK_THROWS_AS(to_moment(flat), CannotNormalizeError);

  GaussianNatural a = GaussianNatural::masked(2);
  GaussianNatural b = GaussianNatural::masked(3);
  CHECK_THROWS_AS(multiply(a, b), ShapeError);
}
