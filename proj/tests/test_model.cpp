// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "svae/grad.hpp"
#include "svae/lgssm.hpp"
#include "svae/model.hpp"
#include "svae/parallel_elbo.hpp"

using namespace svae;

namespace {

struct TrueModelSetup {
  model::ModelConfig cfg;
  grad::ParamRegistry reg;
  grad::UnconstrainedParams u;
  lgssm::LgssmParams theta;
  lgssm::LinearEmission em;
};

// Parameters whose recognition factors equal the emission likelihood up
// to a per-frame constant, so the bound must be tight.
TrueModelSetup conjugate_setup(Rng& rng, int D, int N) {
  TrueModelSetup s;
  s.cfg.latent_dim = D;
  s.cfg.obs_dim = N;
  s.cfg.full_potential_cov = true;
  s.reg = model::make_registry(s.cfg);

  s.theta = oracles::random_prior(rng, D);
  Vec rdiag(N);
  for (int i = 0; i < N; ++i) rdiag(i) = rng.uniform(0.5, 1.5);
  s.em.C = rng.normal_mat(N, D) / std::sqrt(double(D));
  s.em.d = 0.3 * rng.normal_vec(N);
  s.em.R = rdiag.asDiagonal();

  const Mat Rinv_C = rdiag.cwiseInverse().asDiagonal() * s.em.C;
  const Mat V = symmetrize(Mat((s.em.C.transpose() * Rinv_C).inverse()));
  const Mat Wm = V * Rinv_C.transpose();

  grad::ParamVector pv;
  pv.values.resize(static_cast<std::size_t>(s.reg.count()));
  auto put = [&](const std::string& n, const Mat& v) {
    pv.values[static_cast<std::size_t>(s.reg.require_index(n))] = v;
  };
  put("prior.mu1", s.theta.mu1);
  put("prior.Q1", s.theta.Q1);
  put("prior.A", s.theta.A);
  put("prior.b", s.theta.b);
  put("prior.Q", s.theta.Q);
  put("enc.Wm", Wm);
  put("enc.bm", -Wm * s.em.d);
  put("enc.V", V);
  put("dec.C", s.em.C);
  put("dec.d", s.em.d);
  put("dec.R", s.em.R);
  s.u = to_unconstrained(s.reg, pv);
  return s;
}

int transitions(const model::Mask& m) {
  int n = 0;
  for (std::size_t i = 1; i < m.size(); ++i) n += m[i] != m[i - 1];
  return n;
}

}  // namespace

TEST_CASE("evidence bound is tight for the exact conjugate encoder") {
  Rng rng(41);
  for (int trial = 0; trial < 8; ++trial) {
    const int D = 1 + static_cast<int>(rng.below(3));
    const int N = D + 1 + static_cast<int>(rng.below(2));
    const int T = 1 + static_cast<int>(rng.below(7));
    const auto s = conjugate_setup(rng, D, N);
    const Mat y = rng.normal_mat(N, T);
    const auto pv = from_unconstrained(s.reg, s.u);
    const auto b = model::elbo(s.cfg, s.reg, pv, y, {},
                               model::DecodeMode::kAnalytic);
    const double want = lgssm::exact_mll(s.theta, s.em, y);
    CHECK(oracles::rel_err(b.elbo, want) < 1e-9);
    CHECK(b.elbo == Catch::Approx(b.recon - b.kl).margin(1e-12));
    CHECK(b.kl >= -1e-9);
  }
}

TEST_CASE("bound with a diagonal potential is tight when the likelihood is diagonal") {
  Rng rng(43);
  const auto full = conjugate_setup(rng, 1, 3);
  model::ModelConfig cfg = full.cfg;
  cfg.full_potential_cov = false;
  const auto reg = model::make_registry(cfg);
  REQUIRE(reg.flat_size() == full.reg.flat_size());
  const Mat y = rng.normal_mat(3, 6);
  // Same constrained values, re-encoded under the diagonal convention.
  const auto pv = from_unconstrained(
      reg, to_unconstrained(reg, from_unconstrained(full.reg, full.u)));
  const auto b =
      model::elbo(cfg, reg, pv, y, {}, model::DecodeMode::kAnalytic);
  CHECK(oracles::rel_err(b.elbo, lgssm::exact_mll(full.theta, full.em, y)) <
        1e-9);
}

TEST_CASE("bound never exceeds the exact marginal likelihood") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = conjugate_setup(rng, 2, 3);
    auto pv = from_unconstrained(s.reg, s.u);
    auto wrong = [&](const std::string& n, const Mat& v) {
      pv.values[static_cast<std::size_t>(s.reg.require_index(n))] = v;
    };
    wrong("enc.Wm", rng.normal_mat(2, 3));
    wrong("enc.bm", 0.5 * rng.normal_vec(2));
    wrong("enc.V", oracles::random_spd(rng, 2));
    const Mat y = rng.normal_mat(3, 5);
    const auto b = model::elbo(s.cfg, s.reg, pv, y, {},
                               model::DecodeMode::kAnalytic);
    const double mll = lgssm::exact_mll(s.theta, s.em, y);
    CHECK(b.elbo <= mll + 1e-8);
  }
}

TEST_CASE("fully masked sequences reduce to the prior") {
  Rng rng(53);
  const auto s = conjugate_setup(rng, 2, 4);
  const Mat y = rng.normal_mat(4, 5);
  const model::Mask all(5, 1);
  const auto pv = from_unconstrained(s.reg, s.u);
  const auto b =
      model::elbo(s.cfg, s.reg, pv, y, all, model::DecodeMode::kAnalytic);
  CHECK(b.log_normalizer == 0.0);
  CHECK(b.kl == 0.0);
  CHECK(b.elbo == b.recon);

  std::vector<model::BatchItem> batch{{y, all, Mat()}};
  grad::TapeLoss loss(s.reg, [&](ad::Tape& tape, const grad::TapeParams& tp) {
    (void)tape;
    return model::batch_loss_tape(s.cfg, s.reg, tape, tp, batch,
                                  model::DecodeMode::kAnalytic, 1);
  });
  const auto vg = loss.value_and_grad(s.u);
  CHECK(vg.first == Catch::Approx(-b.elbo).margin(1e-12));
  auto block = [&](const std::string& n) {
    const int i = s.reg.require_index(n);
    return Vec(vg.second.segment(s.reg.offset(i),
                                 s.reg.spec(i).unconstrained_len()));
  };
  CHECK(block("enc.Wm").norm() == 0.0);
  CHECK(block("enc.bm").norm() == 0.0);
  CHECK(block("enc.V").norm() == 0.0);
  CHECK(block("prior.A").norm() > 0.0);
  CHECK(block("dec.C").norm() > 0.0);
}

TEST_CASE("finite differences validate the full bound gradient") {
  Rng rng(59);
  const int D = 2, N = 3, T = 5;

  struct Case {
    std::string name;
    model::ModelConfig cfg;
    model::DecodeMode mode;
    int n_samples;
    bool masked;
  };
  std::vector<Case> cases;
  {
    model::ModelConfig c;
    c.latent_dim = D;
    c.obs_dim = N;
    c.full_potential_cov = true;
    cases.push_back({"linear analytic", c, model::DecodeMode::kAnalytic, 1,
                     false});
    cases.push_back({"linear analytic masked", c,
                     model::DecodeMode::kAnalytic, 1, true});
    cases.push_back({"linear sampled", c, model::DecodeMode::kSampled, 2,
                     true});
  }
  {
    model::ModelConfig c;
    c.latent_dim = D;
    c.obs_dim = N;
    c.encoder = "mlp";
    c.decoder = "mlp";
    c.enc_hidden = {5};
    c.dec_hidden = {4};
    cases.push_back({"mlp sampled masked", c, model::DecodeMode::kSampled, 2,
                     true});
  }
  {
    model::ModelConfig c;
    c.latent_dim = D;
    c.obs_dim = N;
    c.encoder = "mlp";
    c.enc_hidden = {5};
    c.full_potential_cov = true;
    cases.push_back({"mlp full-cov encoder analytic", c,
                     model::DecodeMode::kAnalytic, 1, false});
  }

  for (const auto& cs : cases) {
    INFO(cs.name);
    const auto reg = model::make_registry(cs.cfg);
    auto u = model::init_params(cs.cfg, reg, rng);
    u.flat += 0.05 * rng.normal_vec(reg.flat_size());

    std::vector<model::BatchItem> batch;
    for (int k = 0; k < 2; ++k) {
      model::BatchItem it;
      it.y = rng.normal_mat(N, T);
      if (cs.masked) it.mask = model::random_mask(rng, T, 0.4);
      if (cs.mode == model::DecodeMode::kSampled)
        it.noise = rng.normal_mat(D, T * cs.n_samples);
      batch.push_back(std::move(it));
    }

    grad::TapeLoss loss(reg, [&](ad::Tape& tape, const grad::TapeParams& tp) {
      return model::batch_loss_tape(cs.cfg, reg, tape, tp, batch, cs.mode,
                                    cs.n_samples);
    });
    const auto rep = grad::finite_diff_check(loss, u);
    CAPTURE(rep.max_rel_error, rep.worst_coord, rep.worst_analytic,
            rep.worst_numeric);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("sampled reconstruction converges to the analytic value") {
  Rng rng(61);
  const auto s = conjugate_setup(rng, 2, 3);
  const int T = 6, S = 50000;
  const Mat y = rng.normal_mat(3, T);
  const auto pv = from_unconstrained(s.reg, s.u);
  const auto a =
      model::elbo(s.cfg, s.reg, pv, y, {}, model::DecodeMode::kAnalytic);
  const Mat noise = rng.normal_mat(2, T * S);
  const auto m = model::elbo(s.cfg, s.reg, pv, y, {},
                             model::DecodeMode::kSampled, S, noise);
  CHECK(m.kl == a.kl);
  CHECK(m.log_normalizer == a.log_normalizer);
  CHECK(std::abs(m.recon - a.recon) < 0.05 * (1.0 + std::abs(a.recon)));
}

TEST_CASE("the two algebra backends agree on the bound") {
  Rng rng(67);
  model::ModelConfig cfg;
  cfg.latent_dim = 2;
  cfg.obs_dim = 3;
  cfg.encoder = "mlp";
  cfg.decoder = "mlp";
  cfg.enc_hidden = {6};
  cfg.dec_hidden = {5};
  const auto reg = model::make_registry(cfg);
  auto u = model::init_params(cfg, reg, rng);
  u.flat += 0.1 * rng.normal_vec(reg.flat_size());

  std::vector<model::BatchItem> batch;
  model::BatchItem it;
  it.y = rng.normal_mat(3, 4);
  it.mask = model::Mask{0, 1, 1, 0};
  it.noise = rng.normal_mat(2, 4 * 3);
  batch.push_back(it);

  const auto pv = from_unconstrained(reg, u);
  const auto b = model::elbo(cfg, reg, pv, it.y, it.mask,
                             model::DecodeMode::kSampled, 3, it.noise);
  grad::TapeLoss loss(reg, [&](ad::Tape& tape, const grad::TapeParams& tp) {
    return model::batch_loss_tape(cfg, reg, tape, tp, batch,
                                  model::DecodeMode::kSampled, 3);
  });
  CHECK(std::abs(loss.value(u) - (-b.elbo)) < 1e-11);

  const auto b2 = model::elbo(cfg, reg, pv, it.y, it.mask,
                              model::DecodeMode::kSampled, 3, it.noise);
  CHECK(b.elbo == b2.elbo);
}

TEST_CASE("random masks are contiguous with the requested length") {
  Rng rng(71);
  for (int trial = 0; trial < 300; ++trial) {
    const int T = 1 + static_cast<int>(rng.below(40));
    const double f = rng.uniform(0.0, 1.0);
    const auto m = model::random_mask(rng, T, f);
    REQUIRE(static_cast<int>(m.size()) == T);
    CHECK(model::mask_count(m) ==
          static_cast<int>(std::lround(f * static_cast<double>(T))));
    CHECK(transitions(m) <= 2);
  }
  CHECK(model::mask_count(model::random_mask(rng, 10, 0.0)) == 0);
  CHECK(model::mask_count(model::random_mask(rng, 10, 1.0)) == 10);

  std::vector<int> seen(8, 0);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto m = model::random_mask(rng, 10, 0.3);
    int start = 0;
    while (m[static_cast<std::size_t>(start)] == 0) ++start;
    ++seen[static_cast<std::size_t>(start)];
  }
  for (const int c : seen) CHECK(c > 0);

  Rng a(9), b(9);
  CHECK(model::random_mask(a, 20, 0.4) == model::random_mask(b, 20, 0.4));
}

TEST_CASE("registry layout and initialization") {
  model::ModelConfig cfg;
  cfg.latent_dim = 3;
  cfg.obs_dim = 5;
  const auto reg = model::make_registry(cfg);
  CHECK(reg.count() == 11);
  CHECK(reg.spec(reg.require_index("enc.Wm")).rows == 3);
  CHECK(reg.spec(reg.require_index("enc.Wm")).cols == 5);
  CHECK(reg.spec(reg.require_index("enc.V")).kind ==
        grad::ParamKind::kSpdDiag);
  CHECK(reg.spec(reg.require_index("dec.R")).kind ==
        grad::ParamKind::kSpdDiag);

  Rng rng(5);
  const auto u = model::init_params(cfg, reg, rng);
  const auto pv = from_unconstrained(reg, u);
  auto at = [&](const std::string& n) {
    return pv.values[static_cast<std::size_t>(reg.require_index(n))];
  };
  const Mat A = at("prior.A");
  CHECK((A.transpose() * A / 0.81 - Mat::Identity(3, 3)).norm() < 1e-9);
  CHECK(at("prior.Q1").isApprox(Mat::Identity(3, 3)));
  CHECK(at("prior.Q").isApprox(Mat::Identity(3, 3)));
  CHECK(at("dec.R").isApprox(Mat::Identity(5, 5)));
  CHECK(at("enc.V").isApprox(Mat::Identity(3, 3)));
  CHECK(at("prior.mu1").norm() == 0.0);
  CHECK(at("prior.b").norm() == 0.0);
  CHECK(at("enc.bm").norm() == 0.0);
  const Mat Wm = at("enc.Wm");
  CHECK(Wm.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
  CHECK(Wm.norm() > 0.0);

  Rng r2(5);
  const auto u2 = model::init_params(cfg, reg, r2);
  CHECK(u.flat == u2.flat);

  model::ModelConfig mc = cfg;
  mc.encoder = "mlp";
  mc.decoder = "mlp";
  mc.enc_hidden = {7, 6};
  mc.dec_hidden = {8};
  mc.full_potential_cov = true;
  const auto mreg = model::make_registry(mc);
  CHECK(mreg.spec(mreg.require_index("enc.l0.W")).rows == 7);
  CHECK(mreg.spec(mreg.require_index("enc.l1.W")).cols == 7);
  CHECK(mreg.spec(mreg.require_index("enc.Wm")).cols == 6);
  CHECK(mreg.spec(mreg.require_index("enc.Wl")).rows == 3);
  CHECK(mreg.spec(mreg.require_index("dec.C")).cols == 8);
}

TEST_CASE("scan-structured loss matches the sequential gradient") {
  Rng rng(73);
  const int D = 2, N = 3, T = 37;

  struct Case {
    std::string name;
    model::ModelConfig cfg;
    model::DecodeMode mode;
    int n_samples;
  };
  std::vector<Case> cases;
  {
    model::ModelConfig c;
    c.latent_dim = D;
    c.obs_dim = N;
    c.full_potential_cov = true;
    cases.push_back({"linear analytic", c, model::DecodeMode::kAnalytic, 1});
  }
  {
    model::ModelConfig c;
    c.latent_dim = D;
    c.obs_dim = N;
    c.encoder = "mlp";
    c.decoder = "mlp";
    c.enc_hidden = {5};
    c.dec_hidden = {4};
    cases.push_back({"mlp sampled", c, model::DecodeMode::kSampled, 2});
  }

  for (const auto& cs : cases) {
    INFO(cs.name);
    const auto reg = model::make_registry(cs.cfg);
    auto u = model::init_params(cs.cfg, reg, rng);
    u.flat += 0.05 * rng.normal_vec(reg.flat_size());

    std::vector<model::BatchItem> batch;
    for (int k = 0; k < 2; ++k) {
      model::BatchItem it;
      it.y = rng.normal_mat(N, T);
      if (k == 1) it.mask = model::random_mask(rng, T, 0.4);
      if (cs.mode == model::DecodeMode::kSampled)
        it.noise = rng.normal_mat(D, T * cs.n_samples);
      batch.push_back(std::move(it));
    }

    grad::TapeLoss seq(reg, [&](ad::Tape& tape, const grad::TapeParams& tp) {
      return model::batch_loss_tape(cs.cfg, reg, tape, tp, batch, cs.mode,
                                    cs.n_samples);
    });
    const auto ref = seq.value_and_grad(u);
    const double gscale =
        std::max(1.0, ref.second.cwiseAbs().maxCoeff());

    for (const auto ex :
         {par::Executor::kSequential, par::Executor::kParallel}) {
      par::ParallelBatchLoss par_loss(cs.cfg, reg, &batch, cs.mode,
                                      cs.n_samples, ex, 8);
      CHECK(std::abs(par_loss.value(u) - ref.first) <
            1e-9 * (1.0 + std::abs(ref.first)));
      const auto got = par_loss.value_and_grad(u);
      CHECK(std::abs(got.first - ref.first) <
            1e-9 * (1.0 + std::abs(ref.first)));
      const double gdiff =
          (got.second - ref.second).cwiseAbs().maxCoeff() / gscale;
      CAPTURE(gdiff);
      CHECK(gdiff < 1e-8);

      const auto again = par_loss.value_and_grad(u);
      CHECK(again.first == got.first);
      CHECK(again.second == got.second);
    }
  }
}

TEST_CASE("finite differences validate the scan-structured gradient") {
  Rng rng(79);
  model::ModelConfig cfg;
  cfg.latent_dim = 2;
  cfg.obs_dim = 3;
  cfg.full_potential_cov = true;
  const auto reg = model::make_registry(cfg);
  auto u = model::init_params(cfg, reg, rng);
  u.flat += 0.05 * rng.normal_vec(reg.flat_size());

  std::vector<model::BatchItem> batch;
  model::BatchItem it;
  it.y = rng.normal_mat(3, 9);
  it.mask = model::random_mask(rng, 9, 0.3);
  batch.push_back(std::move(it));

  par::ParallelBatchLoss loss(cfg, reg, &batch, model::DecodeMode::kAnalytic,
                              1, par::Executor::kParallel, 4);
  const auto rep = grad::finite_diff_check(loss, u);
  CAPTURE(rep.max_rel_error, rep.worst_coord, rep.worst_analytic,
          rep.worst_numeric);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("config and input validation") {
  model::ModelConfig cfg;
  cfg.latent_dim = 0;
  cfg.obs_dim = 3;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg.latent_dim = 2;
  cfg.encoder = "conv";
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg.encoder = "mlp";
  cfg.enc_hidden = {};
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg.enc_hidden = {4};
  cfg.validate();

  Rng rng(3);
  model::ModelConfig ok;
  ok.latent_dim = 2;
  ok.obs_dim = 3;
  const auto reg = model::make_registry(ok);
  const auto u = model::init_params(ok, reg, rng);
  const auto pv = from_unconstrained(reg, u);
  const Mat y = rng.normal_mat(3, 4);

  CHECK_THROWS_AS(model::elbo(ok, reg, pv, y, model::Mask{1, 0},
                              model::DecodeMode::kAnalytic),
                  ShapeError);
  CHECK_THROWS_AS(model::elbo(ok, reg, pv, y, {},
                              model::DecodeMode::kSampled, 2,
                              rng.normal_mat(2, 4)),
                  ShapeError);
  CHECK_THROWS_AS(model::elbo(ok, reg, pv, rng.normal_mat(2, 4), {},
                              model::DecodeMode::kAnalytic),
                  ShapeError);

  model::ModelConfig md = ok;
  md.decoder = "mlp";
  md.dec_hidden = {4};
  const auto dreg = model::make_registry(md);
  const auto du = model::init_params(md, dreg, rng);
  CHECK_THROWS_AS(model::elbo(md, dreg, from_unconstrained(dreg, du), y, {},
                              model::DecodeMode::kAnalytic),
                  ShapeError);

  CHECK_THROWS_AS(model::random_mask(rng, 0, 0.5), ShapeError);
  CHECK_THROWS_AS(model::random_mask(rng, 5, 1.5), ShapeError);
}
