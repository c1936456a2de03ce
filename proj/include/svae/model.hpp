// SPDX-License-Identifier: Apache-2.0
//
// The sequence model: a linear-Gaussian latent prior, a recognition
// network emitting one Gaussian factor per frame, and a linear or MLP
// decoder. The evidence bound splits as reconstruction minus
// KL(posterior || prior); the KL is always analytic, reconstruction is
// analytic for the linear decoder or sampled through the posterior
// otherwise. Every computation is templated over the algebra value type
// and runs identically on plain matrices and on the tape.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svae/grad.hpp"
#include "svae/inference.hpp"
#include "svae/rng.hpp"

namespace svae::model {

using Mask = std::vector<std::uint8_t>;

inline constexpr double kPotentialVarFloor = 1e-6;

enum class DecodeMode { kAnalytic, kSampled };

struct ModelConfig {
  int latent_dim = 0;
  int obs_dim = 0;
  std::string encoder = "linear";  // "linear" | "mlp"
  std::string decoder = "linear";  // "linear" | "mlp"
  std::vector<int> enc_hidden{128, 128};
  std::vector<int> dec_hidden{128, 128};
  bool full_potential_cov = false;

  void validate() const {
    require(latent_dim >= 1, "ModelConfig: latent_dim must be positive");
    require(obs_dim >= 1, "ModelConfig: obs_dim must be positive");
    require(encoder == "linear" || encoder == "mlp",
            "ModelConfig: encoder must be linear or mlp");
    require(decoder == "linear" || decoder == "mlp",
            "ModelConfig: decoder must be linear or mlp");
    for (const int h : enc_hidden)
      require(h >= 1, "ModelConfig: bad encoder hidden width");
    for (const int h : dec_hidden)
      require(h >= 1, "ModelConfig: bad decoder hidden width");
    if (encoder == "mlp")
      require(!enc_hidden.empty(), "ModelConfig: encoder mlp needs layers");
    if (decoder == "mlp")
      require(!dec_hidden.empty(), "ModelConfig: decoder mlp needs layers");
  }

  DecodeMode natural_mode() const {
    return decoder == "linear" ? DecodeMode::kAnalytic : DecodeMode::kSampled;
  }
};

inline grad::ParamRegistry make_registry(const ModelConfig& cfg) {
  cfg.validate();
  const int D = cfg.latent_dim;
  const int N = cfg.obs_dim;
  grad::ParamRegistry reg;
  reg.add("prior.mu1", D, 1);
  reg.add("prior.Q1", D, D, grad::ParamKind::kSpdFull);
  reg.add("prior.A", D, D);
  reg.add("prior.b", D, 1);
  reg.add("prior.Q", D, D, grad::ParamKind::kSpdFull);

  int feat = N;
  if (cfg.encoder == "mlp") {
    for (std::size_t i = 0; i < cfg.enc_hidden.size(); ++i) {
      const int h = cfg.enc_hidden[i];
      reg.add("enc.l" + std::to_string(i) + ".W", h, feat);
      reg.add("enc.l" + std::to_string(i) + ".b", h, 1);
      feat = h;
    }
  }
  reg.add("enc.Wm", D, feat);
  reg.add("enc.bm", D, 1);
  if (cfg.encoder == "linear") {
    reg.add("enc.V", D, D,
            cfg.full_potential_cov ? grad::ParamKind::kSpdFull
                                   : grad::ParamKind::kSpdDiag);
  } else {
    reg.add("enc.Wv", D, feat);
    reg.add("enc.bv", D, 1);
    if (cfg.full_potential_cov) {
      const int P = D * (D - 1) / 2;
      if (P > 0) {
        reg.add("enc.Wl", P, feat);
        reg.add("enc.bl", P, 1);
      }
    }
  }

  int dfeat = D;
  if (cfg.decoder == "mlp") {
    for (std::size_t i = 0; i < cfg.dec_hidden.size(); ++i) {
      const int h = cfg.dec_hidden[i];
      reg.add("dec.l" + std::to_string(i) + ".W", h, dfeat);
      reg.add("dec.l" + std::to_string(i) + ".b", h, 1);
      dfeat = h;
    }
  }
  reg.add("dec.C", N, dfeat);
  reg.add("dec.d", N, 1);
  reg.add("dec.R", N, N, grad::ParamKind::kSpdDiag);
  return reg;
}

namespace detail {

inline Mat fan_in_uniform(Rng& rng, int rows, int cols) {
  const double s = 1.0 / std::sqrt(static_cast<double>(cols));
  Mat m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(-s, s);
  return m;
}

// Random proper rotation with small eigen-angles, via the Cayley
// transform of a small skew matrix. Large-angle initial dynamics let the
// encoder fold the latent manifold into a high-frequency carrier that the
// bound cannot distinguish from a smooth one.
inline Mat random_slow_rotation(Rng& rng, int d, double scale = 0.1) {
  const Mat g = rng.normal_mat(d, d);
  const Mat k = scale * 0.5 * (g - g.transpose());
  const Mat eye = Mat::Identity(d, d);
  return (eye - k) * (eye + k).inverse();
}

}  // namespace detail

inline grad::UnconstrainedParams init_params(const ModelConfig& cfg,
                                             const grad::ParamRegistry& reg,
                                             Rng& rng) {
  grad::ParamVector pv;
  for (const auto& s : reg.specs()) {
    if (s.name == "prior.A") {
      pv.values.push_back(0.9 *
                          detail::random_slow_rotation(rng, cfg.latent_dim));
    } else if (s.kind != grad::ParamKind::kPlain) {
      pv.values.push_back(Mat::Identity(s.rows, s.cols));
    } else if (s.cols == 1) {
      pv.values.push_back(Mat::Zero(s.rows, 1));
    } else {
      pv.values.push_back(detail::fan_in_uniform(rng, s.rows, s.cols));
    }
  }
  return to_unconstrained(reg, pv);
}

template <class T>
struct ModelViewT {
  inference::core::PriorT<T> prior;
  std::vector<T> enc_lw, enc_lb;
  T enc_Wm{}, enc_bm{};
  T enc_V{};
  T enc_Wv{}, enc_bv{};
  T enc_Wl{}, enc_bl{};
  std::vector<T> dec_lw, dec_lb;
  T dec_C{}, dec_d{}, dec_R{};
};

// getter(name) must return the constrained parameter value; SPD-kind
// parameters arrive symmetric by construction, as the filter requires.
template <class T, class Getter>
ModelViewT<T> make_view(const ModelConfig& cfg, Getter&& get) {
  ModelViewT<T> mv;
  mv.prior = {get("prior.mu1"), get("prior.Q1"), get("prior.A"),
              get("prior.b"), get("prior.Q")};
  if (cfg.encoder == "mlp") {
    for (std::size_t i = 0; i < cfg.enc_hidden.size(); ++i) {
      mv.enc_lw.push_back(get("enc.l" + std::to_string(i) + ".W"));
      mv.enc_lb.push_back(get("enc.l" + std::to_string(i) + ".b"));
    }
  }
  mv.enc_Wm = get("enc.Wm");
  mv.enc_bm = get("enc.bm");
  if (cfg.encoder == "linear") {
    mv.enc_V = get("enc.V");
  } else {
    mv.enc_Wv = get("enc.Wv");
    mv.enc_bv = get("enc.bv");
    if (cfg.full_potential_cov && cfg.latent_dim > 1) {
      mv.enc_Wl = get("enc.Wl");
      mv.enc_bl = get("enc.bl");
    }
  }
  if (cfg.decoder == "mlp") {
    for (std::size_t i = 0; i < cfg.dec_hidden.size(); ++i) {
      mv.dec_lw.push_back(get("dec.l" + std::to_string(i) + ".W"));
      mv.dec_lb.push_back(get("dec.l" + std::to_string(i) + ".b"));
    }
  }
  mv.dec_C = get("dec.C");
  mv.dec_d = get("dec.d");
  mv.dec_R = get("dec.R");
  return mv;
}

inline ModelViewT<Mat> make_view(const ModelConfig& cfg,
                                 const grad::ParamRegistry& reg,
                                 const grad::ParamVector& pv) {
  return make_view<Mat>(cfg, [&](const std::string& n) {
    return pv.values[static_cast<std::size_t>(reg.require_index(n))];
  });
}

inline ModelViewT<ad::Var> make_view(const ModelConfig& cfg,
                                     const grad::ParamRegistry& reg,
                                     const grad::TapeParams& tp) {
  return make_view<ad::Var>(cfg, [&](const std::string& n) {
    return tp.values[static_cast<std::size_t>(reg.require_index(n))];
  });
}

namespace detail {

inline bool step_masked(const Mask& mask, int t) {
  return !mask.empty() && mask[static_cast<std::size_t>(t)] != 0;
}

template <class T>
T constant1(const T& like, double v) {
  return alg::lift(like, Mat::Constant(1, 1, v));
}

// One affine+relu stack applied to all columns at once.
template <class T>
T apply_layers(const std::vector<T>& Ws, const std::vector<T>& bs, T X,
               int ncols) {
  for (std::size_t i = 0; i < Ws.size(); ++i) {
    X = alg::relu(alg::add(alg::matmul(Ws[i], X),
                           alg::broadcast_cols(bs[i], ncols)));
  }
  return X;
}

}  // namespace detail

// Per-frame Gaussian factors from the recognition network; masked frames
// become structural skips that touch no parameter.
template <class T>
std::vector<inference::core::PotT<T>> encode_core(const ModelConfig& cfg,
                                                  const ModelViewT<T>& mv,
                                                  const T& ylift, int Tn,
                                                  const Mask& mask) {
  const int D = cfg.latent_dim;
  std::vector<inference::core::PotT<T>> out(Tn);
  bool all_masked = true;
  for (int t = 0; t < Tn; ++t) {
    out[t].masked = detail::step_masked(mask, t);
    all_masked = all_masked && out[t].masked;
  }
  if (all_masked) return out;

  T X = detail::apply_layers(mv.enc_lw, mv.enc_lb, ylift, Tn);
  T M = alg::add(alg::matmul(mv.enc_Wm, X),
                 alg::broadcast_cols(mv.enc_bm, Tn));
  const double half_dim_const = -0.5 * D * kLog2Pi;

  if (cfg.encoder == "linear") {
    T J = alg::spd_inverse(mv.enc_V);
    T logdetV = alg::spd_logdet(mv.enc_V);
    for (int t = 0; t < Tn; ++t) {
      if (out[t].masked) continue;
      T m = alg::col(M, t);
      T h = alg::matmul(J, m);
      out[t].h = h;
      out[t].J = J;
      out[t].c = alg::add(
          alg::scale(alg::dot(m, h), -0.5),
          alg::add(detail::constant1(logdetV, half_dim_const),
                   alg::scale(logdetV, -0.5)));
    }
    return out;
  }

  T Sv = alg::add(alg::matmul(mv.enc_Wv, X),
                  alg::broadcast_cols(mv.enc_bv, Tn));
  if (!cfg.full_potential_cov || D == 1) {
    T S = alg::add(alg::softplus(Sv),
                   alg::lift(Sv, Mat::Constant(D, Tn, kPotentialVarFloor)));
    for (int t = 0; t < Tn; ++t) {
      if (out[t].masked) continue;
      T s = alg::col(S, t);
      T m = alg::col(M, t);
      T jd = alg::recip(s);
      T h = alg::hadamard(jd, m);
      out[t].h = h;
      out[t].J = alg::diag_embed(jd);
      out[t].c = alg::add(
          alg::scale(alg::dot(m, h), -0.5),
          alg::add(detail::constant1(h, half_dim_const),
                   alg::scale(alg::sum(alg::log(s)), -0.5)));
    }
    return out;
  }

  T Sd = alg::add(alg::softplus(Sv),
                  alg::lift(Sv, Mat::Constant(D, Tn, kPotentialVarFloor)));
  T Sl = alg::add(alg::matmul(mv.enc_Wl, X),
                  alg::broadcast_cols(mv.enc_bl, Tn));
  for (int t = 0; t < Tn; ++t) {
    if (out[t].masked) continue;
    T L = alg::add(alg::diag_embed(alg::col(Sd, t)),
                   alg::tril_strict_unpack(alg::col(Sl, t), D));
    T V = alg::sym(alg::matmul(L, alg::transpose(L)));
    T J = alg::spd_inverse(V);
    T m = alg::col(M, t);
    T h = alg::matmul(J, m);
    out[t].h = h;
    out[t].J = J;
    out[t].c = alg::add(
        alg::scale(alg::dot(m, h), -0.5),
        alg::add(detail::constant1(h, half_dim_const),
                 alg::scale(alg::spd_logdet(V), -0.5)));
  }
  return out;
}

// Decoded observation means for a D x T block of states.
template <class T>
T decode_mean_core(const ModelConfig& cfg, const ModelViewT<T>& mv, T X,
                   int Tn) {
  T H = detail::apply_layers(mv.dec_lw, mv.dec_lb, X, Tn);
  return alg::add(alg::matmul(mv.dec_C, H), alg::broadcast_cols(mv.dec_d, Tn));
}

namespace detail {

// Sum over columns of log N(res_t; 0, diag(rdiag)).
template <class T>
T diag_gauss_ll(const T& res, const T& rdiag, int Tn, int N) {
  T quad = alg::dot(
      res, alg::hadamard(alg::broadcast_cols(alg::recip(rdiag), Tn), res));
  T logdet = alg::sum(alg::log(rdiag));
  return alg::add(
      alg::scale(alg::add(alg::scale(logdet, double(Tn)), quad), -0.5),
      constant1(quad, -0.5 * double(Tn) * N * kLog2Pi));
}

}  // namespace detail

template <class T>
struct ElboTermsT {
  T elbo, recon, kl, log_z;
};

// noise: D x (T * n_samples) standard normal draws for kSampled, column
// s*T + t for sample s step t; ignored for kAnalytic.
template <class T>
ElboTermsT<T> elbo_core(const ModelConfig& cfg, const ModelViewT<T>& mv,
                        const Mat& y, const Mask& mask, DecodeMode mode,
                        int n_samples, const Mat& noise) {
  cfg.validate();
  const int Tn = static_cast<int>(y.cols());
  const int N = cfg.obs_dim;
  const int D = cfg.latent_dim;
  require(static_cast<int>(y.rows()) == N, "elbo_core: obs dim mismatch");
  require(Tn >= 1, "elbo_core: empty sequence");
  require(mask.empty() || static_cast<int>(mask.size()) == Tn,
          "elbo_core: mask length mismatch");
  if (mode == DecodeMode::kAnalytic)
    require(cfg.decoder == "linear",
            "elbo_core: analytic reconstruction needs the linear decoder");
  else
    require(n_samples >= 1 && noise.rows() == D &&
                noise.cols() == static_cast<Eigen::Index>(Tn) * n_samples,
            "elbo_core: noise must be D x (T * n_samples)");

  T ylift = alg::lift(mv.prior.A, y);
  const auto pots = encode_core(cfg, mv, ylift, Tn, mask);
  const auto f = inference::core::filter_core(mv.prior, pots);
  const auto G = inference::core::gains_core(mv.prior, f);
  const auto s = inference::core::smooth_core(f, G);
  T kl = inference::core::kl_core(pots, s, f.log_z);

  T rdiag = alg::diag_part(mv.dec_R);
  T recon;
  if (mode == DecodeMode::kAnalytic) {
    T Ms = alg::hstack(s.ms);
    T res = alg::sub(ylift, alg::add(alg::matmul(mv.dec_C, Ms),
                                     alg::broadcast_cols(mv.dec_d, Tn)));
    T ll = detail::diag_gauss_ll(res, rdiag, Tn, N);
    T RinvC = alg::hadamard(
        alg::broadcast_cols(alg::recip(rdiag), D), mv.dec_C);
    T CtRiC = alg::matmul(alg::transpose(mv.dec_C), RinvC);
    T tsum = alg::dot(CtRiC, s.Ps[0]);
    for (int t = 1; t < Tn; ++t)
      tsum = alg::add(tsum, alg::dot(CtRiC, s.Ps[t]));
    recon = alg::add(ll, alg::scale(tsum, -0.5));
  } else {
    T acc = detail::constant1(kl, 0.0);
    for (int smp = 0; smp < n_samples; ++smp) {
      std::vector<T> eps;
      eps.reserve(Tn);
      for (int t = 0; t < Tn; ++t)
        eps.push_back(
            alg::lift(mv.prior.A, Mat(noise.col(smp * Tn + t))));
      const auto xs = inference::core::ffbs_core(f, G, eps);
      T X = alg::hstack(xs);
      T res = alg::sub(ylift, decode_mean_core(cfg, mv, X, Tn));
      acc = alg::add(acc, detail::diag_gauss_ll(res, rdiag, Tn, N));
    }
    recon = alg::scale(acc, 1.0 / n_samples);
  }
  T elbo = alg::sub(recon, kl);
  return {elbo, recon, kl, f.log_z};
}

struct ElboBreakdown {
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double log_normalizer = 0.0;
};

inline ElboBreakdown elbo(const ModelConfig& cfg,
                          const grad::ParamRegistry& reg,
                          const grad::ParamVector& pv, const Mat& y,
                          const Mask& mask, DecodeMode mode,
                          int n_samples = 1, const Mat& noise = Mat()) {
  const auto mv = make_view(cfg, reg, pv);
  const auto t = elbo_core(cfg, mv, y, mask, mode, n_samples, noise);
  return {alg::as_double(t.elbo), alg::as_double(t.recon),
          alg::as_double(t.kl), alg::as_double(t.log_z)};
}

// Contiguous mask of round(fraction * T) frames at a uniform start.
inline Mask random_mask(Rng& rng, int T, double fraction) {
  require(T >= 1, "random_mask: T < 1");
  require(fraction >= 0.0 && fraction <= 1.0,
          "random_mask: fraction out of range");
  Mask m(static_cast<std::size_t>(T), 0);
  const int len =
      static_cast<int>(std::lround(fraction * static_cast<double>(T)));
  if (len <= 0) return m;
  const int start = static_cast<int>(rng.below(T - len + 1));
  for (int t = start; t < start + len; ++t)
    m[static_cast<std::size_t>(t)] = 1;
  return m;
}

inline int mask_count(const Mask& m) {
  int c = 0;
  for (const auto v : m) c += v != 0;
  return c;
}

// One training batch: sequences with their masks and, for kSampled, the
// posterior noise draws.
struct BatchItem {
  Mat y;
  Mask mask;
  Mat noise;
};

// Mean negative evidence bound over the batch, built on one tape.
inline ad::Var batch_loss_tape(const ModelConfig& cfg,
                               const grad::ParamRegistry& reg, ad::Tape& tape,
                               const grad::TapeParams& tp,
                               const std::vector<BatchItem>& batch,
                               DecodeMode mode, int n_samples) {
  require(!batch.empty(), "batch_loss_tape: empty batch");
  const auto mv = make_view(cfg, reg, tp);
  ad::Var acc{};
  for (const auto& item : batch) {
    const auto terms =
        elbo_core(cfg, mv, item.y, item.mask, mode, n_samples, item.noise);
    acc = acc.valid() ? alg::add(acc, terms.elbo) : terms.elbo;
  }
  return alg::scale(acc, -1.0 / static_cast<double>(batch.size()));
}

}  // namespace svae::model
