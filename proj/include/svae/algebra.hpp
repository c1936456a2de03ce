// SPDX-License-Identifier: Apache-2.0
//
// Free-function algebra over two interchangeable value types: plain
// Eigen::MatrixXd and ad::Var. Numeric cores (filter, smoother, sampler,
// ELBO terms, scan composes) are templates calling these overloads, so the
// same code runs plainly or under the tape. Scalars are 1x1 matrices.
//
// The Mat overloads mirror the tape's eval formulas expression by
// expression; keep them in sync.
#pragma once

#include <vector>

#include "svae/ad.hpp"
#include "svae/common.hpp"

namespace svae::alg {

// ---- plain Eigen overloads ----

inline Mat add(const Mat& a, const Mat& b) { return a + b; }
inline Mat sub(const Mat& a, const Mat& b) { return a - b; }
inline Mat neg(const Mat& a) { return -a; }
inline Mat scale(const Mat& a, double c) { return c * a; }
inline Mat matmul(const Mat& a, const Mat& b) {
  require(a.cols() == b.rows(), "matmul: shape mismatch");
  return a * b;
}
inline Mat transpose(const Mat& a) { return a.transpose(); }
inline Mat sym(const Mat& a) { return 0.5 * (a + a.transpose()); }
inline Mat hadamard(const Mat& a, const Mat& b) { return a.cwiseProduct(b); }
inline Mat recip(const Mat& a) { return a.cwiseInverse(); }

inline Mat inverse(const Mat& a) {
  require(a.rows() == a.cols(), "inverse: not square");
  Eigen::PartialPivLU<Mat> lu(a);
  return lu.inverse();
}

inline Mat logdet_pos(const Mat& a) {
  require(a.rows() == a.cols(), "logdet_pos: not square");
  Eigen::PartialPivLU<Mat> lu(a);
  double logabs = 0.0;
  double sign = lu.permutationP().determinant();
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const double u = lu.matrixLU()(k, k);
    require(u != 0.0, "logdet_pos: singular matrix");
    logabs += std::log(std::abs(u));
    if (u < 0.0) sign = -sign;
  }
  require(sign > 0.0, "logdet_pos: determinant not positive");
  Mat out(1, 1);
  out(0, 0) = logabs;
  return out;
}

inline Mat spd_inverse(const Mat& a) {
  const auto llt = checked_llt(a, "spd_inverse");
  const auto d = a.rows();
  Mat x = llt.solve(Mat::Identity(d, d));
  return 0.5 * (x + x.transpose()).eval();
}

inline Mat spd_logdet(const Mat& a) {
  const auto llt = checked_llt(a, "spd_logdet");
  Mat out(1, 1);
  out(0, 0) = logdet_from_llt(llt);
  return out;
}

inline Mat cholesky_lower(const Mat& a) {
  const auto llt = checked_llt(a, "cholesky_lower");
  return llt.matrixL();
}

inline Mat relu(const Mat& a) { return a.cwiseMax(0.0); }
inline Mat softplus(const Mat& a) {
  return a.unaryExpr(&ad::detail::softplus_scalar);
}
inline Mat exp(const Mat& a) { return a.array().exp(); }
inline Mat log(const Mat& a) { return a.array().log(); }

inline Mat sum(const Mat& a) {
  Mat out(1, 1);
  out(0, 0) = a.sum();
  return out;
}
inline Mat dot(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "dot: shape mismatch");
  Mat out(1, 1);
  out(0, 0) = a.cwiseProduct(b).sum();
  return out;
}
inline Mat trace(const Mat& a) {
  require(a.rows() == a.cols(), "trace: not square");
  Mat out(1, 1);
  out(0, 0) = a.trace();
  return out;
}

inline Mat diag_embed(const Mat& a) {
  require(a.cols() == 1, "diag_embed: not a vector");
  Mat out = Mat::Zero(a.rows(), a.rows());
  out.diagonal() = a.col(0);
  return out;
}
inline Mat diag_part(const Mat& a) {
  require(a.rows() == a.cols(), "diag_part: not square");
  return a.diagonal();
}
inline Mat broadcast_cols(const Mat& a, int ncols) {
  require(a.cols() == 1, "broadcast_cols: not a vector");
  return a * Mat::Ones(1, ncols);
}
inline Mat col(const Mat& a, int j) { return a.col(j); }

inline Mat hstack(const std::vector<Mat>& parts) {
  require(!parts.empty(), "hstack: empty");
  Eigen::Index cols = 0;
  for (const Mat& p : parts) cols += p.cols();
  Mat out(parts.front().rows(), cols);
  Eigen::Index c = 0;
  for (const Mat& p : parts) {
    require(p.rows() == out.rows(), "hstack: row mismatch");
    out.middleCols(c, p.cols()) = p;
    c += p.cols();
  }
  return out;
}

inline Mat tril_strict_unpack(const Mat& a, int n) {
  require(a.cols() == 1 &&
              a.rows() == static_cast<Eigen::Index>(n) * (n - 1) / 2,
          "tril_strict_unpack: bad packed size");
  Mat out = Mat::Zero(n, n);
  int k = 0;
  for (int j = 0; j < n; ++j)
    for (int i = j + 1; i < n; ++i) out(i, j) = a(k++, 0);
  return out;
}

inline Mat scalar_mul(const Mat& s, const Mat& a) {
  require(s.size() == 1, "scalar_mul: first arg not scalar");
  return s(0, 0) * a;
}

inline Mat lift(const Mat&, const Mat& v) { return v; }
inline const Mat& value_of(const Mat& a) { return a; }
inline double as_double(const Mat& a) {
  require(a.size() == 1, "as_double: not scalar");
  return a(0, 0);
}

// ---- tape overloads ----

inline ad::Var add(ad::Var a, ad::Var b) { return a.tape->add(a, b); }
inline ad::Var sub(ad::Var a, ad::Var b) { return a.tape->sub(a, b); }
inline ad::Var neg(ad::Var a) { return a.tape->neg(a); }
inline ad::Var scale(ad::Var a, double c) { return a.tape->scale(a, c); }
inline ad::Var matmul(ad::Var a, ad::Var b) { return a.tape->matmul(a, b); }
inline ad::Var transpose(ad::Var a) { return a.tape->transpose(a); }
inline ad::Var sym(ad::Var a) { return a.tape->sym(a); }
inline ad::Var hadamard(ad::Var a, ad::Var b) {
  return a.tape->hadamard(a, b);
}
inline ad::Var recip(ad::Var a) { return a.tape->recip(a); }
inline ad::Var inverse(ad::Var a) { return a.tape->inverse(a); }
inline ad::Var logdet_pos(ad::Var a) { return a.tape->logdet_pos(a); }
inline ad::Var spd_inverse(ad::Var a) { return a.tape->spd_inverse(a); }
inline ad::Var spd_logdet(ad::Var a) { return a.tape->spd_logdet(a); }
inline ad::Var cholesky_lower(ad::Var a) {
  return a.tape->cholesky_lower(a);
}
inline ad::Var relu(ad::Var a) { return a.tape->relu(a); }
inline ad::Var softplus(ad::Var a) { return a.tape->softplus(a); }
inline ad::Var exp(ad::Var a) { return a.tape->exp(a); }
inline ad::Var log(ad::Var a) { return a.tape->log(a); }
inline ad::Var sum(ad::Var a) { return a.tape->sum(a); }
inline ad::Var dot(ad::Var a, ad::Var b) { return a.tape->dot(a, b); }
inline ad::Var trace(ad::Var a) { return a.tape->trace(a); }
inline ad::Var diag_embed(ad::Var a) { return a.tape->diag_embed(a); }
inline ad::Var diag_part(ad::Var a) { return a.tape->diag_part(a); }
inline ad::Var broadcast_cols(ad::Var a, int ncols) {
  return a.tape->broadcast_cols(a, ncols);
}
inline ad::Var col(ad::Var a, int j) { return a.tape->col(a, j); }
inline ad::Var hstack(const std::vector<ad::Var>& parts) {
  require(!parts.empty(), "hstack: empty");
  return parts.front().tape->hstack(parts);
}
inline ad::Var tril_strict_unpack(ad::Var a, int n) {
  return a.tape->tril_strict_unpack(a, n);
}
inline ad::Var scalar_mul(ad::Var s, ad::Var a) {
  return s.tape->scalar_mul(s, a);
}

inline ad::Var lift(ad::Var like, const Mat& v) {
  return like.tape->constant(v);
}
inline const Mat& value_of(ad::Var a) { return a.tape->val(a); }
inline double as_double(ad::Var a) { return as_double(value_of(a)); }

}  // namespace svae::alg
