// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace svae {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Cholesky failed or a covariance/precision is not positive definite.
struct DegenerateCovarianceError : std::runtime_error {
  explicit DegenerateCovarianceError(const std::string& what)
      : std::runtime_error(what) {}
};

// A factor with singular precision cannot be normalized into moment form.
struct CannotNormalizeError : std::runtime_error {
  explicit CannotNormalizeError(const std::string& what)
      : std::runtime_error(what) {}
};

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_symmetric(const Mat& m, const char* who,
                              double tol = 1e-9) {
  if (m.rows() != m.cols()) throw ShapeError(std::string(who) + ": not square");
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > tol * scale)
    throw ShapeError(std::string(who) + ": matrix not symmetric");
}

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

// Cholesky with a typed failure; the algebra layer never regularizes.
inline Eigen::LLT<Mat> checked_llt(const Mat& m, const char* who) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success)
    throw DegenerateCovarianceError(std::string(who) +
                                    ": matrix not positive definite");
  return llt;
}

inline double logdet_from_llt(const Eigen::LLT<Mat>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace svae
