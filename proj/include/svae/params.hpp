// SPDX-License-Identifier: Apache-2.0
//
// Named parameter registry with an unconstrained reparameterization.
// SPD matrices are carried as Cholesky factors with log diagonal
// (spd_full) or as log variances (spd_diag); everything else is stored
// as-is. Optimization and checkpoints operate on the flat unconstrained
// vector, models on the constrained values.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "svae/ad.hpp"
#include "svae/algebra.hpp"
#include "svae/common.hpp"

namespace svae::grad {

enum class ParamKind { kPlain, kSpdFull, kSpdDiag };

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  ParamKind kind = ParamKind::kPlain;

  long unconstrained_len() const {
    switch (kind) {
      case ParamKind::kPlain:
        return static_cast<long>(rows) * cols;
      case ParamKind::kSpdFull:
        return rows + static_cast<long>(rows) * (rows - 1) / 2;
      case ParamKind::kSpdDiag:
        return rows;
    }
    return 0;
  }
};

class ParamRegistry {
 public:
  int add(std::string name, int rows, int cols,
          ParamKind kind = ParamKind::kPlain) {
    require(rows > 0 && cols > 0, "ParamRegistry: bad shape");
    if (kind != ParamKind::kPlain)
      require(rows == cols, "ParamRegistry: SPD parameter must be square");
    require(index_of(name) < 0, "ParamRegistry: duplicate name " + name);
    specs_.push_back({std::move(name), rows, cols, kind});
    offsets_.push_back(flat_size_);
    flat_size_ += specs_.back().unconstrained_len();
    return static_cast<int>(specs_.size()) - 1;
  }

  int count() const { return static_cast<int>(specs_.size()); }
  const ParamSpec& spec(int i) const { return specs_.at(i); }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  long flat_size() const { return flat_size_; }
  long offset(int i) const { return offsets_.at(i); }

  int index_of(const std::string& name) const {
    for (int i = 0; i < count(); ++i)
      if (specs_[i].name == name) return i;
    return -1;
  }

  int require_index(const std::string& name) const {
    const int i = index_of(name);
    require(i >= 0, "ParamRegistry: unknown parameter " + name);
    return i;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::vector<long> offsets_;
  long flat_size_ = 0;
};

// Constrained values in registry order.
struct ParamVector {
  std::vector<Mat> values;

  Vec flatten() const {
    long n = 0;
    for (const Mat& m : values) n += m.size();
    Vec out(n);
    long at = 0;
    for (const Mat& m : values) {
      out.segment(at, m.size()) =
          Eigen::Map<const Vec>(m.data(), m.size());
      at += m.size();
    }
    return out;
  }

  static ParamVector unflatten(const ParamRegistry& reg, const Vec& flat) {
    ParamVector out;
    long at = 0;
    for (const auto& s : reg.specs()) {
      const long n = static_cast<long>(s.rows) * s.cols;
      require(at + n <= flat.size(), "unflatten: flat vector too short");
      out.values.push_back(
          Eigen::Map<const Mat>(flat.data() + at, s.rows, s.cols));
      at += n;
    }
    require(at == flat.size(), "unflatten: flat vector too long");
    return out;
  }
};

struct UnconstrainedParams {
  Vec flat;
};

namespace detail {

inline Mat spd_full_value(const Vec& seg, int d) {
  Mat L = Mat::Zero(d, d);
  L.diagonal() = seg.head(d).array().exp();
  int k = d;
  for (int j = 0; j < d; ++j)
    for (int i = j + 1; i < d; ++i) L(i, j) = seg(k++);
  const Mat S = L * L.transpose();
  return 0.5 * (S + S.transpose());
}

inline Vec spd_full_unconstrain(const Mat& m, const char* who) {
  const int d = static_cast<int>(m.rows());
  const Mat L = checked_llt(symmetrize(m), who).matrixL();
  Vec seg(d + d * (d - 1) / 2);
  seg.head(d) = L.diagonal().array().log();
  int k = d;
  for (int j = 0; j < d; ++j)
    for (int i = j + 1; i < d; ++i) seg(k++) = L(i, j);
  return seg;
}

}  // namespace detail

inline ParamVector from_unconstrained(const ParamRegistry& reg,
                                      const UnconstrainedParams& u) {
  require(u.flat.size() == reg.flat_size(),
          "from_unconstrained: flat size mismatch");
  ParamVector out;
  for (int i = 0; i < reg.count(); ++i) {
    const auto& s = reg.spec(i);
    const auto seg = u.flat.segment(reg.offset(i), s.unconstrained_len());
    switch (s.kind) {
      case ParamKind::kPlain:
        out.values.push_back(
            Eigen::Map<const Mat>(seg.data(), s.rows, s.cols));
        break;
      case ParamKind::kSpdFull:
        out.values.push_back(detail::spd_full_value(seg, s.rows));
        break;
      case ParamKind::kSpdDiag: {
        Mat m = Mat::Zero(s.rows, s.rows);
        m.diagonal() = seg.array().exp();
        out.values.push_back(std::move(m));
        break;
      }
    }
  }
  return out;
}

inline UnconstrainedParams to_unconstrained(const ParamRegistry& reg,
                                            const ParamVector& p) {
  require(static_cast<int>(p.values.size()) == reg.count(),
          "to_unconstrained: value count mismatch");
  UnconstrainedParams u;
  u.flat.resize(reg.flat_size());
  for (int i = 0; i < reg.count(); ++i) {
    const auto& s = reg.spec(i);
    const Mat& m = p.values[i];
    require(m.rows() == s.rows && m.cols() == s.cols,
            "to_unconstrained: shape mismatch for " + s.name);
    auto seg = u.flat.segment(reg.offset(i), s.unconstrained_len());
    switch (s.kind) {
      case ParamKind::kPlain:
        seg = Eigen::Map<const Vec>(m.data(), m.size());
        break;
      case ParamKind::kSpdFull:
        seg = detail::spd_full_unconstrain(m, s.name.c_str());
        break;
      case ParamKind::kSpdDiag:
        seg = m.diagonal().array().log();
        break;
    }
  }
  return u;
}

// Tape-side mirror of from_unconstrained: registers one differentiable
// leaf per unconstrained block and returns the constrained value nodes.
// Leaf gradients concatenate back into the flat layout via collect_grad.
struct TapeParams {
  std::vector<std::vector<ad::Var>> leaves;  // per param, 1 or 2 blocks
  std::vector<ad::Var> values;               // constrained, per param
};

inline TapeParams make_tape_params(ad::Tape& tape, const ParamRegistry& reg,
                                   const UnconstrainedParams& u) {
  require(u.flat.size() == reg.flat_size(),
          "make_tape_params: flat size mismatch");
  TapeParams out;
  out.leaves.resize(reg.count());
  out.values.reserve(reg.count());
  for (int i = 0; i < reg.count(); ++i) {
    const auto& s = reg.spec(i);
    const long off = reg.offset(i);
    switch (s.kind) {
      case ParamKind::kPlain: {
        const Mat m =
            Eigen::Map<const Mat>(u.flat.data() + off, s.rows, s.cols);
        ad::Var leaf = tape.input(m);
        out.leaves[i] = {leaf};
        out.values.push_back(leaf);
        break;
      }
      case ParamKind::kSpdFull: {
        const int d = s.rows;
        ad::Var ud = tape.input(u.flat.segment(off, d));
        ad::Var ul = tape.input(u.flat.segment(off + d, d * (d - 1) / 2));
        out.leaves[i] = {ud, ul};
        ad::Var L = alg::add(alg::diag_embed(alg::exp(ud)),
                             alg::tril_strict_unpack(ul, d));
        out.values.push_back(
            alg::sym(alg::matmul(L, alg::transpose(L))));
        break;
      }
      case ParamKind::kSpdDiag: {
        ad::Var uu = tape.input(u.flat.segment(off, s.rows));
        out.leaves[i] = {uu};
        out.values.push_back(alg::diag_embed(alg::exp(uu)));
        break;
      }
    }
  }
  return out;
}

inline Vec collect_grad(const ad::Tape& tape, const ParamRegistry& reg,
                        const TapeParams& tp) {
  Vec g(reg.flat_size());
  for (int i = 0; i < reg.count(); ++i) {
    long at = reg.offset(i);
    for (const ad::Var& leaf : tp.leaves[i]) {
      const Mat& lg = tape.grad_of(leaf);
      g.segment(at, lg.size()) = Eigen::Map<const Vec>(lg.data(), lg.size());
      at += lg.size();
    }
  }
  return g;
}

}  // namespace svae::grad
