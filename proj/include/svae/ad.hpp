// SPDX-License-Identifier: Apache-2.0
//
// Replayable tape for reverse-mode differentiation over dense f64 matrices.
// Every node stores its operation tag and parent slots, so a tape can be
// re-executed on fresh leaf values (replay) and cheaply cloned per thread.
// Vectors are one-column matrices, scalars are 1x1.
//
// Convention: the LLT-backed ops (spd_inverse, spd_logdet, cholesky_lower)
// must receive sym()-wrapped inputs; their adjoints are the symmetric ones,
// and finite differences against a raw full-matrix input agree only through
// the sym node. Generic-matrix inverse/logdet_pos use LU and need no wrap.
#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "svae/common.hpp"

namespace svae::ad {

enum class Op : std::uint8_t {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kNeg,
  kScale,
  kMatmul,
  kTranspose,
  kSym,
  kHadamard,
  kRecip,
  kInverse,
  kLogDetPos,
  kSpdInverse,
  kSpdLogdet,
  kCholeskyLower,
  kRelu,
  kSoftplus,
  kExp,
  kLog,
  kSum,
  kDot,
  kTrace,
  kDiagEmbed,
  kDiagPart,
  kBroadcastCols,
  kCol,
  kHstack,
  kTrilStrictUnpack,
  kScalarMul,
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
};

namespace detail {

inline double softplus_scalar(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

class Tape {
 public:
  struct Node {
    Op op;
    bool requires_grad = false;
    int pa = -1, pb = -1;
    int extra_start = -1, extra_count = 0;
    int iaux = 0;
    double aux = 0.0;
    Mat value;
    Mat grad;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  Var var(int idx) { return {this, idx}; }

  const Mat& val(Var v) const { return at(v).value; }
  const Mat& grad_of(Var v) const { return at(v).grad; }

  Var input(const Mat& v, bool requires_grad = true) {
    Node n;
    n.op = Op::kInput;
    n.requires_grad = requires_grad;
    n.value = v;
    return push(std::move(n));
  }

  Var constant(const Mat& v) {
    Node n;
    n.op = Op::kConstant;
    n.value = v;
    return push(std::move(n));
  }

  void set_value(Var v, const Mat& value) {
    Node& n = at(v);
    require(n.op == Op::kInput || n.op == Op::kConstant,
            "set_value: not a leaf");
    require(n.value.rows() == value.rows() && n.value.cols() == value.cols(),
            "set_value: shape change on replay leaf");
    n.value = value;
  }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var neg(Var a) { return unary(Op::kNeg, a); }
  Var scale(Var a, double c) {
    Var v = unary(Op::kScale, a, /*eval_now=*/false);
    at(v).aux = c;
    eval(at(v));
    return v;
  }
  Var matmul(Var a, Var b) { return binary(Op::kMatmul, a, b); }
  Var transpose(Var a) { return unary(Op::kTranspose, a); }
  Var sym(Var a) { return unary(Op::kSym, a); }
  Var hadamard(Var a, Var b) { return binary(Op::kHadamard, a, b); }
  Var recip(Var a) { return unary(Op::kRecip, a); }
  Var inverse(Var a) { return unary(Op::kInverse, a); }
  Var logdet_pos(Var a) { return unary(Op::kLogDetPos, a); }
  Var spd_inverse(Var a) { return unary(Op::kSpdInverse, a); }
  Var spd_logdet(Var a) { return unary(Op::kSpdLogdet, a); }
  Var cholesky_lower(Var a) { return unary(Op::kCholeskyLower, a); }
  Var relu(Var a) { return unary(Op::kRelu, a); }
  Var softplus(Var a) { return unary(Op::kSoftplus, a); }
  Var exp(Var a) { return unary(Op::kExp, a); }
  Var log(Var a) { return unary(Op::kLog, a); }
  Var sum(Var a) { return unary(Op::kSum, a); }
  Var dot(Var a, Var b) { return binary(Op::kDot, a, b); }
  Var trace(Var a) { return unary(Op::kTrace, a); }
  Var diag_embed(Var a) { return unary(Op::kDiagEmbed, a); }
  Var diag_part(Var a) { return unary(Op::kDiagPart, a); }

  Var broadcast_cols(Var a, int ncols) {
    Var v = unary(Op::kBroadcastCols, a, /*eval_now=*/false);
    at(v).iaux = ncols;
    eval(at(v));
    return v;
  }

  Var col(Var a, int j) {
    Var v = unary(Op::kCol, a, /*eval_now=*/false);
    at(v).iaux = j;
    eval(at(v));
    return v;
  }

  Var hstack(const std::vector<Var>& parts) {
    require(!parts.empty(), "hstack: empty");
    Node n;
    n.op = Op::kHstack;
    n.extra_start = static_cast<int>(extra_.size());
    n.extra_count = static_cast<int>(parts.size());
    for (Var p : parts) {
      check_tape(p);
      extra_.push_back(p.idx);
      n.requires_grad = n.requires_grad || nodes_[p.idx].requires_grad;
    }
    Var v = push(std::move(n), /*eval_now=*/false);
    eval(at(v));
    return v;
  }

  Var tril_strict_unpack(Var a, int n) {
    Var v = unary(Op::kTrilStrictUnpack, a, /*eval_now=*/false);
    at(v).iaux = n;
    eval(at(v));
    return v;
  }

  Var scalar_mul(Var s, Var a) { return binary(Op::kScalarMul, s, a); }

  // Recompute every non-leaf value in topological (construction) order.
  void replay() {
    for (Node& n : nodes_) {
      if (n.op == Op::kInput || n.op == Op::kConstant) continue;
      eval(n);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
        n.grad.resize(n.value.rows(), n.value.cols());
      n.grad.setZero();
    }
  }

  void backward(Var out) {
    require(at(out).value.size() == 1, "backward: output not scalar");
    zero_grad();
    at(out).grad(0, 0) = 1.0;
    sweep(out.idx);
  }

  // Backward with externally supplied output adjoints; used when this tape
  // is one stage of a larger differentiable pipeline.
  void seed_and_backward(const std::vector<std::pair<Var, Mat>>& seeds) {
    zero_grad();
    int top = -1;
    for (const auto& [v, g] : seeds) {
      Node& n = at(v);
      require(n.value.rows() == g.rows() && n.value.cols() == g.cols(),
              "seed_and_backward: seed shape mismatch");
      n.grad += g;
      top = std::max(top, v.idx);
    }
    if (top >= 0) sweep(top);
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> extra_;

  Node& at(Var v) {
    require(v.tape == this && v.idx >= 0 && v.idx < size(), "foreign Var");
    return nodes_[v.idx];
  }
  const Node& at(Var v) const {
    require(v.tape == this && v.idx >= 0 && v.idx < size(), "foreign Var");
    return nodes_[v.idx];
  }

  void check_tape(Var v) {
    require(v.tape == this && v.idx >= 0 && v.idx < size(),
            "Var from another tape");
  }

  Var push(Node&& n, bool eval_now = true) {
    nodes_.push_back(std::move(n));
    if (eval_now) eval(nodes_.back());
    return {this, size() - 1};
  }

  Var unary(Op op, Var a, bool eval_now = true) {
    check_tape(a);
    Node n;
    n.op = op;
    n.pa = a.idx;
    n.requires_grad = nodes_[a.idx].requires_grad;
    return push(std::move(n), eval_now);
  }

  Var binary(Op op, Var a, Var b) {
    check_tape(a);
    check_tape(b);
    Node n;
    n.op = op;
    n.pa = a.idx;
    n.pb = b.idx;
    n.requires_grad =
        nodes_[a.idx].requires_grad || nodes_[b.idx].requires_grad;
    return push(std::move(n));
  }

  static Mat scalar1(double x) {
    Mat m(1, 1);
    m(0, 0) = x;
    return m;
  }

  void eval(Node& n) {
    const auto A = [&]() -> const Mat& { return nodes_[n.pa].value; };
    const auto B = [&]() -> const Mat& { return nodes_[n.pb].value; };
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kAdd:
        n.value = A() + B();
        break;
      case Op::kSub:
        n.value = A() - B();
        break;
      case Op::kNeg:
        n.value = -A();
        break;
      case Op::kScale:
        n.value = n.aux * A();
        break;
      case Op::kMatmul:
        require(A().cols() == B().rows(), "matmul: shape mismatch");
        n.value = A() * B();
        break;
      case Op::kTranspose:
        n.value = A().transpose();
        break;
      case Op::kSym:
        require(A().rows() == A().cols(), "sym: not square");
        n.value = 0.5 * (A() + A().transpose());
        break;
      case Op::kHadamard:
        require(A().rows() == B().rows() && A().cols() == B().cols(),
                "hadamard: shape mismatch");
        n.value = A().cwiseProduct(B());
        break;
      case Op::kRecip:
        n.value = A().cwiseInverse();
        break;
      case Op::kInverse: {
        require(A().rows() == A().cols(), "inverse: not square");
        Eigen::PartialPivLU<Mat> lu(A());
        n.value = lu.inverse();
        break;
      }
      case Op::kLogDetPos: {
        require(A().rows() == A().cols(), "logdet_pos: not square");
        Eigen::PartialPivLU<Mat> lu(A());
        double logabs = 0.0;
        double sign = lu.permutationP().determinant();
        for (Eigen::Index k = 0; k < A().rows(); ++k) {
          const double u = lu.matrixLU()(k, k);
          require(u != 0.0, "logdet_pos: singular matrix");
          logabs += std::log(std::abs(u));
          if (u < 0.0) sign = -sign;
        }
        require(sign > 0.0, "logdet_pos: determinant not positive");
        n.value = scalar1(logabs);
        break;
      }
      case Op::kSpdInverse: {
        const auto llt = checked_llt(A(), "spd_inverse");
        const auto d = A().rows();
        n.value = llt.solve(Mat::Identity(d, d));
        n.value = 0.5 * (n.value + n.value.transpose()).eval();
        break;
      }
      case Op::kSpdLogdet: {
        const auto llt = checked_llt(A(), "spd_logdet");
        n.value = scalar1(logdet_from_llt(llt));
        break;
      }
      case Op::kCholeskyLower: {
        const auto llt = checked_llt(A(), "cholesky_lower");
        n.value = llt.matrixL();
        break;
      }
      case Op::kRelu:
        n.value = A().cwiseMax(0.0);
        break;
      case Op::kSoftplus:
        n.value = A().unaryExpr(&detail::softplus_scalar);
        break;
      case Op::kExp:
        n.value = A().array().exp();
        break;
      case Op::kLog:
        n.value = A().array().log();
        break;
      case Op::kSum:
        n.value = scalar1(A().sum());
        break;
      case Op::kDot:
        require(A().rows() == B().rows() && A().cols() == B().cols(),
                "dot: shape mismatch");
        n.value = scalar1(A().cwiseProduct(B()).sum());
        break;
      case Op::kTrace:
        require(A().rows() == A().cols(), "trace: not square");
        n.value = scalar1(A().trace());
        break;
      case Op::kDiagEmbed:
        require(A().cols() == 1, "diag_embed: not a vector");
        n.value = Mat(A().rows(), A().rows());
        n.value.setZero();
        n.value.diagonal() = A().col(0);
        break;
      case Op::kDiagPart:
        require(A().rows() == A().cols(), "diag_part: not square");
        n.value = A().diagonal();
        break;
      case Op::kBroadcastCols:
        require(A().cols() == 1, "broadcast_cols: not a vector");
        n.value = A() * Mat::Ones(1, n.iaux);
        break;
      case Op::kCol:
        require(n.iaux >= 0 && n.iaux < A().cols(), "col: out of range");
        n.value = A().col(n.iaux);
        break;
      case Op::kHstack: {
        Eigen::Index rows = nodes_[extra_[n.extra_start]].value.rows();
        Eigen::Index cols = 0;
        for (int k = 0; k < n.extra_count; ++k) {
          const Mat& p = nodes_[extra_[n.extra_start + k]].value;
          require(p.rows() == rows, "hstack: row mismatch");
          cols += p.cols();
        }
        n.value.resize(rows, cols);
        Eigen::Index c = 0;
        for (int k = 0; k < n.extra_count; ++k) {
          const Mat& p = nodes_[extra_[n.extra_start + k]].value;
          n.value.middleCols(c, p.cols()) = p;
          c += p.cols();
        }
        break;
      }
      case Op::kTrilStrictUnpack: {
        const int d = n.iaux;
        require(A().cols() == 1 &&
                    A().rows() == static_cast<Eigen::Index>(d) * (d - 1) / 2,
                "tril_strict_unpack: bad packed size");
        n.value.resize(d, d);
        n.value.setZero();
        int k = 0;
        for (int j = 0; j < d; ++j)
          for (int i = j + 1; i < d; ++i) n.value(i, j) = A()(k++, 0);
        break;
      }
      case Op::kScalarMul:
        require(A().size() == 1, "scalar_mul: first arg not scalar");
        n.value = A()(0, 0) * B();
        break;
    }
  }

  void sweep(int top) {
    for (int i = top; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.op == Op::kInput || n.op == Op::kConstant) continue;
      if (n.grad.isZero(0.0)) continue;
      adjoint(n);
    }
  }

  void adjoint(Node& n) {
    const Mat& g = n.grad;
    auto A = [&]() -> const Mat& { return nodes_[n.pa].value; };
    auto B = [&]() -> const Mat& { return nodes_[n.pb].value; };
    auto gA = [&]() -> Mat& { return nodes_[n.pa].grad; };
    auto gB = [&]() -> Mat& { return nodes_[n.pb].grad; };
    const bool wa = n.pa >= 0 && nodes_[n.pa].requires_grad;
    const bool wb = n.pb >= 0 && nodes_[n.pb].requires_grad;
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kAdd:
        if (wa) gA() += g;
        if (wb) gB() += g;
        break;
      case Op::kSub:
        if (wa) gA() += g;
        if (wb) gB() -= g;
        break;
      case Op::kNeg:
        if (wa) gA() -= g;
        break;
      case Op::kScale:
        if (wa) gA() += n.aux * g;
        break;
      case Op::kMatmul:
        if (wa) gA().noalias() += g * B().transpose();
        if (wb) gB().noalias() += A().transpose() * g;
        break;
      case Op::kTranspose:
        if (wa) gA() += g.transpose();
        break;
      case Op::kSym:
        if (wa) gA() += 0.5 * (g + g.transpose());
        break;
      case Op::kHadamard:
        if (wa) gA() += g.cwiseProduct(B());
        if (wb) gB() += g.cwiseProduct(A());
        break;
      case Op::kRecip:
        if (wa) gA() -= g.cwiseProduct(n.value.cwiseProduct(n.value));
        break;
      case Op::kInverse:
        if (wa)
          gA().noalias() -=
              n.value.transpose() * g * n.value.transpose();
        break;
      case Op::kLogDetPos:
        if (wa) {
          Eigen::PartialPivLU<Mat> lu(A());
          gA() += g(0, 0) *
                  lu.inverse().transpose();
        }
        break;
      case Op::kSpdInverse:
        if (wa) gA().noalias() -= n.value * g * n.value;
        break;
      case Op::kSpdLogdet:
        if (wa) {
          const auto llt = checked_llt(A(), "spd_logdet adjoint");
          const auto d = A().rows();
          gA() += g(0, 0) * llt.solve(Mat::Identity(d, d));
        }
        break;
      case Op::kCholeskyLower:
        if (wa) {
          const Mat& L = n.value;
          const Mat M = L.transpose() * g;
          Mat P = M.triangularView<Eigen::Lower>();
          P.diagonal() *= 0.5;
          Mat W = L.transpose()
                      .triangularView<Eigen::Upper>()
                      .solve(P);
          Mat S = L.transpose()
                      .triangularView<Eigen::Upper>()
                      .solve(W.transpose())
                      .transpose();
          gA() += 0.5 * (S + S.transpose());
        }
        break;
      case Op::kRelu:
        if (wa)
          gA() += g.cwiseProduct(
              A().unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
        break;
      case Op::kSoftplus:
        if (wa) gA() += g.cwiseProduct(A().unaryExpr(&detail::sigmoid_scalar));
        break;
      case Op::kExp:
        if (wa) gA() += g.cwiseProduct(n.value);
        break;
      case Op::kLog:
        if (wa) gA() += g.cwiseQuotient(A());
        break;
      case Op::kSum:
        if (wa) gA().array() += g(0, 0);
        break;
      case Op::kDot:
        if (wa) gA() += g(0, 0) * B();
        if (wb) gB() += g(0, 0) * A();
        break;
      case Op::kTrace:
        if (wa) gA().diagonal().array() += g(0, 0);
        break;
      case Op::kDiagEmbed:
        if (wa) gA().col(0) += g.diagonal();
        break;
      case Op::kDiagPart:
        if (wa) gA().diagonal() += g.col(0);
        break;
      case Op::kBroadcastCols:
        if (wa) gA().col(0) += g.rowwise().sum();
        break;
      case Op::kCol:
        if (wa) gA().col(n.iaux) += g.col(0);
        break;
      case Op::kHstack: {
        Eigen::Index c = 0;
        for (int k = 0; k < n.extra_count; ++k) {
          Node& p = nodes_[extra_[n.extra_start + k]];
          if (p.requires_grad)
            p.grad += g.middleCols(c, p.value.cols());
          c += p.value.cols();
        }
        break;
      }
      case Op::kTrilStrictUnpack:
        if (wa) {
          const int d = n.iaux;
          int k = 0;
          for (int j = 0; j < d; ++j)
            for (int i = j + 1; i < d; ++i) gA()(k++, 0) += g(i, j);
        }
        break;
      case Op::kScalarMul:
        if (wa) gA()(0, 0) += g.cwiseProduct(B()).sum();
        if (wb) gB() += A()(0, 0) * g;
        break;
    }
  }
};

}  // namespace svae::ad
