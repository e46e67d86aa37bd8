#pragma once

// The closed op set over BasicTensor: two-operand index contraction,
// broadcasting elementwise ops, axis reductions and softmax. Every op is
// differentiable and records itself on the operands' tape when tracked.
//
// Broadcasting aligns shapes on the right and stretches extent-1 axes.

#include <string_view>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

enum class UnaryOp { Neg, Exp, Log, Square, Logistic, Softplus, Swish };
enum class BinaryOp { Add, Sub, Mul, Div };
enum class ReduceOp { Sum, Max, LogSumExp, Mean };

/// Two-operand contraction. `spec` names one letter per axis, e.g.
/// "bicd,ijdh->bijch". Letters absent from the output are summed; those
/// must have equal extents in both operands. Letters kept in the output may
/// broadcast (extent 1 against n).
template <typename Real>
BasicTensor<Real> contract(const BasicTensor<Real>& a, const BasicTensor<Real>& b, std::string_view spec);

template <typename Real>
BasicTensor<Real> elementwise(UnaryOp op, const BasicTensor<Real>& a);

template <typename Real>
BasicTensor<Real> elementwise(BinaryOp op, const BasicTensor<Real>& a, const BasicTensor<Real>& b);

/// Reduces over `axes` (negative values count from the end). Reduced axes
/// are dropped unless `keepdims`.
template <typename Real>
BasicTensor<Real> reduce(ReduceOp op, const BasicTensor<Real>& a, std::vector<int> axes, bool keepdims = false);

/// exp(a - logsumexp(a)) along `axis`.
template <typename Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& a, int axis);

template <typename Real>
BasicTensor<Real> log_softmax(const BasicTensor<Real>& a, int axis);

/// Differentiable view with the same element order.
template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& a, Shape shape);

/// Broadcast shape of two operands, or ShapeError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Named shorthands.

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return elementwise(BinaryOp::Add, a, b);
}
template <typename Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return elementwise(BinaryOp::Sub, a, b);
}
template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return elementwise(BinaryOp::Mul, a, b);
}
template <typename Real>
BasicTensor<Real> div(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return elementwise(BinaryOp::Div, a, b);
}

template <typename Real>
BasicTensor<Real> neg(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Neg, a); }
template <typename Real>
BasicTensor<Real> exp(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Exp, a); }
template <typename Real>
BasicTensor<Real> log(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Log, a); }
template <typename Real>
BasicTensor<Real> square(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Square, a); }
template <typename Real>
BasicTensor<Real> logistic(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Logistic, a); }
template <typename Real>
BasicTensor<Real> softplus(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Softplus, a); }
template <typename Real>
BasicTensor<Real> swish(const BasicTensor<Real>& a) { return elementwise(UnaryOp::Swish, a); }

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& a, std::vector<int> axes, bool keepdims = false) {
  return reduce(ReduceOp::Sum, a, std::move(axes), keepdims);
}
template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& a, std::vector<int> axes, bool keepdims = false) {
  return reduce(ReduceOp::Mean, a, std::move(axes), keepdims);
}
template <typename Real>
BasicTensor<Real> max(const BasicTensor<Real>& a, std::vector<int> axes, bool keepdims = false) {
  return reduce(ReduceOp::Max, a, std::move(axes), keepdims);
}
template <typename Real>
BasicTensor<Real> logsumexp(const BasicTensor<Real>& a, std::vector<int> axes, bool keepdims = false) {
  return reduce(ReduceOp::LogSumExp, a, std::move(axes), keepdims);
}

// Sum over every axis.
template <typename Real>
BasicTensor<Real> sum_all(const BasicTensor<Real>& a) {
  std::vector<int> axes(a.rank());
  for (std::size_t k = 0; k < axes.size(); ++k) axes[k] = static_cast<int>(k);
  return reduce(ReduceOp::Sum, a, std::move(axes), false);
}

template <typename Real>
BasicTensor<Real> operator+(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return add(a, b); }
template <typename Real>
BasicTensor<Real> operator-(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return sub(a, b); }
template <typename Real>
BasicTensor<Real> operator*(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return mul(a, b); }
template <typename Real>
BasicTensor<Real> operator/(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return div(a, b); }
template <typename Real>
BasicTensor<Real> operator-(const BasicTensor<Real>& a) { return neg(a); }

template <typename Real>
BasicTensor<Real> operator+(const BasicTensor<Real>& a, Real s) { return add(a, BasicTensor<Real>::scalar(s)); }
template <typename Real>
BasicTensor<Real> operator-(const BasicTensor<Real>& a, Real s) { return sub(a, BasicTensor<Real>::scalar(s)); }
template <typename Real>
BasicTensor<Real> operator*(const BasicTensor<Real>& a, Real s) { return mul(a, BasicTensor<Real>::scalar(s)); }
template <typename Real>
BasicTensor<Real> operator*(Real s, const BasicTensor<Real>& a) { return mul(BasicTensor<Real>::scalar(s), a); }
template <typename Real>
BasicTensor<Real> operator-(Real s, const BasicTensor<Real>& a) { return sub(BasicTensor<Real>::scalar(s), a); }

}  // namespace capsroute
