#include "capsroute/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace capsroute {

namespace {

using Strides = std::vector<std::size_t>;

// Visits every multi-index of `extents` and calls f with the flat offsets
// of three operands laid out by their own strides (0 on broadcast axes).
template <class F>
void strided_loop(const Shape& extents, const Strides& s0, const Strides& s1, const Strides& s2, F&& f) {
  const std::size_t rank = extents.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  for (auto e : extents) {
    if (e == 0) return;
  }
  std::vector<std::size_t> index(rank, 0);
  std::size_t o0 = 0, o1 = 0, o2 = 0;
  const std::size_t inner = extents[rank - 1];
  const std::size_t d0 = s0[rank - 1], d1 = s1[rank - 1], d2 = s2[rank - 1];
  for (;;) {
    std::size_t a = o0, b = o1, c = o2;
    for (std::size_t k = 0; k < inner; ++k, a += d0, b += d1, c += d2) f(a, b, c);
    std::size_t axis = rank - 1;
    for (;;) {
      if (axis == 0) return;
      --axis;
      ++index[axis];
      o0 += s0[axis];
      o1 += s1[axis];
      o2 += s2[axis];
      if (index[axis] < extents[axis]) break;
      o0 -= s0[axis] * extents[axis];
      o1 -= s1[axis] * extents[axis];
      o2 -= s2[axis] * extents[axis];
      index[axis] = 0;
    }
  }
}

// Strides of `shape` right-aligned against `out`, 0 where it broadcasts.
Strides broadcast_strides(const Shape& shape, const Shape& out) {
  Strides natural = row_major_strides(shape);
  Strides strides(out.size(), 0);
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t k = 0; k < shape.size(); ++k) {
    strides[offset + k] = (shape[k] == 1 && out[offset + k] != 1) ? 0 : natural[k];
  }
  return strides;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

template <typename Real>
Real stable_logistic(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
Real stable_softplus(Real x) {
  return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x)));
}

struct ContractPlan {
  Shape label_extents;  // output labels first, then summed labels
  Strides a, b, out;
  Shape out_shape;
};

ContractPlan plan_contract(const Shape& sa, const Shape& sb, std::string_view spec) {
  const auto comma = spec.find(',');
  const auto arrow = spec.find("->");
  if (comma == std::string_view::npos || arrow == std::string_view::npos || comma > arrow) {
    throw ShapeError("contraction spec must look like \"ab,bc->ac\", got \"" + std::string(spec) + "\"");
  }
  const std::string la(spec.substr(0, comma));
  const std::string lb(spec.substr(comma + 1, arrow - comma - 1));
  const std::string lo(spec.substr(arrow + 2));
  if (la.size() != sa.size() || lb.size() != sb.size()) {
    throw ShapeError("contraction spec \"" + std::string(spec) + "\" does not match operand ranks " +
                     shape_str(sa) + ", " + shape_str(sb));
  }
  auto check_unique = [&](const std::string& labels) {
    for (std::size_t k = 0; k < labels.size(); ++k) {
      if (labels.find(labels[k], k + 1) != std::string::npos) {
        throw ShapeError(std::string("index '") + labels[k] + "' repeated within one term of \"" +
                         std::string(spec) + "\"");
      }
    }
  };
  check_unique(la);
  check_unique(lb);
  check_unique(lo);

  std::string order = lo;
  for (char c : la + lb) {
    if (order.find(c) == std::string::npos) order.push_back(c);
  }
  for (char c : lo) {
    if (la.find(c) == std::string::npos && lb.find(c) == std::string::npos) {
      throw ShapeError(std::string("output index '") + c + "' appears in neither operand");
    }
  }

  ContractPlan plan;
  const Strides na = row_major_strides(sa);
  const Strides nb = row_major_strides(sb);
  for (char c : order) {
    const auto pa = la.find(c);
    const auto pb = lb.find(c);
    const bool summed = lo.find(c) == std::string::npos;
    const std::size_t ea = pa == std::string::npos ? 1 : sa[pa];
    const std::size_t eb = pb == std::string::npos ? 1 : sb[pb];
    std::size_t extent = std::max(ea, eb);
    if (pa != std::string::npos && pb != std::string::npos && ea != eb) {
      if (summed || (ea != 1 && eb != 1)) {
        throw ShapeError(std::string("extent mismatch on index '") + c + "': " + std::to_string(ea) + " vs " +
                         std::to_string(eb));
      }
    }
    plan.label_extents.push_back(extent);
    plan.a.push_back(pa == std::string::npos || (ea == 1 && extent != 1) ? 0 : na[pa]);
    plan.b.push_back(pb == std::string::npos || (eb == 1 && extent != 1) ? 0 : nb[pb]);
    if (!summed) plan.out_shape.push_back(extent);
  }
  const Strides no = row_major_strides(plan.out_shape);
  for (std::size_t k = 0; k < order.size(); ++k) plan.out.push_back(k < lo.size() ? no[k] : 0);
  return plan;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t ea = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const std::size_t eb = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[k] = ea == 1 ? eb : ea;
  }
  return out;
}

template <typename Real>
BasicTensor<Real> contract(const BasicTensor<Real>& a, const BasicTensor<Real>& b, std::string_view spec) {
  auto plan = std::make_shared<ContractPlan>(plan_contract(a.shape(), b.shape(), spec));
  std::vector<Real> out(shape_numel(plan->out_shape), Real(0));
  const Real* pa = a.data();
  const Real* pb = b.data();
  strided_loop(plan->label_extents, plan->a, plan->b, plan->out,
               [&](std::size_t ia, std::size_t ib, std::size_t io) { out[io] += pa[ia] * pb[ib]; });

  using Tape = BasicTape<Real>;
  return Tape::record(plan->out_shape, std::move(out), {&a, &b},
                      [plan, a = a.detach(), b = b.detach()](std::span<const Real> g, std::span<Real* const> grads) {
                        const Real* pa = a.data();
                        const Real* pb = b.data();
                        const Real* pg = g.data();
                        if (Real* ga = grads[0]) {
                          strided_loop(plan->label_extents, plan->a, plan->b, plan->out,
                                       [&](std::size_t ia, std::size_t ib, std::size_t io) {
                                         ga[ia] += pg[io] * pb[ib];
                                       });
                        }
                        if (Real* gb = grads[1]) {
                          strided_loop(plan->label_extents, plan->a, plan->b, plan->out,
                                       [&](std::size_t ia, std::size_t ib, std::size_t io) {
                                         gb[ib] += pg[io] * pa[ia];
                                       });
                        }
                      });
}

template <typename Real>
BasicTensor<Real> elementwise(UnaryOp op, const BasicTensor<Real>& a) {
  const std::size_t n = a.numel();
  const Real* x = a.data();
  std::vector<Real> y(n);
  switch (op) {
    case UnaryOp::Neg:
      for (std::size_t k = 0; k < n; ++k) y[k] = -x[k];
      break;
    case UnaryOp::Exp:
      for (std::size_t k = 0; k < n; ++k) y[k] = std::exp(x[k]);
      break;
    case UnaryOp::Log:
      for (std::size_t k = 0; k < n; ++k) {
        if (!(x[k] > 0)) throw DomainError("log of non-positive value " + std::to_string(x[k]));
        y[k] = std::log(x[k]);
      }
      break;
    case UnaryOp::Square:
      for (std::size_t k = 0; k < n; ++k) y[k] = x[k] * x[k];
      break;
    case UnaryOp::Logistic:
      for (std::size_t k = 0; k < n; ++k) y[k] = stable_logistic(x[k]);
      break;
    case UnaryOp::Softplus:
      for (std::size_t k = 0; k < n; ++k) y[k] = stable_softplus(x[k]);
      break;
    case UnaryOp::Swish:
      for (std::size_t k = 0; k < n; ++k) y[k] = x[k] * stable_logistic(x[k]);
      break;
  }

  using Tape = BasicTape<Real>;
  if (!a.tracked()) return BasicTensor<Real>(a.shape(), std::move(y));
  auto result = std::make_shared<std::vector<Real>>(y);
  return Tape::record(a.shape(), std::move(y), {&a},
                      [op, a = a.detach(), result](std::span<const Real> g, std::span<Real* const> grads) {
                        Real* ga = grads[0];
                        const Real* x = a.data();
                        const Real* y = result->data();
                        const std::size_t n = g.size();
                        switch (op) {
                          case UnaryOp::Neg:
                            for (std::size_t k = 0; k < n; ++k) ga[k] -= g[k];
                            break;
                          case UnaryOp::Exp:
                            for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * y[k];
                            break;
                          case UnaryOp::Log:
                            for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] / x[k];
                            break;
                          case UnaryOp::Square:
                            for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * Real(2) * x[k];
                            break;
                          case UnaryOp::Logistic:
                            for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * y[k] * (Real(1) - y[k]);
                            break;
                          case UnaryOp::Softplus:
                            for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * stable_logistic(x[k]);
                            break;
                          case UnaryOp::Swish:
                            for (std::size_t k = 0; k < n; ++k) {
                              const Real s = stable_logistic(x[k]);
                              ga[k] += g[k] * (s + x[k] * s * (Real(1) - s));
                            }
                            break;
                        }
                      });
}

template <typename Real>
BasicTensor<Real> elementwise(BinaryOp op, const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const Strides sa = broadcast_strides(a.shape(), out_shape);
  const Strides sb = broadcast_strides(b.shape(), out_shape);
  const Strides so = row_major_strides(out_shape);
  const Real* pa = a.data();
  const Real* pb = b.data();
  std::vector<Real> y(shape_numel(out_shape));

  switch (op) {
    case BinaryOp::Add:
      strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) { y[io] = pa[ia] + pb[ib]; });
      break;
    case BinaryOp::Sub:
      strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) { y[io] = pa[ia] - pb[ib]; });
      break;
    case BinaryOp::Mul:
      strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) { y[io] = pa[ia] * pb[ib]; });
      break;
    case BinaryOp::Div:
      for (std::size_t k = 0; k < b.numel(); ++k) {
        if (pb[k] == Real(0)) throw DomainError("division by zero");
      }
      strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) { y[io] = pa[ia] / pb[ib]; });
      break;
  }

  using Tape = BasicTape<Real>;
  if (!a.tracked() && !b.tracked()) return BasicTensor<Real>(out_shape, std::move(y));
  return Tape::record(
      out_shape, std::move(y), {&a, &b},
      [op, out_shape, sa, sb, so, a = a.detach(), b = b.detach()](std::span<const Real> g,
                                                                std::span<Real* const> grads) {
        Real* ga = grads[0];
        Real* gb = grads[1];
        const Real* pa = a.data();
        const Real* pb = b.data();
        const Real* pg = g.data();
        switch (op) {
          case BinaryOp::Add:
            strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) {
              if (ga) ga[ia] += pg[io];
              if (gb) gb[ib] += pg[io];
            });
            break;
          case BinaryOp::Sub:
            strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) {
              if (ga) ga[ia] += pg[io];
              if (gb) gb[ib] -= pg[io];
            });
            break;
          case BinaryOp::Mul:
            strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) {
              if (ga) ga[ia] += pg[io] * pb[ib];
              if (gb) gb[ib] += pg[io] * pa[ia];
            });
            break;
          case BinaryOp::Div:
            strided_loop(out_shape, sa, sb, so, [&](std::size_t ia, std::size_t ib, std::size_t io) {
              if (ga) ga[ia] += pg[io] / pb[ib];
              if (gb) gb[ib] -= pg[io] * pa[ia] / (pb[ib] * pb[ib]);
            });
            break;
        }
      });
}

template <typename Real>
BasicTensor<Real> reduce(ReduceOp op, const BasicTensor<Real>& a, std::vector<int> axes, bool keepdims) {
  const Shape& in_shape = a.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (int axis : axes) reduced[normalize_axis(axis, in_shape.size())] = true;

  Shape kept_shape = in_shape;
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t k = 0; k < in_shape.size(); ++k) {
    if (reduced[k]) {
      kept_shape[k] = 1;
      count *= in_shape[k];
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(in_shape[k]);
    }
  }
  if (count == 0 && (op == ReduceOp::Max || op == ReduceOp::LogSumExp || op == ReduceOp::Mean)) {
    throw ShapeError("reduction over an empty axis");
  }

  const Strides si = row_major_strides(in_shape);
  Strides so = row_major_strides(kept_shape);
  for (std::size_t k = 0; k < so.size(); ++k) {
    if (reduced[k]) so[k] = 0;
  }
  const Strides unused(in_shape.size(), 0);
  const std::size_t n_out = shape_numel(kept_shape);
  const Real* x = a.data();

  std::vector<Real> y(n_out, Real(0));
  std::vector<std::size_t> argmax;
  switch (op) {
    case ReduceOp::Sum:
    case ReduceOp::Mean:
      strided_loop(in_shape, si, so, unused, [&](std::size_t ii, std::size_t io, std::size_t) { y[io] += x[ii]; });
      if (op == ReduceOp::Mean) {
        for (auto& v : y) v /= static_cast<Real>(count);
      }
      break;
    case ReduceOp::Max:
    case ReduceOp::LogSumExp: {
      std::fill(y.begin(), y.end(), -std::numeric_limits<Real>::infinity());
      argmax.assign(n_out, 0);
      strided_loop(in_shape, si, so, unused, [&](std::size_t ii, std::size_t io, std::size_t) {
        if (x[ii] > y[io]) {
          y[io] = x[ii];
          argmax[io] = ii;
        }
      });
      if (op == ReduceOp::LogSumExp) {
        std::vector<Real> acc(n_out, Real(0));
        strided_loop(in_shape, si, so, unused,
                     [&](std::size_t ii, std::size_t io, std::size_t) { acc[io] += std::exp(x[ii] - y[io]); });
        for (std::size_t k = 0; k < n_out; ++k) y[k] += std::log(acc[k]);
      }
      break;
    }
  }

  using Tape = BasicTape<Real>;
  if (!a.tracked()) return BasicTensor<Real>(out_shape, std::move(y));
  auto result = std::make_shared<std::vector<Real>>(y);
  auto arg = std::make_shared<std::vector<std::size_t>>(std::move(argmax));
  return Tape::record(out_shape, std::move(y), {&a},
                      [op, in_shape, si, so, count, a = a.detach(), result, arg](std::span<const Real> g,
                                                                             std::span<Real* const> grads) {
                        Real* ga = grads[0];
                        const Real* x = a.data();
                        const Real* y = result->data();
                        const Strides unused(in_shape.size(), 0);
                        switch (op) {
                          case ReduceOp::Sum:
                            strided_loop(in_shape, si, so, unused,
                                         [&](std::size_t ii, std::size_t io, std::size_t) { ga[ii] += g[io]; });
                            break;
                          case ReduceOp::Mean: {
                            const Real scale = Real(1) / static_cast<Real>(count);
                            strided_loop(in_shape, si, so, unused, [&](std::size_t ii, std::size_t io, std::size_t) {
                              ga[ii] += g[io] * scale;
                            });
                            break;
                          }
                          case ReduceOp::Max:
                            for (std::size_t k = 0; k < g.size(); ++k) ga[(*arg)[k]] += g[k];
                            break;
                          case ReduceOp::LogSumExp:
                            strided_loop(in_shape, si, so, unused, [&](std::size_t ii, std::size_t io, std::size_t) {
                              ga[ii] += g[io] * std::exp(x[ii] - y[io]);
                            });
                            break;
                        }
                      });
}

template <typename Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& a, int axis) {
  return exp(log_softmax(a, axis));
}

template <typename Real>
BasicTensor<Real> log_softmax(const BasicTensor<Real>& a, int axis) {
  return a - logsumexp(a, {axis}, true);
}

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  if (!a.tracked()) return a.with_shape(std::move(shape));
  return BasicTape<Real>::record(std::move(shape), a.storage(), {&a},
                                 [](std::span<const Real> g, std::span<Real* const> grads) {
                                   Real* ga = grads[0];
                                   for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
                                 });
}

#define CAPSROUTE_INSTANTIATE_OPS(Real)                                                                      \
  template BasicTensor<Real> contract(const BasicTensor<Real>&, const BasicTensor<Real>&, std::string_view); \
  template BasicTensor<Real> elementwise(UnaryOp, const BasicTensor<Real>&);                                 \
  template BasicTensor<Real> elementwise(BinaryOp, const BasicTensor<Real>&, const BasicTensor<Real>&);      \
  template BasicTensor<Real> reduce(ReduceOp, const BasicTensor<Real>&, std::vector<int>, bool);             \
  template BasicTensor<Real> softmax(const BasicTensor<Real>&, int);                                         \
  template BasicTensor<Real> log_softmax(const BasicTensor<Real>&, int);                                     \
  template BasicTensor<Real> reshape(const BasicTensor<Real>&, Shape);

CAPSROUTE_INSTANTIATE_OPS(double)
CAPSROUTE_INSTANTIATE_OPS(float)

#undef CAPSROUTE_INSTANTIATE_OPS

}  // namespace capsroute
