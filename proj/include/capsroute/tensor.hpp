#pragma once

// Dense row-major tensors and the tape that records their computation graph
// for reverse-mode differentiation.
//
// Tensor values are immutable once constructed and share their storage, so
// copies are cheap and safe to read from several threads. A tensor produced
// from at least one tracked operand is itself tracked: it refers to a node
// on the operands' tape. A tracked tensor must not outlive its tape.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "capsroute/errors.hpp"

namespace capsroute {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "," : "") << shape[k];
  os << ')';
  return os.str();
}

// Row-major strides in elements.
inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t k = shape.size(); k-- > 1;) strides[k - 1] = strides[k] * shape[k];
  return strides;
}

template <typename Real>
class BasicTape;

template <typename Real>
class BasicTensor {
 public:
  using value_type = Real;
  static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

  // Scalar zero.
  BasicTensor() : BasicTensor(Shape{}, std::vector<Real>{Real(0)}) {}

  BasicTensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)), data_(std::make_shared<const std::vector<Real>>(std::move(values))) {
    if (shape_numel(shape_) != data_->size()) {
      throw ShapeError("tensor of shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(data_->size()));
    }
  }

  static BasicTensor full(Shape shape, Real value) {
    auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<Real>(n, value));
  }
  static BasicTensor zeros(Shape shape) { return full(std::move(shape), Real(0)); }
  static BasicTensor scalar(Real value) { return BasicTensor(Shape{}, std::vector<Real>{value}); }
  static BasicTensor vector(std::initializer_list<Real> values) {
    return BasicTensor(Shape{values.size()}, std::vector<Real>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
  }

  std::span<const Real> values() const noexcept { return {data_->data(), data_->size()}; }
  const Real* data() const noexcept { return data_->data(); }
  const std::vector<Real>& storage() const noexcept { return *data_; }

  Real item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  Real at(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(index.size()) + " for shape " + shape_str(shape_));
    }
    std::size_t offset = 0;
    std::size_t axis = 0;
    for (auto ix : index) {
      if (ix >= shape_[axis]) throw ShapeError("index out of range on axis " + std::to_string(axis));
      offset = offset * shape_[axis] + ix;
      ++axis;
    }
    return (*data_)[offset];
  }

  bool tracked() const noexcept { return tape_ != nullptr; }
  BasicTape<Real>* tape() const noexcept { return tape_; }
  std::size_t node() const noexcept { return node_; }

  // Same values, no graph connection.
  BasicTensor detach() const {
    BasicTensor out = *this;
    out.tape_ = nullptr;
    out.node_ = kNoNode;
    return out;
  }

  // Shares storage when the shape is the same size; no graph connection.
  BasicTensor with_shape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    BasicTensor out = detach();
    out.shape_ = std::move(shape);
    return out;
  }

  template <typename To>
  BasicTensor<To> cast() const {
    return BasicTensor<To>(shape_, std::vector<To>(data_->begin(), data_->end()));
  }

  bool same_storage(const BasicTensor& other) const noexcept { return data_ == other.data_; }

 private:
  friend class BasicTape<Real>;

  Shape shape_;
  std::shared_ptr<const std::vector<Real>> data_;
  BasicTape<Real>* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

template <typename Real>
class Gradients;

// Append-only record of tracked operations. Single-threaded; independent
// tapes may run on separate threads.
template <typename Real>
class BasicTape {
 public:
  using Tensor = BasicTensor<Real>;
  // grad_out has the result's size; input_grads[k] points at a zeroed
  // buffer of input k's size, or is null when input k is untracked.
  using BackwardFn = std::function<void(std::span<const Real> grad_out, std::span<Real* const> input_grads)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  // Registers a leaf whose gradient will be reported by backward().
  Tensor watch(const Tensor& value) {
    Tensor out = value.detach();
    out.tape_ = this;
    out.node_ = nodes_.size();
    nodes_.push_back(Node{value.shape(), {}, nullptr});
    return out;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Builds an op result. If any input is tracked the result is appended to
  // that tape with `backward`; otherwise it is a plain value.
  static Tensor record(Shape shape, std::vector<Real> values, std::initializer_list<const Tensor*> inputs,
                       BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    BasicTape* tape = nullptr;
    for (const Tensor* in : inputs) {
      if (!in->tracked()) continue;
      if (tape && tape != in->tape_) throw ContractError("operands are tracked on different tapes");
      tape = in->tape_;
    }
    if (!tape) return out;
    Node node{out.shape(), {}, std::move(backward)};
    node.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) node.inputs.push_back(in->tracked() ? in->node_ : Tensor::kNoNode);
    out.tape_ = tape;
    out.node_ = tape->nodes_.size();
    tape->nodes_.push_back(std::move(node));
    return out;
  }

  Gradients<Real> backward(const Tensor& loss) const;

 private:
  friend class Gradients<Real>;

  struct Node {
    Shape shape;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

// Gradients of a scalar loss with respect to every tracked ancestor.
template <typename Real>
class Gradients {
 public:
  using Tensor = BasicTensor<Real>;

  std::optional<Tensor> find(const Tensor& t) const {
    if (t.tape() != tape_ || t.node() >= grads_.size() || grads_[t.node()].empty()) return std::nullopt;
    return Tensor(tape_->nodes_[t.node()].shape, grads_[t.node()]);
  }

  bool contains(const Tensor& t) const { return find(t).has_value(); }

  Tensor at(const Tensor& t) const {
    auto g = find(t);
    if (!g) throw ContractError("no gradient recorded for this tensor");
    return *g;
  }

  // Zeros when the tensor does not influence the loss.
  Tensor or_zeros(const Tensor& t) const {
    auto g = find(t);
    return g ? *g : Tensor::zeros(t.shape());
  }

 private:
  friend class BasicTape<Real>;
  const BasicTape<Real>* tape_ = nullptr;
  std::vector<std::vector<Real>> grads_;
};

template <typename Real>
Gradients<Real> BasicTape<Real>::backward(const Tensor& loss) const {
  if (loss.tape() != this) throw ContractError("loss is not recorded on this tape");
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));

  Gradients<Real> out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  out.grads_[loss.node()] = {Real(1)};

  std::vector<Real*> input_ptrs;
  for (std::size_t n = loss.node() + 1; n-- > 0;) {
    const Node& node = nodes_[n];
    if (out.grads_[n].empty() || !node.backward) continue;
    input_ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto in = node.inputs[k];
      if (in == Tensor::kNoNode) continue;
      auto& g = out.grads_[in];
      if (g.empty()) g.assign(shape_numel(nodes_[in].shape), Real(0));
      input_ptrs[k] = g.data();
    }
    // Fan-in to the same node twice (x * x) shares one buffer; ops add, so
    // contributions still sum.
    node.backward(out.grads_[n], input_ptrs);
  }
  return out;
}

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;
using Tape = BasicTape<double>;
using TapeF = BasicTape<float>;

}  // namespace capsroute
