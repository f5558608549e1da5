#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ipl/errors.hpp"

namespace ipl::nn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);

template <class S>
class Tape;

// Dense row-major tensor. Copies share storage (cheap handles); the tape
// handle points at the node that produced this value, when tracked.
template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() : data_(std::make_shared<std::vector<S>>()) {}

  explicit TensorT(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(static_cast<std::size_t>(shape_numel(shape_)), S(0))) {}

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, S value) {
    TensorT t(std::move(shape));
    for (auto& x : *t.data_) x = value;
    return t;
  }

  static TensorT from_vector(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != static_cast<Index>(values.size()))
      throw ShapeMismatch("from_vector: data length does not match shape");
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<S>>(std::move(values));
    return t;
  }

  static TensorT scalar(S value) { return from_vector({1}, {value}); }

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index numel() const { return static_cast<Index>(data_->size()); }
  bool is_matrix() const { return shape_.size() == 2; }
  bool is_scalar() const { return numel() == 1; }

  Index rows() const {
    if (!is_matrix()) throw ShapeMismatch("rows: tensor is not 2-d");
    return shape_[0];
  }
  Index cols() const {
    if (!is_matrix()) throw ShapeMismatch("cols: tensor is not 2-d");
    return shape_[1];
  }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }
  std::vector<S>& vec() { return *data_; }
  const std::vector<S>& vec() const { return *data_; }
  std::shared_ptr<std::vector<S>> storage() const { return data_; }

  S& operator[](Index i) { return (*data_)[static_cast<std::size_t>(i)]; }
  S operator[](Index i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  S& operator()(Index r, Index c) { return (*data_)[static_cast<std::size_t>(r * cols() + c)]; }
  S operator()(Index r, Index c) const { return (*data_)[static_cast<std::size_t>(r * cols() + c)]; }

  S scalar_value() const {
    if (!is_scalar()) throw NotScalar("scalar_value: tensor has more than one element");
    return (*data_)[0];
  }

  // Deep copy of the value (drops any tape association).
  TensorT clone() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<S>>(*data_);
    return t;
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape<S>;

  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Nodes are appended in program order, which is a valid
// topological order of the DAG; backward walks it in reverse and accumulates
// gradients with += in fixed index order.
template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<S>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf sharing the tensor's storage. Leaf gradients are
  // allocated eagerly so grad() is always well-defined for them.
  TensorT<S> watch(const TensorT<S>& t) {
    const int id = add_node(t.numel(), {}, nullptr);
    nodes_[static_cast<std::size_t>(id)].grad.assign(static_cast<std::size_t>(t.numel()), S(0));
    return attach(t, id);
  }

  int add_node(Index numel, std::vector<int> parents, BackwardFn back) {
    nodes_.push_back(NodeRec{numel, std::move(parents), std::move(back), {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  TensorT<S> attach(const TensorT<S>& value, int node_id) const {
    TensorT<S> t = value;
    t.tape_ = const_cast<Tape<S>*>(this);
    t.node_ = node_id;
    return t;
  }

  std::vector<S>& grad_buffer(int node_id) {
    NodeRec& n = nodes_[static_cast<std::size_t>(node_id)];
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.numel), S(0));
    return n.grad;
  }

  bool grad_live(int node_id) const { return !nodes_[static_cast<std::size_t>(node_id)].grad.empty(); }

  void backward(const TensorT<S>& loss) {
    if (!loss.tracked() || loss.tape() != this)
      throw TapeMismatch("backward: loss is not tracked on this tape");
    if (!loss.is_scalar()) throw NotScalar("backward: loss must be a scalar");
    if (consumed_) throw AlreadyConsumed("backward: tape already consumed; call reset()");
    consumed_ = true;
    grad_buffer(loss.node())[0] = S(1);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      NodeRec& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty() || !n.back) continue;
      n.back(*this, n.grad);
    }
  }

  // Gradient of a tracked tensor after backward(); zeros if the tensor did
  // not influence the loss.
  const std::vector<S>& grad(const TensorT<S>& t) {
    if (!t.tracked() || t.tape() != this)
      throw TapeMismatch("grad: tensor is not tracked on this tape");
    return grad_buffer(t.node());
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct NodeRec {
    Index numel;
    std::vector<int> parents;
    BackwardFn back;
    std::vector<S> grad;
  };

  std::vector<NodeRec> nodes_;
  bool consumed_ = false;
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;
using Tape64 = Tape<double>;
using Tape32 = Tape<float>;

}  // namespace ipl::nn
