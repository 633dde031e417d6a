#pragma once

// Dense differentiable arrays recorded on a define-by-run gradient tape.
//
// A Tensor is a cheap handle onto a Node holding shape, values and (after
// backward) a gradient buffer. Operations executed while a Tape is active on
// the current thread, and having at least one input that requires a gradient,
// append their output node to that tape. Tape::backward walks the record in
// reverse, so the record order is always a valid topological order.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "pcsc/errors.hpp"

namespace pcsc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Worker count used by the data-parallel kernels (matmul rows). Each worker
// writes a disjoint output range, so results do not depend on the count.
inline std::size_t& kernel_threads() {
  static std::size_t n = 1;
  return n;
}

template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn) {
  const std::size_t n = end > begin ? end - begin : 0;
  const std::size_t workers = std::min(kernel_threads(), n);
  if (workers <= 1 || n < 64) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = begin + w * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
}

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grad buffers.
  std::function<void(Node&)> backward_fn;

  std::vector<Real>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : node_(std::make_shared<Node<Real>>()) {
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<Node<Real>>()) {
    if (values.size() != numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  static Tensor from_node(std::shared_ptr<Node<Real>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("axis out of range for shape " + to_string(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
  }

  std::span<const Real> data() const { return node_->data; }
  // Direct mutation is for parameters and tests; never mutate a node that a
  // live tape still references.
  std::span<Real> mutable_data() { return node_->data; }
  const std::vector<Real>& values() const { return node_->data; }

  Real item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  // Gradient buffer; zero-filled when nothing has been accumulated yet.
  std::span<const Real> grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

  // Fresh leaf holding a copy of the values, outside any tape.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  Node<Real>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<Real>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<Real>> node_;
};

template <class Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Makes a tape the recording target of the calling thread for its lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(current()) { current() = &tape; }
    ~Scope() { current() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

  void record(std::shared_ptr<Node<Real>> node) {
    if (consumed_) throw std::logic_error("tape already consumed by backward; clear() it before recording");
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  const std::vector<std::shared_ptr<Node<Real>>>& nodes() const noexcept { return nodes_; }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

  void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1) throw DimensionError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    if (consumed_) throw std::logic_error("second backward on the same tape; re-run the forward pass first");
    if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
    loss.node()->grad_buffer()[0] += Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<Real>& n = **it;
      if (n.backward_fn && n.grad.size() == n.data.size()) n.backward_fn(n);
    }
    consumed_ = true;
  }

 private:
  std::vector<std::shared_ptr<Node<Real>>> nodes_;
  bool consumed_ = false;
};

// Backward through the thread's active tape.
template <class Real>
void backward(const Tensor<Real>& loss) {
  Tape<Real>* tape = Tape<Real>::current();
  if (!tape) throw std::logic_error("backward without an active tape");
  tape->backward(loss);
}

namespace detail {

template <class Real>
std::vector<Real>* grad_of(Node<Real>& n) {
  return n.requires_grad ? &n.grad_buffer() : nullptr;
}

// Builds an op output and, when a tape is active and any input needs a
// gradient, attaches the backward closure and records the node.
template <class Real, class Backward>
Tensor<Real> make_op(const char* name, Shape shape, std::vector<Real> data,
                     std::initializer_list<const Tensor<Real>*> inputs, Backward&& bw) {
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape<Real>* tape = Tape<Real>::current();
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<Real>* t) { return t->requires_grad(); });
  if (tape && any) {
    node->requires_grad = true;
    node->op = name;
    for (const Tensor<Real>* t : inputs) node->parents.push_back(t->node_ptr());
    node->backward_fn = std::forward<Backward>(bw);
    tape->record(node);
  }
  return Tensor<Real>::from_node(std::move(node));
}

template <class Real, class Backward>
Tensor<Real> make_op_n(const char* name, Shape shape, std::vector<Real> data,
                       const std::vector<Tensor<Real>>& inputs, Backward&& bw) {
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape<Real>* tape = Tape<Real>::current();
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<Real>& t) { return t.requires_grad(); });
  if (tape && any) {
    node->requires_grad = true;
    node->op = name;
    for (const Tensor<Real>& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::forward<Backward>(bw);
    tape->record(node);
  }
  return Tensor<Real>::from_node(std::move(node));
}

}  // namespace detail
}  // namespace pcsc
