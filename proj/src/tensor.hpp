#pragma once

#include <functional>
#include <memory>
#include <unordered_map>

#include "common.hpp"

namespace unext {

enum class OpKind : uint8_t {
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  add_scalar,
  add_channel_bias,
  matmul,
  sum,
  mean,
  relu,
  gelu,
  sigmoid,
  conv2d,
  depthwise_conv2d,
  maxpool2,
  bilinear_up2,
  batchnorm2d,
  layernorm,
  shift_channels,
  linear_tokens,
  to_tokens,
  from_tokens,
  bce_with_logits,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::neg: return "neg";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::add_channel_bias: return "add_channel_bias";
    case OpKind::matmul: return "matmul";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::conv2d: return "conv2d";
    case OpKind::depthwise_conv2d: return "depthwise_conv2d";
    case OpKind::maxpool2: return "maxpool2";
    case OpKind::bilinear_up2: return "bilinear_up2";
    case OpKind::batchnorm2d: return "batchnorm2d";
    case OpKind::layernorm: return "layernorm";
    case OpKind::shift_channels: return "shift_channels";
    case OpKind::linear_tokens: return "linear_tokens";
    case OpKind::to_tokens: return "to_tokens";
    case OpKind::from_tokens: return "from_tokens";
    case OpKind::bce_with_logits: return "bce_with_logits";
  }
  return "?";
}

inline uint64_t next_tensor_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // non-empty only while a backward pass is running
  uint64_t id = next_tensor_id();
  bool requires_grad = false;
  bool leaf = true;  // not produced by a recorded operation
};

template <typename T>
void ensure_grad(TensorImpl<T>& t) {
  if (t.grad.empty()) t.grad.assign(static_cast<size_t>(shape_numel(t.shape)), T(0));
}

// Value-semantic handle over a shared dense buffer. Row-major; 4-D feature
// maps are [batch, channels, height, width], 3-D token maps are
// [batch, tokens, embedding].
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<T> values) {
    validate_shape(shape);
    const int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(values.size())) {
      throw ShapeError("tensor length mismatch: shape " + shape_str(shape) + " expects " +
                       std::to_string(n) + " values, got " + std::to_string(values.size()));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor zeros(Shape shape) {
    validate_shape(shape);
    const int64_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)));
  }

  static Tensor full(Shape shape, T value) {
    validate_shape(shape);
    const int64_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(static_cast<size_t>(n), value));
  }

  static Tensor scalar(T value) { return from_data({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  const std::vector<T>& vec() const { return impl_->data; }
  std::vector<T> flatten() const { return impl_->data; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() requires a single-element tensor, shape is " +
                          shape_str(shape()));
    }
    return impl_->data[0];
  }

  // row-major element access, mostly for tests
  T at(std::initializer_list<int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch");
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      off = off * s[d] + i;
      ++d;
    }
    return impl_->data[static_cast<size_t>(off)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  uint64_t id() const { return impl_->id; }

  Tensor clone() const {
    Tensor t = from_data(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  bool shares_buffer(const Tensor& o) const { return impl_ == o.impl_; }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (int64_t e : shape) {
      if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
using GradMap = std::unordered_map<uint64_t, Tensor<T>>;

// Reverse-mode tape. One tape is built eagerly per forward pass and consumed
// by backward(); nodes are appended after their inputs, so reverse insertion
// order is a valid reverse-topological order.
template <typename T>
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::shared_ptr<TensorImpl<T>> out;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::function<void()> pull;  // accumulates out->grad into inputs' grads
  };

  Tape() : prev_(current_ref()) { current_ref() = this; }
  ~Tape() { current_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_ref(); }

  static Tape* exchange_current(Tape* t) {
    Tape* old = current_ref();
    current_ref() = t;
    return old;
  }

  void record(OpKind kind, std::shared_ptr<TensorImpl<T>> out,
              std::vector<std::shared_ptr<TensorImpl<T>>> inputs, std::function<void()> pull) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    out->requires_grad = true;
    out->leaf = false;
    nodes_.push_back(Node{kind, std::move(out), std::move(inputs), std::move(pull)});
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Reverse sweep from a scalar loss. Returns leaf gradients keyed by tensor
  // id; the tape is consumed and every touched grad buffer is released.
  GradMap<T> backward(const Tensor<T>& loss) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    if (loss.numel() != 1) {
      throw ContractError("backward() requires a scalar loss, shape is " +
                          shape_str(loss.shape()));
    }
    if (!loss.requires_grad() || loss.impl()->leaf) {
      throw ContractError("backward() on a graph with gradients disabled");
    }
    loss.impl()->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->out->grad.empty()) it->pull();
    }
    GradMap<T> grads;
    for (auto& node : nodes_) {
      for (auto& in : node.inputs) {
        if (in->leaf && in->requires_grad && !in->grad.empty() && !grads.count(in->id)) {
          grads.emplace(in->id, Tensor<T>::from_data(in->shape, std::move(in->grad)));
          in->grad.clear();
        }
      }
    }
    for (auto& node : nodes_) {
      node.out->grad.clear();
      node.out->grad.shrink_to_fit();
      for (auto& in : node.inputs) {
        in->grad.clear();
        in->grad.shrink_to_fit();
      }
    }
    nodes_.clear();
    consumed_ = true;
    return grads;
  }

 private:
  static Tape*& current_ref() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Suspends tape recording on the current thread (finite differencing, metric
// evaluation inside a training step).
template <typename T>
class NoTape {
 public:
  NoTape() : saved_(Tape<T>::exchange_current(nullptr)) {}
  ~NoTape() { Tape<T>::exchange_current(saved_); }
  NoTape(const NoTape&) = delete;
  NoTape& operator=(const NoTape&) = delete;

 private:
  Tape<T>* saved_;
};

}  // namespace unext
