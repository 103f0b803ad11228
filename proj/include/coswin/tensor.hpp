#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "coswin/errors.hpp"
#include "coswin/rng.hpp"

namespace coswin {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename T>
class GradTape;

// Dense row-major tensor. A Tensor is a cheap handle: copies share the
// underlying buffer. Values are immutable once produced by an op; in-place
// mutation (mutable_data) is reserved for parameter updates between steps
// and for test setup.
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensor precision is single or double");

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), nullptr);
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape), nullptr);
    for (auto& v : *t.data_) v = value;
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from_vector(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("from_vector: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    t.binding_ = std::make_shared<TapeBinding>();
    return t;
  }

  static Tensor randn(Rng& rng, Shape shape, double stddev = 1.0) {
    Tensor t(std::move(shape), nullptr);
    for (auto& v : *t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static Tensor trunc_normal(Rng& rng, Shape shape, double stddev) {
    Tensor t(std::move(shape), nullptr);
    for (auto& v : *t.data_) v = static_cast<T>(rng.trunc_normal(stddev));
    return t;
  }

  static Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
    Tensor t(std::move(shape), nullptr);
    for (auto& v : *t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::size_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::span<T> mutable_data() { return {data_->data(), data_->size()}; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item(): tensor has " + std::to_string(numel()) +
                          " elements, expected 1");
    }
    return (*data_)[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) {
      flat = flat * shape_[i] + v;
      ++i;
    }
    return (*data_)[flat];
  }

  bool requires_grad() const { return binding_ && binding_->requires_grad; }

  // Tape the tensor participates in, or nullptr. The binding is shared by
  // every copy of a logical tensor (watching a parameter is visible to
  // closures that captured it earlier) and goes stale safely when the tape
  // dies.
  GradTape<T>* tape() const {
    if (!binding_) return nullptr;
    auto sp = binding_->anchor.lock();
    return sp ? *sp : nullptr;
  }
  int node() const { return tape() ? binding_->node : -1; }

  // Same buffer and shape, no tape binding.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    t.binding_ = std::make_shared<TapeBinding>();
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    t.binding_ = std::make_shared<TapeBinding>();
    return t;
  }

  // Op-author interface.
  void bind(GradTape<T>* tape, int node);
  // Alias sharing the buffer and tape node under a new shape (reshape).
  Tensor aliased_as(Shape shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    t.binding_ = binding_;
    return t;
  }

 private:
  struct TapeBinding {
    std::weak_ptr<GradTape<T>* const> anchor;
    int node = -1;
    bool requires_grad = false;
  };

  Tensor(Shape shape, std::nullptr_t)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_))),
        binding_(std::make_shared<TapeBinding>()) {}

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<TapeBinding> binding_;

  friend class GradTape<T>;
};

// Reverse-mode tape. Ops append nodes in execution order, which is a valid
// topological order; backward() walks it in reverse. One tape is confined
// to one thread; independent tapes are fully independent.
template <typename T>
class GradTape {
 public:
  GradTape() : anchor_(std::make_shared<GradTape* const>(this)) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Registers a leaf whose gradient will be available after backward().
  void watch(Tensor<T>& t) {
    if (!t.defined()) throw ContractError("watch: undefined tensor");
    if (t.tape() == this) return;
    t.binding_->anchor = anchor_;
    t.binding_->node = add_node(t.numel());
    t.binding_->requires_grad = true;
  }

  void backward(const Tensor<T>& loss) {
    if (loss.tape() != this) {
      throw ContractError("backward: loss is not a result recorded on this tape");
    }
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, has shape " +
                          shape_str(loss.shape()));
    }
    if (backward_done_) {
      throw ContractError("backward: already run on this tape");
    }
    backward_done_ = true;
    nodes_[static_cast<std::size_t>(loss.node())].grad.assign(1, T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  bool backward_done() const { return backward_done_; }

  // Gradient for any tensor bound to this tape (leaf or interior).
  // Zeros if the tensor never contributed to the loss.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (t.tape() != this) {
      throw ContractError("grad: tensor is not bound to this tape");
    }
    const auto& g = nodes_[static_cast<std::size_t>(t.node())].grad;
    if (g.empty()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>::from_vector(t.shape(), g);
  }

  std::size_t node_count() const { return nodes_.size(); }

  // --- op-author interface ---

  int add_node(std::size_t numel) {
    nodes_.push_back(Node{nullptr, {}, numel});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int node, std::function<void(GradTape&)> fn) {
    nodes_[static_cast<std::size_t>(node)].backward = std::move(fn);
  }

  // Gradient flowing into `node`; empty if none reached it.
  std::span<const T> grad_of(int node) const {
    const auto& g = nodes_[static_cast<std::size_t>(node)].grad;
    return {g.data(), g.size()};
  }

  // Accumulation buffer for `node`, zero-initialized on first touch.
  std::span<T> grad_acc(int node) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (n.grad.empty()) n.grad.assign(n.numel, T(0));
    return {n.grad.data(), n.grad.size()};
  }

 private:
  struct Node {
    std::function<void(GradTape&)> backward;
    std::vector<T> grad;
    std::size_t numel = 0;
  };

  std::vector<Node> nodes_;
  std::shared_ptr<GradTape* const> anchor_;
  bool backward_done_ = false;

  friend class Tensor<T>;
};

template <typename T>
void Tensor<T>::bind(GradTape<T>* tape, int node) {
  binding_->anchor = tape->anchor_;
  binding_->node = node;
}

// Free-function form of the module contract: loss.backward over its tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  GradTape<T>* tape = loss.tape();
  if (!tape) throw ContractError("backward: loss is not attached to a tape");
  tape->backward(loss);
}

namespace detail {

// Tape shared by a set of op inputs: all bound inputs must agree.
template <typename T>
GradTape<T>* common_tape(std::initializer_list<const Tensor<T>*> ts) {
  GradTape<T>* tape = nullptr;
  for (const auto* t : ts) {
    GradTape<T>* tt = t->tape();
    if (!tt) continue;
    if (tape && tape != tt) {
      throw ContractError("op inputs belong to different tapes");
    }
    tape = tt;
  }
  return tape;
}

template <typename T>
void ensure_finite(std::span<const T> v, const char* op) {
  for (const T x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

}  // namespace detail
}  // namespace coswin
