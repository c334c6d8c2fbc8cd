#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "medvit/error.hpp"

namespace medvit {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  const char* op = "";
  std::vector<Tensor<T>> inputs;
  // Receives d(root)/d(output) and accumulates into the inputs' gradients.
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
};

}  // namespace detail

/// Whether operations currently record a computation graph (thread-local).
bool grad_enabled();

/// Disables graph recording for its lifetime on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor and node of a reverse-mode computation graph.
///
/// A Tensor is a shared handle: copies alias the same values, gradient and
/// graph node. Values are immutable once produced by an operation; only leaf
/// tensors (parameters, inputs) are updated in place through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  const char* op() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  /// Zero-initialised gradient buffer, or nullptr when this tensor does not
  /// take part in differentiation.
  T* grad_buffer() const;

  /// Backpropagates from this scalar. Leaf gradients accumulate (+=);
  /// intermediate gradients are reset at the start of every call.
  void backward() const;

  /// Same values (shared storage), no graph history.
  Tensor detach() const;
  /// Deep copy of the values, no graph history.
  Tensor copy() const;

  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

  /// Builds the result of an operation. The graph node is only recorded when
  /// grad mode is on and some input requires a gradient.
  static Tensor from_op(Shape shape, std::shared_ptr<std::vector<T>> storage,
                        std::vector<Tensor> inputs, const char* op,
                        std::function<void(std::span<const T>)> backward);

  std::shared_ptr<std::vector<T>> storage() const;

 private:
  detail::TensorImpl<T>& impl() const;

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace medvit
