#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "medvit/tensor.hpp"

// Differentiable tensor primitives. Binary elementwise operations broadcast
// with right-aligned (numpy) rules; every shape error names the offending
// dimensions.
namespace medvit {

Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> neg(const Tensor<T>& a);

template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);

/// (M,K)x(K,N), or batched (...,M,K)x(...,K,N) with identical leading dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Metadata-only: the result shares storage with the input.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1);
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);
/// Gathers entries along `axis` (rows for axis 0); repeated indices are allowed.
template <typename T>
Tensor<T> index_select(const Tensor<T>& a, std::size_t axis, std::span<const std::size_t> indices);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdim);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdim);
/// Biased (divide by n) variance along `axis`.
template <typename T>
Tensor<T> variance(const Tensor<T>& a, std::size_t axis, bool keepdim);

/// Counts multiply-accumulates issued by matmul/conv2d/linear on this thread
/// while alive. Used to cross-check the analytic FLOP audit.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t total() const { return total_; }
  static void record(std::uint64_t macs);

 private:
  std::uint64_t total_ = 0;
  MacCounter* previous_;
};

namespace debug {
/// Test hook: when set, relu's backward returns the negated gradient.
void set_relu_grad_fault(bool enabled);
bool relu_grad_fault();
}  // namespace debug

}  // namespace medvit
