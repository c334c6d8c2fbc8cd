#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "medvit/tensor.hpp"

namespace medvit {

using Rng = std::mt19937_64;

namespace nn {

struct Conv2dOptions {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  bool bias = true;

  void validate() const;
  bool depthwise() const { return groups == in_channels && out_channels == in_channels; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && groups == 1; }
  std::size_t weight_count() const { return out_channels * (in_channels / groups) * kernel_h * kernel_w; }
  std::size_t parameter_count() const { return weight_count() + (bias ? out_channels : 0); }
};

/// Weight (out, in/groups, kh, kw) plus optional bias (out).
template <typename T>
struct Conv2dParams {
  Conv2dOptions options;
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when options.bias is false

  /// Kaiming-uniform (fan-in) weights, zero bias.
  static Conv2dParams init(const Conv2dOptions& options, Rng& rng);
};

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  bool training = true;

  /// gamma = 1, beta = 0, running mean 0 and variance 1.
  static BatchNormState init(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // (in, out)
  Tensor<T> bias;    // (out)

  static LinearParams init(std::size_t in_features, std::size_t out_features, Rng& rng);
};

/// Zero-padded cross-correlation over NCHW input.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                 std::size_t padding, std::size_t groups);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& params);

/// Normalises per channel (axis 1) over all other axes. Train mode uses biased
/// batch statistics and updates the running ones (unbiased variance) in place.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& state);

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window, std::size_t stride);

/// (N, C, H, W) -> (N, C)
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// x (N, D) times weight (D, K) plus bias (K).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& params);

template <typename T>
void kaiming_uniform(Tensor<T>& weight, std::size_t fan_in, Rng& rng);

/// Output extent of a strided window; throws ShapeError when it would be < 1.
std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

}  // namespace nn
}  // namespace medvit
