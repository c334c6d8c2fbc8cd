#pragma once

#include <cstddef>
#include <vector>

#include "medvit/losses.hpp"
#include "medvit/nn.hpp"
#include "medvit/tensor.hpp"

namespace medvit {

/// Per-token moments across channels.
template <typename T>
struct MomentTriple {
  Tensor<T> mu;      // (N, 1, h, w)
  Tensor<T> sigma;   // (N, 1, h, w), sqrt(var + eps)
  Tensor<T> z_norm;  // (N, C, h, w)
};

struct PmcConfig {
  bool enabled = false;
  double lambda = 0.5;
  std::size_t stage = 1;
  double probability = 0.5;
  double eps = 1e-5;

  void validate() const;
};

template <typename T>
MomentTriple<T> extract_moments(const Tensor<T>& z, T eps);

/// sigma_B * z_norm_A + mu_B
template <typename T>
Tensor<T> mix_features(const MomentTriple<T>& a, const MomentTriple<T>& b);

/// lambda * loss(logits, y_a) + (1 - lambda) * loss(logits, y_b)
template <typename T>
Tensor<T> mixed_loss(const Tensor<T>& logits, const Labels& y_a, const Labels& y_b, T lambda);

template <typename T>
struct PmcResult {
  Tensor<T> features;
  Labels partner_labels;
  std::vector<std::size_t> permutation;
  bool applied = false;
};

/// Draws the apply decision, then a uniform permutation pairing sample i with
/// permutation[i]. `force` skips the coin flip (and requires N >= 2).
template <typename T>
PmcResult<T> pmc_step(const Tensor<T>& features, const Labels& labels, const PmcConfig& cfg, Rng& rng,
                      bool force = false);

}  // namespace medvit
