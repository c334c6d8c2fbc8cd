#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>

#include "medvit/data.hpp"
#include "medvit/losses.hpp"
#include "medvit/model.hpp"

namespace medvit {

enum class AttackMethod { Fgsm, Pgd };

AttackMethod parse_attack_method(std::string_view text);

/// Budgets are on the [0, 1] pixel scale, before normalisation.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 4.0 / 255.0;
  std::size_t iterations = 5;
  double clip_min = 0.0;
  double clip_max = 1.0;
  bool random_start = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Maps [0, 1] pixels (N, C, H, W) to logits; normalisation happens inside.
template <typename T>
using Classifier = std::function<Tensor<T>(const Tensor<T>& pixels)>;

/// clip(x + eps * sign(grad_x loss)), sign(0) = 0.
template <typename T>
Tensor<T> fgsm(const Classifier<T>& model, const Tensor<T>& x, const Labels& y, const AttackConfig& cfg);

/// `iterations` signed-gradient steps, each projected onto the eps ball
/// around x intersected with [clip_min, clip_max].
template <typename T>
Tensor<T> pgd(const Classifier<T>& model, const Tensor<T>& x, const Labels& y, const AttackConfig& cfg);

template <typename T>
Tensor<T> attack(AttackMethod method, const Classifier<T>& model, const Tensor<T>& x, const Labels& y,
                 const AttackConfig& cfg);

struct RobustReport {
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  std::size_t n = 0;
};

/// Eval-mode clean and adversarial accuracy over `indices`. Parameters are
/// frozen for the duration and restored afterwards.
template <typename T>
RobustReport robust_accuracy(MedViT<T>& model, const DatasetFile& data, std::span<const std::size_t> indices,
                             AttackMethod method, const AttackConfig& cfg, const Normalization& norm,
                             std::size_t batch_size = 32);

}  // namespace medvit
