#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "medvit/tensor.hpp"

namespace medvit {

enum class TaskKind : std::uint8_t { Multiclass = 0, Multilabel = 1 };

/// Labels of a batch: one class index per sample (multiclass) or an unpacked
/// N x K 0/1 matrix (multilabel).
struct Labels {
  TaskKind kind = TaskKind::Multiclass;
  std::size_t num_classes = 0;
  std::vector<std::uint16_t> classes;
  std::vector<std::uint8_t> targets;

  std::size_t size() const;
  bool positive(std::size_t sample, std::size_t cls) const;
  /// Rows `indices` (repeats allowed), in that order.
  Labels select(std::span<const std::size_t> indices) const;
  /// Throws LabelRangeError on an out-of-range class index.
  void validate() const;
};

/// Mean softmax cross-entropy of (N, K) logits.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint16_t> classes);

/// Mean over all N x K entries of the numerically stable sigmoid BCE.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets);

/// Cross-entropy or BCE according to labels.kind.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const Labels& labels);

}  // namespace medvit
