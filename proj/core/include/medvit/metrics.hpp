#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "medvit/losses.hpp"

namespace medvit {

struct MetricReport {
  double acc = 0.0;
  /// Macro average over evaluable classes; 0.5 when no class is evaluable.
  double auc = 0.5;
  /// NaN for classes lacking a positive or a negative sample.
  std::vector<double> per_class_auc;
  std::vector<std::size_t> skipped_classes;
  std::size_t n_samples = 0;
};

/// Mann-Whitney statistic: fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. NaN when either side is empty.
double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// `scores` is row-major (N, K): softmax probabilities for multiclass,
/// sigmoid probabilities for multilabel (thresholded at 0.5 for accuracy).
MetricReport compute_metrics(std::span<const double> scores, const Labels& labels);

}  // namespace medvit
