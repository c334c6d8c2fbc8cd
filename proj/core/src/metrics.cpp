#include "medvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace medvit {

double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw ShapeError("binary_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks (1-based) over tie groups; sums of half-integers are exact.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t q = i; q < j; ++q) {
      if (positive[order[q]]) {
        rank_sum += avg;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

MetricReport compute_metrics(std::span<const double> scores, const Labels& labels) {
  const std::size_t n = labels.size();
  const std::size_t k = labels.num_classes;
  if (n == 0) throw DataError("compute_metrics: empty input");
  if (scores.size() != n * k) {
    throw ShapeError("compute_metrics: " + std::to_string(scores.size()) + " scores for " + std::to_string(n) +
                     " x " + std::to_string(k));
  }
  labels.validate();
  MetricReport r;
  r.n_samples = n;

  double correct = 0.0;
  if (labels.kind == TaskKind::Multiclass) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = scores.data() + i * k;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      if (best == labels.classes[i]) correct += 1.0;
    }
    r.acc = correct / static_cast<double>(n);
  } else {
    for (std::size_t i = 0; i < n * k; ++i) {
      const bool predicted = scores[i] > 0.5;
      if (predicted == (labels.targets[i] != 0)) correct += 1.0;
    }
    r.acc = correct / static_cast<double>(n * k);
  }

  std::vector<double> column(n);
  std::vector<std::uint8_t> positive(n);
  double sum = 0.0;
  std::size_t evaluable = 0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = scores[i * k + c];
      positive[i] = labels.positive(i, c) ? 1 : 0;
    }
    const double auc = binary_auc(column, positive);
    r.per_class_auc.push_back(auc);
    if (std::isnan(auc)) {
      r.skipped_classes.push_back(c);
    } else {
      sum += auc;
      ++evaluable;
    }
  }
  r.auc = evaluable ? sum / static_cast<double>(evaluable) : 0.5;
  return r;
}

}  // namespace medvit
