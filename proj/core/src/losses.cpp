#include "medvit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace medvit {

std::size_t Labels::size() const {
  if (kind == TaskKind::Multiclass) return classes.size();
  return num_classes ? targets.size() / num_classes : 0;
}

bool Labels::positive(std::size_t sample, std::size_t cls) const {
  if (kind == TaskKind::Multiclass) return classes[sample] == cls;
  return targets[sample * num_classes + cls] != 0;
}

Labels Labels::select(std::span<const std::size_t> indices) const {
  Labels out;
  out.kind = kind;
  out.num_classes = num_classes;
  const std::size_t n = size();
  for (std::size_t i : indices) {
    if (i >= n) throw ShapeError("labels: index " + std::to_string(i) + " out of range for " + std::to_string(n));
    if (kind == TaskKind::Multiclass) {
      out.classes.push_back(classes[i]);
    } else {
      out.targets.insert(out.targets.end(), targets.begin() + static_cast<std::ptrdiff_t>(i * num_classes),
                         targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * num_classes));
    }
  }
  return out;
}

void Labels::validate() const {
  if (num_classes == 0) throw LabelRangeError("labels: zero classes");
  if (kind == TaskKind::Multiclass) {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] >= num_classes) {
        throw LabelRangeError("label " + std::to_string(classes[i]) + " of sample " + std::to_string(i) +
                              " out of range for " + std::to_string(num_classes) + " classes");
      }
    }
  } else {
    if (targets.size() % num_classes != 0) throw LabelRangeError("multilabel targets not a multiple of num_classes");
    for (auto t : targets) {
      if (t > 1) throw LabelRangeError("multilabel target must be 0 or 1");
    }
  }
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint16_t> classes) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be (N, K), got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (classes.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(classes.size()) + " labels for " + std::to_string(n) +
                     " rows");
  }
  for (auto c : classes) {
    if (c >= k) throw LabelRangeError("cross_entropy: label " + std::to_string(c) + " >= " + std::to_string(k));
  }
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[i * k + j] = std::exp(row[j] - mx);
      s += (*probs)[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] /= s;
    total += mx + std::log(s) - row[classes[i]];
  }
  auto out = std::make_shared<std::vector<T>>(1, total / static_cast<T>(n));
  std::vector<std::uint16_t> labels(classes.begin(), classes.end());
  return Tensor<T>::from_op({1}, out, {logits}, "cross_entropy", [logits, probs, labels, n, k](std::span<const T> g) {
    T* gx = logits.grad_buffer();
    if (!gx) return;
    const T scale = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const T target = labels[i] == j ? T(1) : T(0);
        gx[i * k + j] += ((*probs)[i * k + j] - target) * scale;
      }
    }
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets) {
  if (logits.rank() != 2) throw ShapeError("bce_with_logits: logits must be (N, K), got " + to_string(logits.shape()));
  const std::size_t count = logits.numel();
  if (targets.size() != count) {
    throw ShapeError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " + std::to_string(count) +
                     " logits");
  }
  const auto z = logits.data();
  T total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (targets[i] > 1) throw LabelRangeError("bce_with_logits: target must be 0 or 1");
    const T x = z[i];
    total += std::max(x, T(0)) - x * static_cast<T>(targets[i]) + std::log1p(std::exp(-std::abs(x)));
  }
  auto out = std::make_shared<std::vector<T>>(1, total / static_cast<T>(count));
  std::vector<std::uint8_t> y(targets.begin(), targets.end());
  return Tensor<T>::from_op({1}, out, {logits}, "bce_with_logits", [logits, y, count](std::span<const T> g) {
    T* gx = logits.grad_buffer();
    if (!gx) return;
    const auto z = logits.data();
    const T scale = g[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const T s = T(1) / (T(1) + std::exp(-z[i]));
      gx[i] += (s - static_cast<T>(y[i])) * scale;
    }
  });
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const Labels& labels) {
  if (logits.rank() == 2 && labels.num_classes != logits.dim(1)) {
    throw ShapeError("classification_loss: labels have " + std::to_string(labels.num_classes) +
                     " classes, logits " + std::to_string(logits.dim(1)));
  }
  if (labels.kind == TaskKind::Multiclass) return cross_entropy(logits, std::span<const std::uint16_t>(labels.classes));
  return bce_with_logits(logits, std::span<const std::uint8_t>(labels.targets));
}

#define MEDVIT_INSTANTIATE_LOSSES(T)                                                     \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::uint16_t>);   \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const std::uint8_t>);  \
  template Tensor<T> classification_loss(const Tensor<T>&, const Labels&);

MEDVIT_INSTANTIATE_LOSSES(float)
MEDVIT_INSTANTIATE_LOSSES(double)

}  // namespace medvit
