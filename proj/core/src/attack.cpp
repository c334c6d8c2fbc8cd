#include "medvit/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace medvit {

AttackMethod parse_attack_method(std::string_view text) {
  if (text == "fgsm") return AttackMethod::Fgsm;
  if (text == "pgd") return AttackMethod::Pgd;
  throw ConfigError("unknown attack method '" + std::string(text) + "' (expected fgsm or pgd)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("attack: epsilon must be non-negative");
  if (!(step_size > 0.0)) throw ConfigError("attack: step size must be positive");
  if (iterations == 0) throw ConfigError("attack: iterations must be positive");
  if (!(clip_min < clip_max)) throw ConfigError("attack: clip_min must be below clip_max");
}

namespace {

template <typename T>
std::vector<T> input_gradient(const Classifier<T>& model, const std::vector<T>& values, const Shape& shape,
                              const Labels& y) {
  Tensor<T> x(shape, values, true);
  Tensor<T> loss = classification_loss(model(x), y);
  const T value = loss.item();
  if (!std::isfinite(static_cast<double>(value))) throw NumericError("attack: non-finite loss");
  if (!loss.requires_grad()) return std::vector<T>(values.size(), T(0));
  loss.backward();
  if (!x.has_grad()) return std::vector<T>(values.size(), T(0));
  const auto g = x.grad();
  return {g.begin(), g.end()};
}

template <typename T>
T sign(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

void check_input(const Shape& shape) {
  if (shape.size() != 4) throw ShapeError("attack: expected NCHW input, got " + to_string(shape));
}

}  // namespace

template <typename T>
Tensor<T> fgsm(const Classifier<T>& model, const Tensor<T>& x, const Labels& y, const AttackConfig& cfg) {
  cfg.validate();
  check_input(x.shape());
  const auto x0 = x.data();
  std::vector<T> start(x0.begin(), x0.end());
  const auto g = input_gradient(model, start, x.shape(), y);
  const T eps = static_cast<T>(cfg.epsilon);
  const T lo = static_cast<T>(cfg.clip_min), hi = static_cast<T>(cfg.clip_max);
  std::vector<T> out(start.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(start[i] + eps * sign(g[i]), lo, hi);
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
Tensor<T> pgd(const Classifier<T>& model, const Tensor<T>& x, const Labels& y, const AttackConfig& cfg) {
  cfg.validate();
  check_input(x.shape());
  const auto x0 = x.data();
  const T eps = static_cast<T>(cfg.epsilon);
  const T step = static_cast<T>(cfg.step_size);
  const T lo = static_cast<T>(cfg.clip_min), hi = static_cast<T>(cfg.clip_max);
  std::vector<T> lower(x0.size()), upper(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    lower[i] = std::max(x0[i] - eps, lo);
    upper[i] = std::min(x0[i] + eps, hi);
  }
  std::vector<T> cur(x0.begin(), x0.end());
  if (cfg.random_start) {
    Rng rng(cfg.seed);
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      cur[i] = std::clamp(static_cast<T>(x0[i] + static_cast<T>(u(rng))), lower[i], upper[i]);
    }
  }
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto g = input_gradient(model, cur, x.shape(), y);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = std::clamp(cur[i] + step * sign(g[i]), lower[i], upper[i]);
  }
  return Tensor<T>(x.shape(), std::move(cur));
}

template <typename T>
Tensor<T> attack(AttackMethod method, const Classifier<T>& model, const Tensor<T>& x, const Labels& y,
                 const AttackConfig& cfg) {
  return method == AttackMethod::Fgsm ? fgsm(model, x, y, cfg) : pgd(model, x, y, cfg);
}

namespace {

// Counts correct predictions of (N, K) logits.
template <typename T>
std::size_t count_correct(const Tensor<T>& logits, const Labels& y) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const auto z = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * k;
    if (y.kind == TaskKind::Multiclass) {
      if (static_cast<std::size_t>(std::max_element(row, row + k) - row) == y.classes[i]) ++correct;
    } else {
      bool all = true;
      for (std::size_t c = 0; c < k; ++c) all = all && ((row[c] > T(0)) == y.positive(i, c));
      if (all) ++correct;
    }
  }
  return correct;
}

}  // namespace

template <typename T>
RobustReport robust_accuracy(MedViT<T>& model, const DatasetFile& data, std::span<const std::size_t> indices,
                             AttackMethod method, const AttackConfig& cfg, const Normalization& norm,
                             std::size_t batch_size) {
  if (indices.empty()) throw DataError("robust_accuracy: empty dataset");
  if (batch_size == 0) throw ConfigError("robust_accuracy: batch size must be positive");
  cfg.validate();
  const bool was_training = model.training();
  model.set_training(false);
  model.set_requires_grad(false);
  Classifier<T> classify = [&](const Tensor<T>& pixels) { return model.forward(normalize(pixels, norm.mean, norm.std)); };
  BatchOptions opts;
  opts.size = model.config().input_size;
  opts.out_channels = model.config().in_channels;

  RobustReport r;
  std::size_t clean = 0, robust = 0;
  try {
    for (std::size_t b = 0; b < indices.size(); b += batch_size) {
      const auto chunk = indices.subspan(b, std::min(batch_size, indices.size() - b));
      Batch<T> batch = make_batch<T>(data, chunk, opts);
      {
        NoGradGuard no_grad;
        clean += count_correct(classify(batch.images), batch.labels);
      }
      Tensor<T> adv = attack(method, classify, batch.images, batch.labels, cfg);
      NoGradGuard no_grad;
      robust += count_correct(classify(adv), batch.labels);
    }
  } catch (...) {
    model.set_requires_grad(true);
    model.set_training(was_training);
    throw;
  }
  model.set_requires_grad(true);
  model.set_training(was_training);
  r.n = indices.size();
  r.clean_acc = static_cast<double>(clean) / static_cast<double>(r.n);
  r.robust_acc = static_cast<double>(robust) / static_cast<double>(r.n);
  return r;
}

#define MEDVIT_INSTANTIATE_ATTACK(T)                                                                      \
  template Tensor<T> fgsm(const Classifier<T>&, const Tensor<T>&, const Labels&, const AttackConfig&);    \
  template Tensor<T> pgd(const Classifier<T>&, const Tensor<T>&, const Labels&, const AttackConfig&);     \
  template Tensor<T> attack(AttackMethod, const Classifier<T>&, const Tensor<T>&, const Labels&,          \
                            const AttackConfig&);                                                         \
  template RobustReport robust_accuracy(MedViT<T>&, const DatasetFile&, std::span<const std::size_t>,     \
                                        AttackMethod, const AttackConfig&, const Normalization&, std::size_t);

MEDVIT_INSTANTIATE_ATTACK(float)
MEDVIT_INSTANTIATE_ATTACK(double)

}  // namespace medvit
