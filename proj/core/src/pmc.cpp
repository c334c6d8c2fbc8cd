#include "medvit/pmc.hpp"

#include <numeric>
#include <random>
#include <string>

#include "medvit/ops.hpp"

namespace medvit {

void PmcConfig::validate() const {
  if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("pmc.lambda must lie strictly inside (0, 1)");
  if (stage < 1 || stage > 3) throw ConfigError("pmc.stage must be 1, 2 or 3");
  if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("pmc.probability must lie in [0, 1]");
  if (!(eps > 0.0)) throw ConfigError("pmc.eps must be positive");
}

template <typename T>
MomentTriple<T> extract_moments(const Tensor<T>& z, T eps) {
  if (z.rank() != 4) throw ShapeError("extract_moments: expected NCHW, got " + to_string(z.shape()));
  if (z.dim(1) < 2) throw ShapeError("extract_moments: need at least 2 channels, got " + std::to_string(z.dim(1)));
  MomentTriple<T> m;
  m.mu = mean(z, 1, true);
  m.sigma = sqrt(add_scalar(variance(z, 1, true), eps));
  m.z_norm = div(sub(z, m.mu), m.sigma);
  return m;
}

template <typename T>
Tensor<T> mix_features(const MomentTriple<T>& a, const MomentTriple<T>& b) {
  if (a.z_norm.shape() != b.z_norm.shape() || a.mu.shape() != b.mu.shape()) {
    throw ShapeError("mix_features: moment shapes differ (" + to_string(a.z_norm.shape()) + " vs " +
                     to_string(b.z_norm.shape()) + ")");
  }
  return add(mul(b.sigma, a.z_norm), b.mu);
}

template <typename T>
Tensor<T> mixed_loss(const Tensor<T>& logits, const Labels& y_a, const Labels& y_b, T lambda) {
  if (!(lambda > T(0) && lambda < T(1))) throw ConfigError("mixed_loss: lambda must lie strictly inside (0, 1)");
  return add(mul_scalar(classification_loss(logits, y_a), lambda),
             mul_scalar(classification_loss(logits, y_b), T(1) - lambda));
}

template <typename T>
PmcResult<T> pmc_step(const Tensor<T>& features, const Labels& labels, const PmcConfig& cfg, Rng& rng, bool force) {
  cfg.validate();
  if (features.rank() != 4) throw ShapeError("pmc_step: expected NCHW, got " + to_string(features.shape()));
  const std::size_t n = features.dim(0);
  if (labels.size() != n) {
    throw ShapeError("pmc_step: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(n));
  }
  PmcResult<T> out;
  out.permutation.resize(n);
  std::iota(out.permutation.begin(), out.permutation.end(), std::size_t{0});

  const bool apply = force || std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.probability;
  if (force && n < 2) throw ShapeError("pmc_step: forced mixing needs a batch of at least 2");
  if (!apply || n < 2) {
    out.features = features;
    out.partner_labels = labels;
    return out;
  }
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(out.permutation[i], out.permutation[pick(rng)]);
  }
  const MomentTriple<T> a = extract_moments(features, static_cast<T>(cfg.eps));
  MomentTriple<T> b;
  b.mu = index_select(a.mu, 0, std::span<const std::size_t>(out.permutation));
  b.sigma = index_select(a.sigma, 0, std::span<const std::size_t>(out.permutation));
  b.z_norm = index_select(a.z_norm, 0, std::span<const std::size_t>(out.permutation));
  out.features = mix_features(a, b);
  out.partner_labels = labels.select(out.permutation);
  out.applied = true;
  return out;
}

#define MEDVIT_INSTANTIATE_PMC(T)                                                                      \
  template MomentTriple<T> extract_moments(const Tensor<T>&, T);                                       \
  template Tensor<T> mix_features(const MomentTriple<T>&, const MomentTriple<T>&);                     \
  template Tensor<T> mixed_loss(const Tensor<T>&, const Labels&, const Labels&, T);                    \
  template PmcResult<T> pmc_step(const Tensor<T>&, const Labels&, const PmcConfig&, Rng&, bool);

MEDVIT_INSTANTIATE_PMC(float)
MEDVIT_INSTANTIATE_PMC(double)

}  // namespace medvit
