#include "medvit/optim.hpp"

#include <cmath>
#include <string>

namespace medvit {

void AdamWConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("adamw: lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adamw: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("adamw: eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("adamw: weight decay must be non-negative");
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParameter<T>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("adamw: non-finite gradient in " + p.name);
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double shrink = 1.0 - lr * config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool decay = p.decays() && config_.weight_decay != 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      double value = static_cast<double>(w[j]);
      if (decay) value *= shrink;
      const double gj = static_cast<double>(g[j]);
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      w[j] = static_cast<T>(value);
    }
  }
}

void Schedule::validate() const {
  if (!(base_lr >= 0.0)) throw ConfigError("schedule: base lr must be non-negative");
  if (!(gamma > 0.0)) throw ConfigError("schedule: gamma must be positive");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) throw ConfigError("schedule: milestones must be strictly increasing");
  }
}

double lr_at(const Schedule& schedule, std::size_t epoch) {
  double lr = schedule.base_lr;
  for (std::size_t m : schedule.milestones) {
    if (m <= epoch) lr *= schedule.gamma;
  }
  return lr;
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace medvit
