#pragma once

#include <cstddef>
#include <vector>

#include "medvit/model.hpp"

namespace medvit {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  void validate() const;
};

/// Decoupled weight decay Adam. Decay applies only to parameters whose role
/// decays (conv/linear weights); BN affine parameters and biases are exempt.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParameter<T>> params, AdamWConfig config);

  /// One update at learning rate `lr`. Parameters without a gradient buffer
  /// are skipped. Throws NumericError, before touching anything, when a
  /// gradient is not finite.
  void step(double lr);
  void step() { step(config_.lr); }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedParameter<T>> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

/// Step decay: base_lr * gamma^(number of milestones <= epoch).
struct Schedule {
  double base_lr = 1e-3;
  std::vector<std::size_t> milestones{50, 75};
  double gamma = 0.1;

  void validate() const;
};

double lr_at(const Schedule& schedule, std::size_t epoch);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace medvit
