#include "medvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace medvit {

namespace {

template <typename T>
T checked_value(const Tensor<T>& y) {
  const T v = y.item();
  if (!std::isfinite(v)) throw NumericError("finite-difference check: function value is not finite");
  return v;
}

template <typename T>
T relative_error(T analytic, T numeric) {
  return std::abs(analytic - numeric) / std::max(T(1), std::abs(numeric));
}

}  // namespace

template <typename T>
T finite_difference_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  Tensor<T> probe = x.copy();
  probe.set_requires_grad(true);
  Tensor<T> y = f(probe);
  checked_value(y);
  y.backward();
  std::vector<T> analytic(probe.numel(), T(0));
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  T worst = T(0);
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + h;
    const T plus = checked_value(f(probe));
    values[i] = saved - h;
    const T minus = checked_value(f(probe));
    values[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (plus - minus) / (T(2) * h)));
  }
  return worst;
}

template <typename T>
T finite_difference_check_params(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, T h) {
  for (auto& p : params) p.zero_grad();
  Tensor<T> y = f();
  checked_value(y);
  y.backward();
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    std::vector<T> g(p.numel(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  T worst = T(0);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + h;
      const T plus = checked_value(f());
      values[i] = saved - h;
      const T minus = checked_value(f());
      values[i] = saved;
      worst = std::max(worst, relative_error(analytic[pi][i], (plus - minus) / (T(2) * h)));
    }
  }
  return worst;
}

template float finite_difference_check(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                       const Tensor<float>&, float);
template double finite_difference_check(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                        const Tensor<double>&, double);
template float finite_difference_check_params(const std::function<Tensor<float>()>&, std::vector<Tensor<float>>,
                                              float);
template double finite_difference_check_params(const std::function<Tensor<double>()>&,
                                               std::vector<Tensor<double>>, double);

}  // namespace medvit
