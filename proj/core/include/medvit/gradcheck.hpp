#pragma once

#include <functional>
#include <vector>

#include "medvit/tensor.hpp"

namespace medvit {

/// Central-difference gradient check of a scalar function at x.
///
/// Returns max over elements of |analytic - numeric| / max(1, |numeric|) where
/// numeric = (f(x+h) - f(x-h)) / 2h. Throws NumericError when f is not finite.
template <typename T>
T finite_difference_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

/// Same check against every element of `params`, perturbed in place.
/// `f` must rebuild its graph from the current parameter values on each call.
template <typename T>
T finite_difference_check_params(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, T h);

}  // namespace medvit
