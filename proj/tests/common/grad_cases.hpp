#pragma once

// Finite-difference cases shared by the unit and acceptance gradient suites.

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>

#include "medvit/data.hpp"
#include "medvit/gradcheck.hpp"
#include "medvit/losses.hpp"
#include "medvit/nn.hpp"
#include "medvit/ops.hpp"
#include "oracles.hpp"

namespace gradcases {

using namespace medvit;
using D = double;
using Fn = std::function<Tensor<D>(const Tensor<D>&)>;

// Values at least `gap` from zero so relu-like kinks stay outside [x-h, x+h].
inline Tensor<D> away_from_zero(const Shape& shape, std::mt19937_64& rng, D gap = 0.05) {
  Tensor<D> t = oracle::random_tensor<D>(shape, rng);
  for (auto& v : t.mutable_data()) {
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  }
  return t;
}

// Reduces any output to a scalar through fixed random weights.
inline Fn project(std::function<Tensor<D>(const Tensor<D>&)> op, const Shape& out_shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<D> r = oracle::random_tensor<D>(out_shape, rng);
  return [op, r](const Tensor<D>& x) { return sum(mul(op(x), r)); };
}

struct GradCase {
  std::string name;
  Shape input;
  Shape output;
  std::function<Tensor<D>(const Tensor<D>&)> op;
  D lo = -1, hi = 1;
};

/// Max relative error of the case at a seeded input away from kinks.
inline D run_case(const GradCase& c, D step) {
  std::mt19937_64 rng(std::hash<std::string>{}(c.name));
  Tensor<D> x = away_from_zero(c.input, rng);
  if (c.lo != -1 || c.hi != 1) {
    for (auto& v : x.mutable_data()) v = c.lo + (v + 1.05) / 2.1 * (c.hi - c.lo);
  }
  return finite_difference_check<D>(project(c.op, c.output, 99), x, step);
}

inline std::vector<GradCase> primitive_cases() {
  std::mt19937_64 rng(5);
  const Tensor<D> kOther = away_from_zero({2, 3}, rng);
  const Tensor<D> kRow = away_from_zero({1, 3}, rng);
  const Tensor<D> kMat = away_from_zero({3, 4}, rng);
  const Tensor<D> kBatchMat = away_from_zero({2, 3, 2}, rng);
  const std::vector<std::size_t> idx{2, 0, 2};
  std::vector<GradCase> cases{
      {"add_broadcast", {2, 3}, {2, 3}, [kRow](const Tensor<D>& x) { return add(x, kRow); }},
      {"add_broadcast_rhs", {1, 3}, {2, 3}, [kOther](const Tensor<D>& x) { return add(kOther, x); }},
      {"sub", {2, 3}, {2, 3}, [kOther](const Tensor<D>& x) { return sub(kOther, x); }},
      {"mul_self", {2, 3}, {2, 3}, [](const Tensor<D>& x) { return mul(x, x); }},
      {"div", {2, 3}, {2, 3}, [kOther](const Tensor<D>& x) { return div(kOther, x); }},
      {"div_numerator", {2, 3}, {2, 3}, [kOther](const Tensor<D>& x) { return div(x, kOther); }},
      {"scalars", {2, 3}, {2, 3},
       [](const Tensor<D>& x) { return neg(div_scalar(mul_scalar(add_scalar(x, 0.5), 3.0), 7.0)); }},
      {"relu", {2, 3}, {2, 3}, [](const Tensor<D>& x) { return relu(x); }},
      {"exp", {2, 3}, {2, 3}, [](const Tensor<D>& x) { return exp(x); }},
      {"log", {2, 3}, {2, 3}, [](const Tensor<D>& x) { return log(x); }, 0.2, 2.0},
      {"sqrt", {2, 3}, {2, 3}, [](const Tensor<D>& x) { return sqrt(x); }, 0.2, 2.0},
      {"sigmoid", {2, 3}, {2, 3}, [](const Tensor<D>& x) { return sigmoid(x); }},
      {"matmul_lhs", {2, 3}, {2, 4}, [kMat](const Tensor<D>& x) { return matmul(x, kMat); }},
      {"matmul_rhs", {3, 4}, {2, 4}, [kOther](const Tensor<D>& x) { return matmul(kOther, x); }},
      {"matmul_batched", {2, 2, 3}, {2, 2, 2}, [kBatchMat](const Tensor<D>& x) { return matmul(x, kBatchMat); }},
      {"reshape", {2, 3}, {3, 2}, [](const Tensor<D>& x) { return mul(reshape(x, {3, 2}), reshape(x, {3, 2})); }},
      {"permute", {2, 3, 4}, {4, 2, 3}, [](const Tensor<D>& x) { return permute(x, {2, 0, 1}); }},
      {"transpose", {2, 3}, {3, 2}, [](const Tensor<D>& x) { return transpose(x, 0, 1); }},
      {"broadcast_to", {1, 3}, {4, 3}, [](const Tensor<D>& x) { return broadcast_to(x, {4, 3}); }},
      {"concat", {2, 3}, {2, 6}, [](const Tensor<D>& x) { return concat<D>({x, mul(x, x)}, 1); }},
      {"slice", {4, 3}, {2, 3}, [](const Tensor<D>& x) { return slice(x, 0, 1, 2); }},
      {"index_select_repeats", {3, 2}, {3, 2},
       [idx](const Tensor<D>& x) { return index_select(x, 0, std::span<const std::size_t>(idx)); }},
      {"softmax", {2, 4}, {2, 4}, [](const Tensor<D>& x) { return softmax(x, 1); }},
      {"softmax_axis0", {3, 2}, {3, 2}, [](const Tensor<D>& x) { return softmax(x, 0); }},
      {"log_softmax", {2, 4}, {2, 4}, [](const Tensor<D>& x) { return log_softmax(x, 1); }},
      {"sum_axis", {2, 3, 2}, {2, 2}, [](const Tensor<D>& x) { return sum(x, 1, false); }},
      {"mean_axis", {2, 3, 2}, {2, 1, 2}, [](const Tensor<D>& x) { return mean(x, 1, true); }},
      {"mean_all", {2, 3}, {}, [](const Tensor<D>& x) { return mean(x); }},
      {"variance", {2, 5}, {2, 1}, [](const Tensor<D>& x) { return variance(x, 1, true); }},
  };
  return cases;
}

inline std::vector<GradCase> layer_cases() {
  std::mt19937_64 rng(17);
  std::vector<GradCase> cases;
  struct ConvCase {
    const char* name;
    std::size_t in, out, k, stride, pad, groups;
    bool bias;
  };
  for (const ConvCase& cc : {ConvCase{"conv_plain", 2, 3, 3, 1, 0, 1, true},
                             ConvCase{"conv_stride_pad", 2, 2, 3, 2, 1, 1, true},
                             ConvCase{"conv_grouped", 4, 4, 3, 1, 1, 2, false},
                             ConvCase{"conv_depthwise", 3, 3, 3, 1, 1, 3, true},
                             ConvCase{"conv_pointwise", 3, 2, 1, 1, 0, 1, true}}) {
    nn::Conv2dOptions o;
    o.in_channels = cc.in;
    o.out_channels = cc.out;
    o.kernel_h = o.kernel_w = cc.k;
    o.stride = cc.stride;
    o.padding = cc.pad;
    o.groups = cc.groups;
    o.bias = cc.bias;
    auto p = nn::Conv2dParams<D>::init(o, rng);
    const std::size_t ho = nn::conv_output_size(5, cc.k, cc.stride, cc.pad);
    cases.push_back({cc.name, {2, cc.in, 5, 5}, {2, cc.out, ho, ho},
                     [p](const Tensor<D>& x) { return nn::conv2d(x, p); }});
    // Gradient with respect to the weights, through the same kernel.
    cases.push_back({std::string(cc.name) + "_weight", p.weight.shape(), {2, cc.out, ho, ho},
                     [p, x = oracle::random_tensor<D>({2, cc.in, 5, 5}, rng)](const Tensor<D>& w) {
                       return nn::conv2d(x, w, p.options.bias ? &p.bias : nullptr, p.options.stride,
                                         p.options.padding, p.options.groups);
                     }});
  }
  auto bn = std::make_shared<nn::BatchNormState<D>>(nn::BatchNormState<D>::init(3));
  cases.push_back({"batch_norm_train", {2, 3, 2, 2}, {2, 3, 2, 2}, [bn](const Tensor<D>& x) {
                     bn->training = true;
                     return nn::batch_norm(x, *bn);
                   }});
  auto bn_eval = std::make_shared<nn::BatchNormState<D>>(nn::BatchNormState<D>::init(3));
  bn_eval->running_mean = {0.1, -0.2, 0.3};
  bn_eval->running_var = {0.5, 1.5, 2.0};
  bn_eval->training = false;
  cases.push_back({"batch_norm_eval", {2, 3, 2, 2}, {2, 3, 2, 2},
                   [bn_eval](const Tensor<D>& x) { return nn::batch_norm(x, *bn_eval); }});
  cases.push_back({"avg_pool2d", {1, 2, 4, 4}, {1, 2, 2, 2}, [](const Tensor<D>& x) { return nn::avg_pool2d(x, 2, 2); }});
  cases.push_back({"avg_pool2d_overlap", {1, 1, 5, 5}, {1, 1, 2, 2},
                   [](const Tensor<D>& x) { return nn::avg_pool2d(x, 3, 2); }});
  cases.push_back({"global_avg_pool", {2, 3, 2, 3}, {2, 3}, [](const Tensor<D>& x) { return nn::global_avg_pool(x); }});
  auto lin = nn::LinearParams<D>::init(4, 3, rng);
  cases.push_back({"linear", {2, 4}, {2, 3}, [lin](const Tensor<D>& x) { return nn::linear(x, lin); }});
  cases.push_back({"linear_weight", {4, 3}, {2, 3},
                   [lin, x = oracle::random_tensor<D>({2, 4}, rng)](const Tensor<D>& w) {
                     return nn::linear(x, w, lin.bias);
                   }});
  cases.push_back({"normalize", {2, 3, 2, 2}, {2, 3, 2, 2}, [](const Tensor<D>& x) {
                     return normalize(x, {0.1, 0.2, 0.3}, {0.5, 0.25, 2.0});
                   }});
  const std::vector<std::uint16_t> classes{2, 0};
  cases.push_back({"cross_entropy", {2, 3}, {}, [classes](const Tensor<D>& x) {
                     return cross_entropy(x, std::span<const std::uint16_t>(classes));
                   }});
  const std::vector<std::uint8_t> targets{1, 0, 1, 0, 0, 1};
  cases.push_back({"bce_with_logits", {2, 3}, {}, [targets](const Tensor<D>& x) {
                     return bce_with_logits(x, std::span<const std::uint8_t>(targets));
                   }});
  return cases;
}

}  // namespace gradcases
