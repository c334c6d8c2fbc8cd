#include <gtest/gtest.h>

#include "grad_cases.hpp"

using namespace gradcases;

namespace {

constexpr D kStep = 1e-6;
constexpr D kLimit = 1e-6;

class PrimitiveGradient : public ::testing::TestWithParam<GradCase> {};

std::string case_name(const ::testing::TestParamInfo<GradCase>& info) { return info.param.name; }

}  // namespace

TEST_P(PrimitiveGradient, MatchesCentralDifference) {
  const GradCase& c = GetParam();
  EXPECT_LT(run_case(c, kStep), kLimit) << c.name;
}

INSTANTIATE_TEST_SUITE_P(Primitives, PrimitiveGradient, ::testing::ValuesIn(primitive_cases()), case_name);
INSTANTIATE_TEST_SUITE_P(Layers, PrimitiveGradient, ::testing::ValuesIn(layer_cases()), case_name);

TEST(GradCheck, DetectsAWrongGradient) {
  debug::set_relu_grad_fault(true);
  std::mt19937_64 rng(3);
  Tensor<D> x = away_from_zero({2, 3}, rng);
  const D err = finite_difference_check<D>([](const Tensor<D>& t) { return sum(mul(relu(t), t)); }, x, kStep);
  debug::set_relu_grad_fault(false);
  EXPECT_GT(err, 1e-2);
}

TEST(GradCheck, NonFiniteFunctionThrows) {
  Tensor<D> x({2}, {-1.0, 1.0});
  EXPECT_THROW(finite_difference_check<D>([](const Tensor<D>& t) { return sum(log(t)); }, x, kStep), NumericError);
}

TEST(GradCheck, SingleFloatGradientsAgreeWithDouble) {
  std::mt19937_64 rng(8);
  Tensor<D> xd = away_from_zero({2, 4}, rng);
  std::vector<float> vf(xd.data().begin(), xd.data().end());
  Tensor<float> xf({2, 4}, vf, true);
  Tensor<D> xg = xd.copy();
  xg.set_requires_grad(true);
  Tensor<float> yf = sum(mul(softmax(xf, 1), xf));
  yf.backward();
  Tensor<D> yd = sum(mul(softmax(xg, 1), xg));
  yd.backward();
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(xf.grad()[i], xg.grad()[i], 1e-5);
}
