#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "medvit/ops.hpp"
#include "medvit/pmc.hpp"
#include "oracles.hpp"

using namespace medvit;
using D = double;

namespace {

Labels multiclass(std::vector<std::uint16_t> classes, std::size_t k) {
  Labels l;
  l.kind = TaskKind::Multiclass;
  l.num_classes = k;
  l.classes = std::move(classes);
  return l;
}

}  // namespace

TEST(Pmc, MomentsNormaliseEveryToken) {
  std::mt19937_64 rng(1);
  Tensor<D> z = oracle::random_tensor<D>({3, 8, 4, 5}, rng, -3, 5);
  const auto m = extract_moments<D>(z, 1e-5);
  EXPECT_EQ(m.mu.shape(), (Shape{3, 1, 4, 5}));
  EXPECT_EQ(m.sigma.shape(), (Shape{3, 1, 4, 5}));
  const std::size_t hw = 20;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t t = 0; t < hw; ++t) {
      D mean = 0, sq = 0;
      for (std::size_t c = 0; c < 8; ++c) mean += m.z_norm.data()[(n * 8 + c) * hw + t];
      mean /= 8;
      for (std::size_t c = 0; c < 8; ++c) sq += std::pow(m.z_norm.data()[(n * 8 + c) * hw + t] - mean, 2);
      EXPECT_LT(std::abs(mean), 1e-12);
      // var(z_norm) = var / (var + eps) exactly; eps-scale shortfall only.
      EXPECT_LT(std::abs(sq / 8 - 1), 1e-4);
    }
  Tensor<D> one_channel = oracle::random_tensor<D>({2, 1, 2, 2}, rng);
  EXPECT_THROW(extract_moments<D>(one_channel, 1e-5), ShapeError);
}

TEST(Pmc, MixingWithItselfReconstructs) {
  std::mt19937_64 rng(2);
  Tensor<D> z = oracle::random_tensor<D>({2, 6, 3, 3}, rng, -2, 2);
  const auto m = extract_moments<D>(z, 1e-5);
  Tensor<D> back = mix_features(m, m);
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(back.data()[i], z.data()[i], 1e-12);
}

TEST(Pmc, PartnerMomentsAreAdopted) {
  std::mt19937_64 rng(3);
  Tensor<D> za = oracle::random_tensor<D>({1, 8, 2, 2}, rng, -1, 1);
  Tensor<D> zb = oracle::random_tensor<D>({1, 8, 2, 2}, rng, 2, 6);
  const auto a = extract_moments<D>(za, 1e-5), b = extract_moments<D>(zb, 1e-5);
  Tensor<D> mixed = mix_features(a, b);
  const auto mm = extract_moments<D>(mixed, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(mm.mu.data()[i], b.mu.data()[i], 1e-12);
    // var(mixed) = sigma_B^2 * var_A / (var_A + eps), so sigma differs from sigma_B by an eps term.
    const D var_a = a.sigma.data()[i] * a.sigma.data()[i] - 1e-5;
    const D sb = b.sigma.data()[i];
    EXPECT_NEAR(mm.sigma.data()[i], std::sqrt(sb * sb * var_a / (var_a + 1e-5) + 1e-5), 1e-12);
  }
}

TEST(Pmc, MixedLossSymmetry) {
  std::mt19937_64 rng(4);
  Tensor<D> logits = oracle::random_tensor<D>({4, 3}, rng, -2, 2);
  const Labels ya = multiclass({0, 1, 2, 1}, 3), yb = multiclass({2, 2, 0, 1}, 3);
  for (D lambda : {0.1, 0.5, 0.73}) {
    const D l1 = mixed_loss(logits, ya, yb, lambda).item();
    const D l2 = mixed_loss(logits, yb, ya, 1 - lambda).item();
    EXPECT_LT(std::abs(l1 - l2), 1e-7);
  }
  EXPECT_THROW(mixed_loss(logits, ya, yb, 1.0), ConfigError);
  EXPECT_THROW(mixed_loss(logits, ya, yb, 0.0), ConfigError);
}

TEST(Pmc, GradientFlowsToBothOperands) {
  std::mt19937_64 rng(5);
  Tensor<D> za = oracle::random_tensor<D>({1, 4, 2, 2}, rng, -1, 1, true);
  Tensor<D> zb = oracle::random_tensor<D>({1, 4, 2, 2}, rng, -1, 1, true);
  const auto a = extract_moments<D>(za, 1e-5), b = extract_moments<D>(zb, 1e-5);
  Tensor<D> w = oracle::random_tensor<D>({1, 4, 2, 2}, rng);
  Tensor<D> loss = sum(mul(mix_features(a, b), w));
  loss.backward();
  D na = 0, nb = 0;
  for (D g : za.grad()) na += std::abs(g);
  for (D g : zb.grad()) nb += std::abs(g);
  EXPECT_GT(na, 1e-6);
  EXPECT_GT(nb, 1e-6);
}

TEST(Pmc, StepPermutesAndPairsLabels) {
  std::mt19937_64 data_rng(6);
  Tensor<D> z = oracle::random_tensor<D>({6, 4, 2, 2}, data_rng);
  const Labels y = multiclass({0, 1, 2, 3, 4, 5}, 6);
  PmcConfig cfg;
  cfg.enabled = true;
  Rng rng(11);
  const auto r = pmc_step(z, y, cfg, rng, true);
  ASSERT_TRUE(r.applied);
  std::vector<std::size_t> sorted = r.permutation;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r.partner_labels.classes[i], r.permutation[i]);
  EXPECT_EQ(r.features.shape(), z.shape());

  Rng again(11);
  const auto r2 = pmc_step(z, y, cfg, again, true);
  EXPECT_EQ(r.permutation, r2.permutation);
}

TEST(Pmc, ProbabilityGatesApplication) {
  std::mt19937_64 data_rng(7);
  Tensor<D> z = oracle::random_tensor<D>({4, 4, 2, 2}, data_rng);
  const Labels y = multiclass({0, 1, 0, 1}, 2);
  PmcConfig never;
  never.probability = 0.0;
  PmcConfig always;
  always.probability = 1.0;
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto off = pmc_step(z, y, never, rng);
    EXPECT_FALSE(off.applied);
    EXPECT_TRUE(off.features.same(z));
    EXPECT_TRUE(pmc_step(z, y, always, rng).applied);
  }
  PmcConfig half;
  std::size_t applied = 0;
  for (int i = 0; i < 400; ++i) applied += pmc_step(z, y, half, rng).applied;
  EXPECT_GT(applied, 150u);
  EXPECT_LT(applied, 250u);
}

TEST(Pmc, ConfigValidation) {
  PmcConfig c;
  c.lambda = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PmcConfig{};
  c.stage = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PmcConfig{};
  c.probability = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}
