#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "medvit/audit.hpp"
#include "medvit/model.hpp"
#include "medvit/ops.hpp"
#include "oracles.hpp"

using namespace medvit;
using D = double;

TEST(ModelConfig, VariantTableOneChannels) {
  const ModelConfig t = ModelConfig::medvit(Variant::Tiny, 8);
  ASSERT_EQ(t.stages.size(), 4u);
  std::vector<std::size_t> out;
  for (const auto& s : t.stages) out.push_back(s.output_channels());
  EXPECT_EQ(out, (std::vector<std::size_t>{96, 256, 512, 1024}));
  EXPECT_EQ(t.stages[2].repeat, 2u);
  EXPECT_EQ(ModelConfig::medvit(Variant::Small, 8).stages[2].repeat, 4u);
  EXPECT_EQ(ModelConfig::medvit(Variant::Large, 8).stages[2].repeat, 6u);
  EXPECT_EQ(t.spatial_trace(224), (std::vector<std::size_t>{56, 56, 28, 14, 7}));
  EXPECT_EQ(t.ltb_split(256), (std::pair<std::size_t, std::size_t>{192, 64}));
}

TEST(ModelConfig, ToyIsChannelsOverEight) {
  const ModelConfig toy = ModelConfig::medvit(Variant::Toy, 4);
  EXPECT_EQ(toy.input_size, 32u);
  EXPECT_EQ(toy.stages[3].output_channels(), 128u);
  EXPECT_EQ(toy.stages[2].repeat, 1u);
  EXPECT_EQ(toy.spatial_trace(32), (std::vector<std::size_t>{8, 8, 4, 2, 1}));
}

TEST(ModelConfig, ValidationNamesTheProblem) {
  ModelConfig c = ModelConfig::medvit(Variant::Toy, 4);
  c.head_dim = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::medvit(Variant::Toy, 4);
  c.shrink_ratio = 0.7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::medvit(Variant::Toy, 4);
  c.input_size = 8;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_variant("xl"), ConfigError);
  EXPECT_EQ(parse_variant("tiny"), Variant::Tiny);
}

TEST(ModelConfig, DigestTracksArchitecture) {
  const auto a = ModelConfig::medvit(Variant::Toy, 4);
  EXPECT_EQ(a.digest(), ModelConfig::medvit(Variant::Toy, 4).digest());
  EXPECT_NE(a.digest(), ModelConfig::medvit(Variant::Toy, 5).digest());
  EXPECT_NE(a.digest(), ModelConfig::medvit(Variant::Toy, 4, 64).digest());
  EXPECT_NE(ModelConfig::medvit(Variant::Tiny, 8).digest(), ModelConfig::medvit(Variant::Small, 8).digest());
}

TEST(MedViT, MicroModelIsSmallAndWellFormed) {
  auto m = MedViT<D>::build(ModelConfig::micro(3), 1);
  const std::size_t p = count_params(m);
  EXPECT_LE(p, 5000u);
  EXPECT_GE(p, 1000u);
  std::set<std::string> names;
  for (const auto& np : m.parameters()) EXPECT_TRUE(names.insert(np.name).second) << "duplicate " << np.name;
  for (const auto& b : m.buffers()) EXPECT_TRUE(names.insert(b.name).second) << "duplicate " << b.name;
}

TEST(MedViT, ToyForwardShapesAndTaps) {
  auto m = MedViT<float>::build(ModelConfig::medvit(Variant::Toy, 4), 3);
  std::mt19937_64 rng(1);
  Tensor<float> x = oracle::random_tensor<float>({2, 3, 32, 32}, rng, 0, 1);
  std::map<std::string, Shape> seen;
  ForwardHooks<float> hooks;
  hooks.tap = [&](const std::string& name, const Tensor<float>& t) { seen[name] = t.shape(); };
  Tensor<float> logits = m.forward(x, &hooks);
  EXPECT_EQ(logits.shape(), (Shape{2, 4}));
  EXPECT_EQ(seen.at("stem"), (Shape{2, 8, 8, 8}));
  EXPECT_EQ(seen.at("stage1"), (Shape{2, 12, 8, 8}));
  EXPECT_EQ(seen.at("stage2"), (Shape{2, 32, 4, 4}));
  EXPECT_EQ(seen.at("stage3"), (Shape{2, 64, 2, 2}));
  EXPECT_EQ(seen.at("stage4"), (Shape{2, 128, 1, 1}));
  EXPECT_EQ(seen.at("stage2.r0.ltb.esa"), (Shape{2, 24, 4, 4}));
  for (const auto& name : m.layer_names()) EXPECT_TRUE(seen.count(name)) << name;
  EXPECT_TRUE(seen.count(m.default_cam_layer()));
  EXPECT_THROW(m.forward(oracle::random_tensor<float>({2, 1, 32, 32}, rng)), ShapeError);
}

TEST(MedViT, BuildIsDeterministicPerSeed) {
  auto a = MedViT<D>::build(ModelConfig::micro(2), 42);
  auto b = MedViT<D>::build(ModelConfig::micro(2), 42);
  auto c = MedViT<D>::build(ModelConfig::micro(2), 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
    differs |= !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pc[i].tensor.data().begin());
  }
  EXPECT_TRUE(differs);
}

TEST(MedViT, AfterStageHookReplacesFeatures) {
  auto m = MedViT<D>::build(ModelConfig::micro(2), 5);
  m.set_training(false);
  std::mt19937_64 rng(2);
  Tensor<D> x = oracle::random_tensor<D>({2, 3, 16, 16}, rng, 0, 1);
  Tensor<D> base = m.forward(x);
  ForwardHooks<D> identity;
  std::vector<std::size_t> stages;
  identity.after_stage = [&](std::size_t s, const Tensor<D>& f) {
    stages.push_back(s);
    return f;
  };
  Tensor<D> same = m.forward(x, &identity);
  EXPECT_EQ(stages, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_TRUE(std::equal(base.data().begin(), base.data().end(), same.data().begin()));
  ForwardHooks<D> scale;
  scale.after_stage = [](std::size_t s, const Tensor<D>& f) { return s == 1 ? mul_scalar(f, 2.0) : f; };
  Tensor<D> changed = m.forward(x, &scale);
  EXPECT_FALSE(std::equal(base.data().begin(), base.data().end(), changed.data().begin()));
}

TEST(MedViT, TrainingFlagReachesEveryNorm) {
  auto m = MedViT<D>::build(ModelConfig::micro(2), 5);
  m.set_training(false);
  for (auto& [name, bn] : m.modules().norms) EXPECT_FALSE(bn->training) << name;
  m.set_training(true);
  for (auto& [name, bn] : m.modules().norms) EXPECT_TRUE(bn->training) << name;
}

TEST(MedViT, WeightDecayRolesOnlyOnWeights) {
  auto m = MedViT<D>::build(ModelConfig::micro(2), 5);
  for (const auto& p : m.parameters()) {
    const bool is_weight = p.name.size() > 7 && p.name.substr(p.name.size() - 7) == ".weight";
    EXPECT_EQ(p.decays(), is_weight) << p.name;
  }
}

TEST(MedViT, FloatAndDoubleAgree) {
  auto md = MedViT<D>::build(ModelConfig::micro(3), 9);
  auto mf = MedViT<float>::build(ModelConfig::micro(3), 9);
  std::mt19937_64 rng(3);
  Tensor<D> xd = oracle::random_tensor<D>({2, 3, 16, 16}, rng, 0, 1);
  Tensor<float> xf({2, 3, 16, 16}, std::vector<float>(xd.data().begin(), xd.data().end()));
  Tensor<D> yd = md.forward(xd);
  Tensor<float> yf = mf.forward(xf);
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yf.data()[i], yd.data()[i], 1e-4);
}
