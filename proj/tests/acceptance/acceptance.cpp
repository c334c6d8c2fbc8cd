// One gtest per acceptance criterion. A listener prints
//   ACCEPTANCE <criterion>: PASS|FAIL (<measured values>)
// after each test so the run doubles as the acceptance report.

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "grad_cases.hpp"
#include "medvit/attack.hpp"
#include "medvit/audit.hpp"
#include "medvit/metrics.hpp"
#include "medvit/pmc.hpp"
#include "medvit/train.hpp"
#include "oracles.hpp"

using namespace medvit;
using D = double;

namespace tol {
constexpr double kParams = 0.15;
constexpr double kFlops = 0.20;
constexpr double kGradient = 1e-4;
constexpr double kFdStep = 1e-6;
constexpr double kPmcMean = 1e-5;
constexpr double kPmcVar = 1e-4;
constexpr double kPmcReconstruct = 1e-6;
constexpr double kPmcSymmetry = 1e-7;
constexpr std::size_t kOverfitSteps = 200;
constexpr double kFgsmDrop = 0.10;
constexpr double kGradientSeconds = 120;
constexpr double kAuditSeconds = 5;
}  // namespace tol

namespace {

struct Target {
  Variant variant;
  double params;
  double macs;
};
constexpr Target kTargets[] = {{Variant::Tiny, 10.8e6, 1.3e9}, {Variant::Small, 23.6e6, 4.9e9},
                               {Variant::Large, 45.8e6, 13.4e9}};

std::map<std::string, std::string> g_details;

void note(const std::string& text) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto& d = g_details[std::string(info->test_suite_name()) + "." + info->name()];
  d += (d.empty() ? "" : "; ") + text;
}

std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class AcceptanceReporter : public ::testing::EmptyTestEventListener {
  void OnTestEnd(const ::testing::TestInfo& info) override {
    const std::string key = std::string(info.test_suite_name()) + "." + info.name();
    std::cout << "ACCEPTANCE " << key << ": " << (info.result()->Passed() ? "PASS" : "FAIL");
    if (auto it = g_details.find(key); it != g_details.end()) std::cout << " (" << it->second << ')';
    std::cout << std::endl;
  }
};

void expect_exact(const Tensor<D>& got, const oracle::Img& want, const std::string& what) {
  ASSERT_EQ(got.shape(), (Shape{want.n, want.c, want.h, want.w})) << what;
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < want.v.size(); ++i) mismatches += got.data()[i] != want.v[i];
  EXPECT_EQ(mismatches, 0u) << what;
  note(what + " mismatches=" + std::to_string(mismatches));
}

// Shared between the overfit and attack criteria.
struct Overfit {
  DatasetFile data;
  std::optional<MedViT<float>> model;
  TrainResult result;
};
Overfit& overfit_state() {
  static Overfit s;
  return s;
}

TrainConfig overfit_config() {
  TrainConfig cfg;
  cfg.epochs = 1000;
  cfg.batch_size = 16;
  cfg.max_steps = tol::kOverfitSteps;
  cfg.stop_at_train_acc = 1.0;
  cfg.seed = 1;
  cfg.optim.lr = 1e-3;
  cfg.optim.weight_decay = 0.0;
  cfg.schedule.base_lr = 1e-3;
  cfg.schedule.milestones = {};
  return cfg;
}

// Trains the seed-1 run once per process; the attack criterion reuses it.
Overfit& ensure_overfit() {
  Overfit& s = overfit_state();
  if (!s.model) {
    s.data = make_synthetic({.n = 64, .classes = 4, .size = 32, .channels = 1, .seed = 0});
    auto m = MedViT<float>::build(ModelConfig::medvit(Variant::Toy, 4), 1);
    s.result = train(m, s.data, overfit_config());
    s.model.emplace(std::move(m));
  }
  return s;
}

Classifier<float> classifier(MedViT<float>& m, const Normalization& norm) {
  return [&m, norm](const Tensor<float>& x) { return m.forward(normalize(x, norm.mean, norm.std)); };
}

}  // namespace

TEST(Audit, ParameterCountsWithinFifteenPercent) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const Target& t : kTargets) {
    const auto count = static_cast<double>(audit_model(ModelConfig::medvit(t.variant, 8), 224).total_params);
    const double rel = count / t.params - 1.0;
    EXPECT_LE(std::abs(rel), tol::kParams) << variant_name(t.variant);
    note(variant_name(t.variant) + "=" + num(count / 1e6) + "M vs " + num(t.params / 1e6) + "M (" +
           num(100 * rel) + "%)");
  }
  const double s = seconds_since(t0);
  EXPECT_LT(s, tol::kAuditSeconds);
  note("time=" + num(s) + "s");
}

TEST(Audit, FlopsWithinTwentyPercent) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const Target& t : kTargets) {
    const auto macs = static_cast<double>(count_flops(ModelConfig::medvit(t.variant, 8), 224));
    const double rel = macs / t.macs - 1.0;
    EXPECT_LE(std::abs(rel), tol::kFlops) << variant_name(t.variant);
    note(variant_name(t.variant) + "=" + num(macs / 1e9) + "G vs " + num(t.macs / 1e9) + "G (" +
           num(100 * rel) + "%)");
  }
  const double s = seconds_since(t0);
  EXPECT_LT(s, tol::kAuditSeconds);
  note("time=" + num(s) + "s");
}

TEST(Model, TinyShapeTraceAt224) {
  const ModelConfig cfg = ModelConfig::medvit(Variant::Tiny, 8);
  auto m = MedViT<float>::build(cfg, 0);
  m.set_training(false);
  std::map<std::string, Shape> seen;
  ForwardHooks<float> hooks;
  hooks.tap = [&](const std::string& name, const Tensor<float>& a) {
    if (name == "stem" || name.rfind("stage", 0) == 0) seen[name] = a.shape();
  };
  std::mt19937_64 rng(1);
  Tensor<float> x = oracle::random_tensor<float>({1, 3, 224, 224}, rng);
  NoGradGuard ng;
  Tensor<float> logits = m.forward(x, &hooks);
  EXPECT_EQ(logits.shape(), (Shape{1, 8}));
  const std::map<std::string, Shape> want{{"stage1", {1, 96, 56, 56}},
                                          {"stage2", {1, 256, 28, 28}},
                                          {"stage3", {1, 512, 14, 14}},
                                          {"stage4", {1, 1024, 7, 7}}};
  for (const auto& [name, shape] : want) {
    ASSERT_TRUE(seen.count(name)) << name;
    EXPECT_EQ(seen[name], shape) << name;
    note(name + "=" + to_string(seen[name]));
  }
}

TEST(Gradients, PrimitivesAndMicroModelMatchFiniteDifferences) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t count = 0;
  for (const auto& cases : {gradcases::primitive_cases(), gradcases::layer_cases()}) {
    for (const auto& c : cases) {
      const double err = gradcases::run_case(c, tol::kFdStep);
      EXPECT_LT(err, tol::kGradient) << c.name;
      if (err >= worst) worst = err, worst_name = c.name;
      ++count;
    }
  }
  note(std::to_string(count) + " primitives, worst " + worst_name + "=" + num(worst));

  auto model = MedViT<D>::build(ModelConfig::micro(3), 5);
  const std::size_t n_params = count_params(model);
  EXPECT_LE(n_params, 5000u);
  std::mt19937_64 rng(2);
  const Tensor<D> images = gradcases::away_from_zero({2, 3, 16, 16}, rng);
  Labels labels;
  labels.num_classes = 3;
  labels.classes = {0, 2};
  std::vector<Tensor<D>> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  const double err = finite_difference_check_params<D>(
      [&] { return classification_loss(model.forward(images), labels); }, params, tol::kFdStep);
  EXPECT_LT(err, tol::kGradient);
  const double s = seconds_since(t0);
  EXPECT_LT(s, tol::kGradientSeconds);
  note("micro model (" + std::to_string(n_params) + " params) err=" + num(err) + ", time=" + num(s) + "s");
}

TEST(Oracles, ConvPoolEsaLtbExact) {
  std::mt19937_64 rng(7);
  struct C {
    std::size_t in, out, k, stride, pad, groups;
  };
  for (const C& c : {C{8, 8, 3, 1, 1, 1}, C{8, 4, 3, 2, 1, 2}, C{8, 8, 3, 1, 1, 8}, C{6, 8, 1, 1, 0, 2}}) {
    nn::Conv2dOptions o;
    o.in_channels = c.in;
    o.out_channels = c.out;
    o.kernel_h = o.kernel_w = c.k;
    o.stride = c.stride;
    o.padding = c.pad;
    o.groups = c.groups;
    o.bias = true;
    auto p = nn::Conv2dParams<D>::init(o, rng);
    for (auto& b : p.bias.mutable_data()) b = std::uniform_real_distribution<D>(-1, 1)(rng);
    Tensor<D> x = oracle::random_tensor<D>({2, c.in, 6, 6}, rng);
    expect_exact(nn::conv2d(x, p), oracle::conv2d(oracle::from_tensor(x), p),
                 "conv(g" + std::to_string(c.groups) + ",s" + std::to_string(c.stride) + ")");
  }
  Tensor<D> x = oracle::random_tensor<D>({2, 8, 6, 6}, rng);
  expect_exact(nn::avg_pool2d(x, 2, 2), oracle::avg_pool(oracle::from_tensor(x), 2, 2), "avg_pool");

  for (std::size_t stride : {1u, 2u}) {
    auto esa = Esa<D>::init(8, 4, stride, rng);
    ModuleRegistry<D> reg;
    esa.collect("esa", reg);
    oracle::perturb_norms(reg, rng);
    expect_exact(esa.forward(x), oracle::esa(oracle::from_tensor(x), esa, true), "esa(s" + std::to_string(stride) + ")");
  }
  auto ltb = Ltb<D>::init(6, 8, 0.75, 2, 2, 2, rng);
  ModuleRegistry<D> reg;
  ltb.collect("ltb", reg);
  oracle::perturb_norms(reg, rng);
  Tensor<D> x6 = oracle::random_tensor<D>({2, 6, 6, 6}, rng);
  expect_exact(ltb.forward(x6), oracle::ltb(oracle::from_tensor(x6), ltb, true), "ltb.train");
  for (auto& [name, bn] : reg.norms) bn->training = false;
  expect_exact(ltb.forward(x6), oracle::ltb(oracle::from_tensor(x6), ltb, false), "ltb.eval");
}

TEST(Pmc, InvariantsReconstructionSymmetryGradientFlow) {
  std::mt19937_64 rng(11);
  const Tensor<D> z = oracle::random_tensor<D>({4, 16, 5, 5}, rng, -3, 4);
  const auto m = extract_moments<D>(z, 1e-5);
  const std::size_t c = 16, hw = 25;
  double worst_mean = 0, worst_var = 0;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t t = 0; t < hw; ++t) {
      double mean = 0, sq = 0;
      for (std::size_t k = 0; k < c; ++k) mean += m.z_norm.data()[(n * c + k) * hw + t];
      mean /= c;
      for (std::size_t k = 0; k < c; ++k) sq += std::pow(m.z_norm.data()[(n * c + k) * hw + t] - mean, 2);
      worst_mean = std::max(worst_mean, std::abs(mean));
      worst_var = std::max(worst_var, std::abs(sq / c - 1));
    }
  EXPECT_LT(worst_mean, tol::kPmcMean);
  EXPECT_LT(worst_var, tol::kPmcVar);
  note("|mean|=" + num(worst_mean) + " |var-1|=" + num(worst_var));

  const Tensor<D> back = mix_features(m, m);
  double recon = 0;
  for (std::size_t i = 0; i < z.numel(); ++i) recon = std::max(recon, std::abs(back.data()[i] - z.data()[i]));
  EXPECT_LT(recon, tol::kPmcReconstruct);
  note("reconstruction=" + num(recon));

  Tensor<D> logits = oracle::random_tensor<D>({6, 4}, rng, -3, 3);
  Labels a, b;
  a.num_classes = b.num_classes = 4;
  a.classes = {0, 1, 2, 3, 0, 1};
  b.classes = {3, 3, 1, 0, 2, 1};
  double sym = 0;
  for (D lambda : {0.2, 0.5, 0.9}) {
    sym = std::max(sym, std::abs(mixed_loss(logits, a, b, lambda).item() - mixed_loss(logits, b, a, 1 - lambda).item()));
  }
  EXPECT_LT(sym, tol::kPmcSymmetry);
  note("symmetry=" + num(sym));

  Tensor<D> za = z.copy().set_requires_grad(true);
  Tensor<D> zb = oracle::random_tensor<D>({4, 16, 5, 5}, rng, 1, 5, true);
  const Tensor<D> w = oracle::random_tensor<D>({4, 16, 5, 5}, rng);
  sum(mul(mix_features(extract_moments<D>(za, 1e-5), extract_moments<D>(zb, 1e-5)), w)).backward();
  double ga = 0, gb = 0;
  for (D g : za.grad()) ga = std::max(ga, std::abs(g));
  for (D g : zb.grad()) gb = std::max(gb, std::abs(g));
  EXPECT_GT(ga, 0.0);
  EXPECT_GT(gb, 0.0);
  note("max|grad A|=" + num(ga) + " max|grad B|=" + num(gb));
}

TEST(Training, ToyOverfitsSyntheticSetDeterministically) {
  const auto t0 = std::chrono::steady_clock::now();
  const Overfit& s = ensure_overfit();
  auto again = MedViT<float>::build(ModelConfig::medvit(Variant::Toy, 4), 1);
  const TrainResult r2 = train(again, s.data, overfit_config());
  const bool deterministic = r2.step_losses == s.result.step_losses;
  EXPECT_EQ(s.result.final_train_acc, 1.0);
  EXPECT_LE(s.result.steps, tol::kOverfitSteps);
  EXPECT_TRUE(deterministic);
  note("train_acc=" + num(s.result.final_train_acc) + " at step " + std::to_string(s.result.steps) +
         ", deterministic=" + (deterministic ? "yes" : "no") + ", time=" + num(seconds_since(t0)) + "s");
}

TEST(Attacks, ContainmentEquivalenceAndAccuracyDrop) {
  Overfit& s = ensure_overfit();
  MedViT<float>& m = *s.model;
  const Normalization norm;
  const auto idx = s.data.indices(Split::Train);

  // Containment and FGSM == PGD(1, step = eps) on real images.
  m.set_training(false);
  m.set_requires_grad(false);
  const Batch<float> batch = make_batch<float>(s.data, idx, {});
  AttackConfig fg;
  AttackConfig pg;
  pg.iterations = 5;
  pg.step_size = 4.0 / 255.0;
  AttackConfig one = fg;
  one.iterations = 1;
  one.step_size = fg.epsilon;
  const Tensor<float> a = fgsm(classifier(m, norm), batch.images, batch.labels, fg);
  const Tensor<float> p = pgd(classifier(m, norm), batch.images, batch.labels, pg);
  const Tensor<float> p1 = pgd(classifier(m, norm), batch.images, batch.labels, one);
  m.set_requires_grad(true);
  // Bounds in the attack's working precision.
  const float eps = static_cast<float>(fg.epsilon);
  std::size_t outside = 0;
  for (const Tensor<float>* adv : {&a, &p}) {
    for (std::size_t i = 0; i < adv->numel(); ++i) {
      const float x0 = batch.images.data()[i], v = adv->data()[i];
      outside += v < std::max(x0 - eps, 0.0f) || v > std::min(x0 + eps, 1.0f);
    }
  }
  EXPECT_EQ(outside, 0u);
  const bool same = std::equal(a.data().begin(), a.data().end(), p1.data().begin());
  EXPECT_TRUE(same);
  note("outside_ball=" + std::to_string(outside) + ", fgsm==pgd1 " + (same ? "bit-identical" : "differs"));

  const RobustReport rf = robust_accuracy(m, s.data, idx, AttackMethod::Fgsm, fg, norm);
  const RobustReport rp = robust_accuracy(m, s.data, idx, AttackMethod::Pgd, pg, norm);
  const double fgsm_drop = rf.clean_acc - rf.robust_acc, pgd_drop = rp.clean_acc - rp.robust_acc;
  EXPECT_GE(fgsm_drop, tol::kFgsmDrop);
  EXPECT_GE(pgd_drop, fgsm_drop);
  note("clean=" + num(rf.clean_acc) + " fgsm=" + num(rf.robust_acc) + " pgd=" + num(rp.robust_acc) +
         " (drops " + num(fgsm_drop) + ", " + num(pgd_drop) + ")");
}

TEST(Trend, PmcRobustnessBenefitReported) {
  // Reported, not gated: toy-scale variance can mask a small effect.
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetFile data = make_synthetic({.n = 512, .classes = 4, .size = 32, .channels = 1, .seed = 3});
  const auto test = data.indices(Split::Test);
  std::vector<double> with, without;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (bool pmc : {false, true}) {
      auto m = MedViT<float>::build(ModelConfig::medvit(Variant::Toy, 4), seed);
      TrainConfig cfg;
      cfg.epochs = 4;
      cfg.batch_size = 32;
      cfg.seed = seed;
      cfg.schedule.base_lr = 1e-3;
      cfg.schedule.milestones = {};
      cfg.pmc.enabled = pmc;
      cfg.pmc.stage = 2;
      train(m, data, cfg);
      const RobustReport r = robust_accuracy(m, data, test, AttackMethod::Fgsm, AttackConfig{}, cfg.norm);
      (pmc ? with : without).push_back(r.robust_acc);
    }
  }
  std::sort(with.begin(), with.end());
  std::sort(without.begin(), without.end());
  const double med_with = with[2], med_without = without[2];
  note("median FGSM robust acc with PMC=" + num(med_with) + " without=" + num(med_without) + " direction=" +
         (med_with >= med_without ? "PMC>=baseline" : "PMC<baseline") + ", time=" + num(seconds_since(t0)) + "s");
}

TEST(Metrics, AucEqualsPairCounting) {
  std::mt19937_64 rng(47);
  std::uniform_int_distribution<std::size_t> size(2, 50), classes(2, 5);
  std::uniform_int_distribution<int> level(0, 12);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = size(rng), k = classes(rng);
    Labels labels;
    labels.num_classes = k;
    labels.kind = trial % 2 ? TaskKind::Multilabel : TaskKind::Multiclass;
    std::vector<double> scores(n * k);
    for (auto& v : scores) v = level(rng) / 12.0;  // coarse levels force ties
    if (labels.kind == TaskKind::Multiclass) {
      for (std::size_t i = 0; i < n; ++i) labels.classes.push_back(static_cast<std::uint16_t>(rng() % k));
    } else {
      for (std::size_t i = 0; i < n * k; ++i) labels.targets.push_back(static_cast<std::uint8_t>(rng() % 2));
    }
    const MetricReport r = compute_metrics(scores, labels);
    double total = 0;
    std::size_t evaluable = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> s(n);
      std::vector<std::uint8_t> y(n);
      for (std::size_t i = 0; i < n; ++i) s[i] = scores[i * k + c], y[i] = labels.positive(i, c);
      const double want = oracle::pair_auc(s, y);
      const double got = r.per_class_auc[c];
      if (std::isnan(want)) {
        mismatches += !std::isnan(got);
        continue;
      }
      mismatches += got != want;
      total += want;
      ++evaluable;
    }
    mismatches += r.auc != (evaluable ? total / static_cast<double>(evaluable) : 0.5);
  }
  EXPECT_EQ(mismatches, 0u);
  note("100 instances, mismatches=" + std::to_string(mismatches));
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new AcceptanceReporter);
  return RUN_ALL_TESTS();
}
