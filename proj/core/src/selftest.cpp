#include "medvit/selftest.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "medvit/attack.hpp"
#include "medvit/gradcheck.hpp"
#include "medvit/metrics.hpp"
#include "medvit/model.hpp"
#include "medvit/nn.hpp"
#include "medvit/ops.hpp"
#include "medvit/pmc.hpp"

namespace medvit {

namespace {

using D = double;
using Fn = std::function<Tensor<D>(const Tensor<D>&)>;

// Uniform values in [lo, hi] kept at least `gap` away from zero.
Tensor<D> random_tensor(Shape shape, Rng& rng, D lo = -1, D hi = 1, D gap = 0.05) {
  std::uniform_real_distribution<D> u(lo, hi);
  std::vector<D> v(numel(shape));
  for (auto& x : v) {
    do {
      x = u(rng);
    } while (std::abs(x) < gap);
  }
  return Tensor<D>(std::move(shape), std::move(v));
}

std::string fmt(const char* what, double value, double limit) {
  std::ostringstream os;
  os << what << ' ' << value << " (limit " << limit << ')';
  return os.str();
}

CheckResult gradient_check(const std::string& name, const Fn& f, const Tensor<D>& x, D limit = 1e-5) {
  const D err = finite_difference_check<D>(f, x, 1e-6);
  return {name, err < limit, fmt("max relative error", err, limit)};
}

D pair_count_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / pairs;
}

std::vector<CheckResult> gradient_checks() {
  Rng rng(11);
  std::vector<CheckResult> out;
  const Tensor<D> x23 = random_tensor({2, 3}, rng);
  const Tensor<D> w23 = random_tensor({2, 3}, rng);
  out.push_back(gradient_check("grad.chain", [&](const Tensor<D>& x) { return sum(mul(exp(x), add(x, w23))); }, x23));
  out.push_back(gradient_check("grad.relu", [&](const Tensor<D>& x) { return sum(mul(relu(x), w23)); }, x23));
  const Tensor<D> w44 = random_tensor({4, 4}, rng);
  out.push_back(gradient_check(
      "grad.matmul_softmax", [&](const Tensor<D>& x) { return sum(mul(softmax(matmul(x, w44), 1), x)); },
      random_tensor({1, 4}, rng)));

  nn::Conv2dOptions o;
  o.in_channels = 4;
  o.out_channels = 4;
  o.kernel_h = o.kernel_w = 3;
  o.stride = 2;
  o.padding = 1;
  o.groups = 2;
  const auto conv = nn::Conv2dParams<D>::init(o, rng);
  out.push_back(gradient_check(
      "grad.conv2d", [&](const Tensor<D>& x) { return sum(mul(nn::conv2d(x, conv), nn::conv2d(x, conv))); },
      random_tensor({1, 4, 5, 5}, rng)));
  auto bn = nn::BatchNormState<D>::init(3);
  const Tensor<D> wbn = random_tensor({2, 3, 2, 2}, rng);
  out.push_back(gradient_check(
      "grad.batch_norm", [&](const Tensor<D>& x) { return sum(mul(nn::batch_norm(x, bn), wbn)); },
      random_tensor({2, 3, 2, 2}, rng)));
  const Tensor<D> wpool = random_tensor({1, 2, 2, 2}, rng);
  out.push_back(gradient_check(
      "grad.avg_pool2d", [&](const Tensor<D>& x) { return sum(mul(nn::avg_pool2d(x, 2, 2), wpool)); },
      random_tensor({1, 2, 4, 4}, rng)));
  const auto lin = nn::LinearParams<D>::init(3, 2, rng);
  out.push_back(gradient_check(
      "grad.linear", [&](const Tensor<D>& x) { return sum(mul(nn::linear(x, lin), nn::linear(x, lin))); }, x23));

  // Whole micro model, every parameter.
  auto model = MedViT<D>::build(ModelConfig::micro(3), 5);
  const Tensor<D> images = random_tensor({2, 3, 16, 16}, rng);
  Labels labels;
  labels.num_classes = 3;
  labels.classes = {0, 2};
  std::vector<Tensor<D>> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  const D err = finite_difference_check_params<D>(
      [&] { return classification_loss(model.forward(images), labels); }, params, 1e-6);
  out.push_back({"grad.micro_model", err < 1e-4, fmt("max relative error", err, 1e-4)});
  return out;
}

std::vector<CheckResult> pmc_checks() {
  Rng rng(23);
  std::vector<CheckResult> out;
  const Tensor<D> z = random_tensor({2, 6, 3, 3}, rng, -2, 2, 0);
  const auto m = extract_moments(z, 1e-5);
  {
    NoGradGuard ng;
    D worst_mean = 0, worst_var = 0;
    const Tensor<D> mu_t = mean(m.z_norm, 1, true), var_t = variance(m.z_norm, 1, true);
    const auto mu = mu_t.data();
    const auto var = var_t.data();
    for (std::size_t i = 0; i < mu.size(); ++i) {
      worst_mean = std::max(worst_mean, std::abs(mu[i]));
      worst_var = std::max(worst_var, std::abs(var[i] - 1));
    }
    out.push_back({"pmc.moments", worst_mean < 1e-5 && worst_var < 1e-4,
                   fmt("max |mean|", worst_mean, 1e-5) + ", " + fmt("max |var-1|", worst_var, 1e-4)});
    const Tensor<D> mixed_t = mix_features(m, m);
    const auto mixed = mixed_t.data();
    D worst = 0;
    for (std::size_t i = 0; i < mixed.size(); ++i) worst = std::max(worst, std::abs(mixed[i] - z.data()[i]));
    out.push_back({"pmc.identity_mix", worst < 1e-6, fmt("max |mix(A,A) - A|", worst, 1e-6)});

    const Tensor<D> logits = random_tensor({4, 3}, rng, -3, 3, 0);
    Labels a, b;
    a.num_classes = b.num_classes = 3;
    a.classes = {0, 1, 2, 0};
    b.classes = {2, 2, 1, 0};
    const D l1 = mixed_loss(logits, a, b, 0.3).item();
    const D l2 = mixed_loss(logits, b, a, 0.7).item();
    out.push_back({"pmc.symmetry", std::abs(l1 - l2) < 1e-7, fmt("|difference|", std::abs(l1 - l2), 1e-7)});
  }
  Tensor<D> za = z.copy().set_requires_grad(true);
  Tensor<D> zb = random_tensor({2, 6, 3, 3}, rng, -2, 2, 0).set_requires_grad(true);
  const Tensor<D> w = random_tensor({2, 6, 3, 3}, rng);
  sum(mul(mix_features(extract_moments(za, 1e-5), extract_moments(zb, 1e-5)), w)).backward();
  D ga = 0, gb = 0;
  for (D g : za.grad()) ga = std::max(ga, std::abs(g));
  for (D g : zb.grad()) gb = std::max(gb, std::abs(g));
  out.push_back({"pmc.gradient_flow", ga > 0 && gb > 0, fmt("min(max|grad A|, max|grad B|)", std::min(ga, gb), 0)});
  return out;
}

std::vector<CheckResult> attack_checks() {
  Rng rng(31);
  std::vector<CheckResult> out;
  auto model = MedViT<D>::build(ModelConfig::micro(3), 9);
  model.set_training(false);
  model.set_requires_grad(false);
  Classifier<D> f = [&](const Tensor<D>& x) { return model.forward(normalize(x, {0.5}, {0.5})); };
  const Tensor<D> x = random_tensor({2, 3, 16, 16}, rng, 0, 1, 0);
  Labels y;
  y.num_classes = 3;
  y.classes = {1, 2};
  AttackConfig cfg;
  const Tensor<D> adv_t = pgd(f, x, y, cfg);
  const auto adv = adv_t.data();
  D worst = 0;
  bool in_range = true;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    worst = std::max(worst, std::abs(adv[i] - x.data()[i]));
    in_range = in_range && adv[i] >= cfg.clip_min && adv[i] <= cfg.clip_max;
  }
  out.push_back({"attack.eps_ball", worst <= cfg.epsilon + 1e-7 && in_range,
                 fmt("max |x' - x|", worst, cfg.epsilon) + (in_range ? "" : ", outside pixel range")});
  AttackConfig one = cfg;
  one.iterations = 1;
  one.step_size = cfg.epsilon;
  const Tensor<D> a_t = fgsm(f, x, y, cfg), b_t = pgd(f, x, y, one);
  const auto a = a_t.data();
  const auto b = b_t.data();
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i] == b[i];
  out.push_back({"attack.fgsm_is_pgd1", same, same ? "bit-identical" : "outputs differ"});
  return out;
}

CheckResult auc_check() {
  Rng rng(47);
  std::uniform_int_distribution<int> level(0, 9);
  std::uniform_int_distribution<std::size_t> size(2, 50);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = size(rng);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) / 10.0;
      y[i] = static_cast<std::uint8_t>(i == 0 ? 1 : (i == 1 ? 0 : level(rng) % 2));
    }
    const double got = binary_auc(s, y), want = pair_count_auc(s, y);
    if (got != want) return {"metrics.auc_oracle", false, fmt("trial mismatch", got - want, 0)};
  }
  return {"metrics.auc_oracle", true, "100 instances exact"};
}

}  // namespace

std::vector<CheckResult> run_selftest(std::ostream* progress) {
  std::vector<CheckResult> all;
  auto run = [&](auto&& suite) {
    std::vector<CheckResult> part;
    try {
      part = suite();
    } catch (const std::exception& e) {
      part.push_back({"exception", false, e.what()});
    }
    for (auto& c : part) {
      if (progress) *progress << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
      all.push_back(std::move(c));
    }
  };
  run(gradient_checks);
  run(pmc_checks);
  run(attack_checks);
  run([] { return std::vector<CheckResult>{auc_check()}; });
  return all;
}

}  // namespace medvit
