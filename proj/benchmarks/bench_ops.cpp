#include <benchmark/benchmark.h>

#include <random>

#include "medvit/losses.hpp"
#include "medvit/model.hpp"
#include "medvit/nn.hpp"
#include "medvit/ops.hpp"
#include "medvit/optim.hpp"

using namespace medvit;

namespace {

Tensor<float> random_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<float>(std::move(shape), std::move(v));
}

nn::Conv2dParams<float> conv(std::size_t c, std::size_t k, std::size_t groups) {
  Rng rng(1);
  nn::Conv2dOptions o;
  o.in_channels = o.out_channels = c;
  o.kernel_h = o.kernel_w = k;
  o.padding = k / 2;
  o.groups = groups;
  return nn::Conv2dParams<float>::init(o, rng);
}

}  // namespace

static void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto p = conv(c, 3, 1);
  const Tensor<float> x = random_input({8, c, 28, 28}, 2);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d(x, p));
  state.SetItemsProcessed(state.iterations() * 8 * c * c * 9 * 28 * 28);
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Depthwise3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto p = conv(c, 3, c);
  const Tensor<float> x = random_input({8, c, 28, 28}, 3);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d(x, p));
}
BENCHMARK(BM_Depthwise3x3)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

static void BM_EsaForward(benchmark::State& state) {
  Rng rng(4);
  auto esa = Esa<float>::init(64, 8, static_cast<std::size_t>(state.range(0)), rng);
  const Tensor<float> x = random_input({4, 64, 14, 14}, 5);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(esa.forward(x));
}
BENCHMARK(BM_EsaForward)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

static void BM_ToyTrainStep(benchmark::State& state) {
  auto model = MedViT<float>::build(ModelConfig::medvit(Variant::Toy, 4), 6);
  AdamW<float> opt(model.parameters(), AdamWConfig{});
  const Tensor<float> x = random_input({16, 3, 32, 32}, 7);
  Labels y;
  y.num_classes = 4;
  for (std::uint16_t i = 0; i < 16; ++i) y.classes.push_back(i % 4);
  for (auto _ : state) {
    model.zero_grad();
    Tensor<float> loss = classification_loss(model.forward(x), y);
    loss.backward();
    opt.step(1e-3);
  }
}
BENCHMARK(BM_ToyTrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
