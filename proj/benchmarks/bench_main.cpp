#include <benchmark/benchmark.h>

#include "bunet/bayes.hpp"
#include "bunet/nn.hpp"
#include "bunet/random.hpp"
#include "bunet/tensor.hpp"
#include "bunet/unet.hpp"

namespace {

using namespace bunet;

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

// Args: channels, spatial size.
void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const Tensor x = random_tensor({4, c, s, s}, rng);
  const Tensor w = random_tensor({c, c, 5, 5}, rng);
  const Tensor b = random_tensor({c}, rng);
  NoGradScope no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b));
  state.SetItemsProcessed(state.iterations() * 4 * static_cast<std::int64_t>(s * s));
}
BENCHMARK(BM_Conv2dForward)->Args({8, 64})->Args({16, 64})->Args({32, 32})->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Rng rng(2);
  Tensor x = random_tensor({4, c, s, s}, rng, true);
  Tensor w = random_tensor({c, c, 5, 5}, rng, true);
  Tensor b = random_tensor({c}, rng, true);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = sum(conv2d(x, w, b));
    backward(loss, tape);
    benchmark::DoNotOptimize(w.grad().data());
    x.clear_grad();
    w.clear_grad();
    b.clear_grad();
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({8, 64})->Args({16, 64})->Args({32, 32})->Unit(benchmark::kMillisecond);

// Arg: base filters. 128x128 single image, default depth and kernel.
void BM_UNetForward(benchmark::State& state) {
  UNetSpec spec;
  spec.base_filters = static_cast<std::size_t>(state.range(0));
  UNet net(spec, 3);
  Rng rng(4);
  const Tensor x = random_tensor({1, 1, 128, 128}, rng);
  NoGradScope no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, {DropoutMode::active, BnMode::eval}, rng));
}
BENCHMARK(BM_UNetForward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_McSample(benchmark::State& state) {
  UNetSpec spec;
  spec.base_filters = 8;
  UNet net(spec, 5);
  Rng rng(6);
  const Tensor x = random_tensor({1, 1, 128, 128}, rng);
  const auto passes = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    const auto set = mc_sample(net, x, passes, 100);
    benchmark::DoNotOptimize(posterior_variance(set));
  }
}
BENCHMARK(BM_McSample)->Arg(5)->Arg(20)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
