#include <benchmark/benchmark.h>

#include "protodist/autodiff.hpp"
#include "protodist/distill_loss.hpp"
#include "protodist/eval.hpp"
#include "protodist/models.hpp"
#include "protodist/rng.hpp"
#include "protodist/synthdata.hpp"

using namespace protodist;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  ad::NodePtr input = ad::leaf(random_tensor({4, 8, 48, 48}, 1));
  ad::NodePtr kernel = ad::leaf(random_tensor({16, 8, 3, 3}, 2));
  ad::NodePtr bias = ad::leaf(random_tensor({16}, 3));
  for (auto _ : state) {
    benchmark::DoNotOptimize(ad::conv(input, kernel, bias, 2));
  }
  state.SetItemsProcessed(state.iterations() * 4 * 16 * 8 * 9 * 48 * 48);
}
BENCHMARK(BM_Conv2dForward);

void BM_Conv3dForward(benchmark::State& state) {
  ad::NodePtr input = ad::leaf(random_tensor({1, 8, 24, 48, 48}, 1));
  ad::NodePtr kernel = ad::leaf(random_tensor({16, 8, 3, 3, 3}, 2));
  ad::NodePtr bias = ad::leaf(random_tensor({16}, 3));
  for (auto _ : state) {
    benchmark::DoNotOptimize(ad::conv(input, kernel, bias, 3));
  }
  state.SetItemsProcessed(state.iterations() * 16 * 8 * 27 * 24 * 48 * 48);
}
BENCHMARK(BM_Conv3dForward);

void BM_StudentStep(benchmark::State& state) {
  const NetworkParams net = init_network(Arch::student2d, 4, 42);
  const Tensor input = random_tensor({4, 1, 48, 48}, 7);
  Tensor labels({4, 48, 48});
  Rng rng(8);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<double>(rng.below(5));
  LossWeights w;
  for (auto _ : state) {
    ad::NodePtr logits = forward(net, ad::leaf(input));
    ad::NodePtr loss = seg_loss(logits, labels, w);
    ad::backward(loss);
    benchmark::DoNotOptimize(loss->value[0]);
  }
}
BENCHMARK(BM_StudentStep);

void BM_GenVolume(benchmark::State& state) {
  PhantomSpec spec;
  std::uint64_t seed = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(gen_volume(spec, seed++ * 2 + 1));
  }
}
BENCHMARK(BM_GenVolume);

void BM_PearsonGraph(benchmark::State& state) {
  const Tensor xv = random_tensor({5}, 11);
  std::vector<double> y{0.1, 0.7, -0.3, 0.2, 0.9};
  for (auto _ : state) {
    ad::NodePtr x = ad::leaf(xv);
    ad::NodePtr d = pearson_distance(x, y);
    ad::backward(d);
    benchmark::DoNotOptimize(d->value[0]);
  }
}
BENCHMARK(BM_PearsonGraph);

void BM_Dsc(benchmark::State& state) {
  Tensor a({48, 48}), b({48, 48});
  Rng rng(5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<double>(rng.below(5));
    b[i] = static_cast<double>(rng.below(5));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(dsc(a, b, 2));
  }
}
BENCHMARK(BM_Dsc);

}  // namespace

BENCHMARK_MAIN();
