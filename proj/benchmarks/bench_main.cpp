#include <random>

#include <benchmark/benchmark.h>

#include "pfq/executor.hpp"
#include "pfq/ops.hpp"
#include "pfq/passes.hpp"
#include "pfq/pfq.hpp"
#include "pfq/quantizer.hpp"
#include "pfq/zoo.hpp"

namespace {

pfq::Tensor random_tensor(pfq::Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  pfq::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const pfq::Tensor x = random_tensor({8, c, 16, 16}, 1);
  pfq::ConvParams p{random_tensor({c, c, 3, 3}, 2), std::nullopt};
  const pfq::ConvGeometry g{1, 1, 1, 1};
  for (auto _ : state) benchmark::DoNotOptimize(pfq::conv2d_forward(x, p, g));
  state.SetItemsProcessed(state.iterations() * 8 * c * c * 9 * 256);
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(32);

void BM_Depthwise3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const pfq::Tensor x = random_tensor({8, c, 16, 16}, 1);
  pfq::DepthwiseConvParams p{random_tensor({c, 1, 3, 3}, 2), std::nullopt};
  const pfq::ConvGeometry g{1, 1, 1, 1};
  for (auto _ : state) benchmark::DoNotOptimize(pfq::depthwise_conv2d_forward(x, p, g));
}
BENCHMARK(BM_Depthwise3x3)->Arg(32)->Arg(64);

void BM_Quantize(benchmark::State& state) {
  const pfq::Tensor x = random_tensor({static_cast<std::size_t>(state.range(0))}, 3);
  pfq::QuantConfig cfg;
  cfg.bits = 4;
  cfg.lower = -2.0;
  cfg.upper = 2.0;
  for (auto _ : state) benchmark::DoNotOptimize(pfq::quantize(x, cfg));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Quantize)->Arg(1 << 12)->Arg(1 << 16);

void BM_TrainStep(benchmark::State& state) {
  pfq::ModelGraph g = pfq::make_dwsep_net({}, 4);
  const pfq::Tensor x = random_tensor({16, 3, 16, 16}, 5);
  pfq::ForwardOptions opt;
  opt.training = true;
  for (auto _ : state) {
    const pfq::Tape tape = pfq::forward(g, x, opt);
    benchmark::DoNotOptimize(pfq::backward(g, tape, tape.outputs.back()));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_PfqPass(benchmark::State& state) {
  pfq::DwSepNetSpec spec;
  spec.dead_channels_per_block = 2;
  pfq::ModelGraph g = pfq::make_dwsep_net(spec, 6);
  // Force the dead channels' downstream variances under epsilon.
  for (auto& l : g.layers) {
    if (l.name.ends_with(".dw_bn")) {
      auto& bn = l.as<pfq::BatchNormLayer>().params;
      bn.running_var[0] = 0.0;
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(pfq::apply_pfq(g, {}));
}
BENCHMARK(BM_PfqPass)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
