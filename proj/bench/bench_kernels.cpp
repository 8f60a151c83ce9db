#include <benchmark/benchmark.h>

#include <random>

#include "splitstream/kernels.hpp"
#include "splitstream/model.hpp"
#include "splitstream/ops.hpp"
#include "splitstream/tape.hpp"

using namespace splitstream;
namespace k = splitstream::kernels;

namespace {

Tensor random(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Shapes from the half-width VGG at 32x32: {batch, in, out, extent}.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({32, 3, 32, 32})->Args({32, 32, 64, 16})->Args({32, 64, 128, 8});
}

template <Tensor (*Conv)(const Tensor&, const Tensor&, const Tensor*, k::ConvGeometry)>
void BM_Conv2d(benchmark::State& st) {
  const auto x = random({st.range(0), st.range(1), st.range(3), st.range(3)}, 1);
  const auto w = random({st.range(2), st.range(1), 3, 3}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(Conv(x, w, nullptr, {1, 1, 0}));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <Tensor (*Back)(const Tensor&, const Tensor&, k::ConvGeometry, const Shape&)>
void BM_Conv2dBackwardWeight(benchmark::State& st) {
  const auto x = random({st.range(0), st.range(1), st.range(3), st.range(3)}, 1);
  const auto gy = random({st.range(0), st.range(2), st.range(3), st.range(3)}, 2);
  const Shape ws{st.range(2), st.range(1), 3, 3};
  for (auto _ : st) benchmark::DoNotOptimize(Back(gy, x, {1, 1, 0}, ws));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <Tensor (*Gemm)(const Tensor&, const Tensor&, bool, bool)>
void BM_Gemm(benchmark::State& st) {
  const auto n = st.range(0);
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(Gemm(a, b, false, false));
  st.SetItemsProcessed(st.iterations() * n * n * n);
}

template <Tensor (*Pool)(const Tensor&, int, int, std::vector<std::int64_t>*)>
void BM_MaxPool(benchmark::State& st) {
  const auto x = random({32, 64, 16, 16}, 3);
  std::vector<std::int64_t> arg;
  for (auto _ : st) benchmark::DoNotOptimize(Pool(x, 2, 2, &arg));
}

// One training step of the client half (split at 5) over a batch.
void BM_ClientStep(benchmark::State& st) {
  const auto layers = build_vgg11_like(2, 0.5);
  const auto model = split_at(layers, 5, {}, {3, 32, 32});
  auto params = init_split_params(model, 1);
  const auto x = random({st.range(0), 3, 32, 32}, 4);
  for (auto _ : st) {
    Tape tape;
    const auto out = client_forward(tape, tape.constant(x), model, params.client, ops::Mode::Train);
    tape.backward({{out.l_c, Tensor(tape.value(out.l_c).shape(), 1e-3f)}});
    params.client.zero_grad();
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

}  // namespace

BENCHMARK(BM_Conv2d<k::reference::conv2d>)->Name("conv2d/reference")->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2d<k::parallel::conv2d>)->Name("conv2d/parallel")->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dBackwardWeight<k::reference::conv2d_backward_weight>)
    ->Name("conv2d_backward_weight/reference")
    ->Apply(conv_args)
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dBackwardWeight<k::parallel::conv2d_backward_weight>)
    ->Name("conv2d_backward_weight/parallel")
    ->Apply(conv_args)
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<k::reference::gemm>)->Name("gemm/reference")->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<k::parallel::gemm>)->Name("gemm/parallel")->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MaxPool<k::reference::maxpool2d>)->Name("maxpool2d/reference")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MaxPool<k::parallel::maxpool2d>)->Name("maxpool2d/parallel")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ClientStep)->Name("client_step/parallel")->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
