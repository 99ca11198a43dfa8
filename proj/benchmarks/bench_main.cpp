#include <benchmark/benchmark.h>

#include <random>

#include "emma/ensemble.hpp"
#include "emma/metrics.hpp"
#include "emma/ops.hpp"

using namespace emma;

namespace {

template <typename T>
Tensor<T> noise(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<T> nd;
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = nd(rng);
  return t;
}

// Forward + backward of one same-padded 3x3x3 conv, C -> C channels on S^3.
void BM_Conv3dForwardBackward(benchmark::State& state) {
  const auto S = static_cast<std::size_t>(state.range(0)), C = static_cast<std::size_t>(state.range(1));
  const auto x = noise<float>({C, S, S, S}, 1);
  const auto w = noise<float>({C, C, 3, 3, 3}, 2);
  for (auto _ : state) {
    Tape<float> t;
    auto xv = t.leaf(x, true);
    auto wv = t.leaf(w, true);
    auto y = conv3d(t, xv, wv, {1, 1, 1}, Padding::zero_same);
    t.backward(sum(t, y));
    benchmark::DoNotOptimize(t.grad(wv));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(S * S * S * C * C * 27));
}
BENCHMARK(BM_Conv3dForwardBackward)->Args({16, 8})->Args({32, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);

void BM_Hausdorff95(benchmark::State& state) {
  const auto S = static_cast<std::size_t>(state.range(0));
  Mask a({S, S, S}, std::uint8_t{0}), b({S, S, S}, std::uint8_t{0});
  const double r = S / 3.0, c = S / 2.0;
  std::size_t k = 0;
  for (std::size_t z = 0; z < S; ++z)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x, ++k) {
        const double dz = z - c, dy = y - c, dx = x - c;
        a[k] = dz * dz + dy * dy + dx * dx < r * r;
        b[k] = (dz - 2) * (dz - 2) + dy * dy + dx * dx < 0.8 * r * r;
      }
  for (auto _ : state) benchmark::DoNotOptimize(hausdorff95(a, b).value);
}
BENCHMARK(BM_Hausdorff95)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_AverageConfidences(benchmark::State& state) {
  const auto members = static_cast<std::size_t>(state.range(0));
  std::vector<Tensor<double>> maps;
  for (std::size_t m = 0; m < members; ++m) maps.push_back(noise<double>({4, 48, 48, 48}, m));
  std::vector<const Tensor<double>*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m);
  for (auto _ : state) benchmark::DoNotOptimize(average_confidences(ptrs));
}
BENCHMARK(BM_AverageConfidences)->Arg(3)->Arg(7)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
