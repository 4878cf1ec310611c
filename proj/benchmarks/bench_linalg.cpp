#include <benchmark/benchmark.h>

#include "modprobe/linalg.hpp"
#include "modprobe/matrix.hpp"
#include "modprobe/rng.hpp"

namespace {

void BM_sym_eig(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  modprobe::Rng rng(11);
  modprobe::Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = a(j, i) = rng.uniform(-1.0, 1.0);
  for (auto _ : state) {
    modprobe::EigenResult eig = modprobe::sym_eig(a);
    benchmark::DoNotOptimize(eig.eigenvalues.data());
  }
}
BENCHMARK(BM_sym_eig)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_kmeans(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  modprobe::Rng rng(13);
  modprobe::Matrix pts(n, 16);
  for (double& x : pts.values) x = rng.uniform(-1.0, 1.0);
  for (auto _ : state) {
    std::vector<int> labels = modprobe::kmeans(pts, 12, 1);
    benchmark::DoNotOptimize(labels.data());
  }
}
BENCHMARK(BM_kmeans)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_standardized_rank_rows(benchmark::State& state) {
  const std::size_t samples = static_cast<std::size_t>(state.range(0));
  modprobe::Rng rng(17);
  modprobe::Matrix series(samples, 256);
  for (double& x : series.values) x = rng.uniform(-1.0, 1.0);
  for (auto _ : state) {
    modprobe::RankRows rr = modprobe::standardized_rank_rows(series);
    benchmark::DoNotOptimize(rr.rows.values.data());
  }
}
BENCHMARK(BM_standardized_rank_rows)->Arg(6000)->Unit(benchmark::kMillisecond);

}  // namespace
