#include <benchmark/benchmark.h>

#include <vector>

#include "modprobe/blas.hpp"
#include "modprobe/rng.hpp"

namespace {

void fill(std::vector<double>& v, modprobe::Rng& rng) {
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
}

void BM_dgemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  modprobe::Rng rng(7);
  std::vector<double> a(static_cast<std::size_t>(n) * n), b(a.size()), c(a.size());
  fill(a, rng);
  fill(b, rng);
  for (auto _ : state) {
    modprobe::dgemm(false, false, n, n, n, 1.0, a.data(), n, b.data(), n, 0.0,
                    c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * n * n * n);
  state.SetLabel(modprobe::blas_backend());
}
BENCHMARK(BM_dgemm)->Arg(256)->Arg(1024);

void BM_sgemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  modprobe::Rng rng(7);
  std::vector<float> a(static_cast<std::size_t>(n) * n), b(a.size()), c(a.size());
  for (float& x : a) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (float& x : b) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (auto _ : state) {
    modprobe::sgemm(false, false, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f,
                    c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * n * n * n);
  state.SetLabel(modprobe::blas_backend());
}
BENCHMARK(BM_sgemm)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
