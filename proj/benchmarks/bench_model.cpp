#include <benchmark/benchmark.h>

#include "modprobe/model.hpp"
#include "modprobe/rng.hpp"
#include "modprobe/trainer.hpp"

namespace {

modprobe::Matrix random_batch(int rows, int cols, std::uint64_t seed) {
  modprobe::Rng rng(seed);
  modprobe::Matrix batch(rows, cols);
  for (double& x : batch.values) x = rng.uniform(0.0, 1.0);
  return batch;
}

void BM_forward_mlp(benchmark::State& state) {
  modprobe::ArchitectureSpec arch;
  arch.name = "mlp-256x4";
  arch.input = {28, 28, 1};
  modprobe::NetworkModel model = modprobe::init_params(arch, 3);
  const modprobe::Matrix batch = random_batch(static_cast<int>(state.range(0)), 784, 5);
  for (auto _ : state) {
    modprobe::ActivationRecord rec = modprobe::forward(model, batch);
    benchmark::DoNotOptimize(rec.logits.values.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_forward_mlp)->Arg(128)->Arg(2048);

void BM_forward_cnn(benchmark::State& state) {
  modprobe::ArchitectureSpec arch;
  arch.name = "cnn-small";
  arch.input = {28, 28, 1};
  modprobe::NetworkModel model = modprobe::init_params(arch, 3);
  const modprobe::Matrix batch = random_batch(static_cast<int>(state.range(0)), 784, 5);
  modprobe::ComputeOptions opts;
  opts.conv_gemm_f32 = state.range(1) != 0;
  for (auto _ : state) {
    modprobe::ActivationRecord rec = modprobe::forward(model, batch, opts);
    benchmark::DoNotOptimize(rec.logits.values.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
  state.SetLabel(opts.conv_gemm_f32 ? "f32-gemm" : "f64-gemm");
}
BENCHMARK(BM_forward_cnn)->Args({64, 0})->Args({64, 1})->Unit(benchmark::kMillisecond);

void BM_param_gradients_mlp(benchmark::State& state) {
  modprobe::ArchitectureSpec arch;
  arch.name = "mlp-256x4";
  arch.input = {28, 28, 1};
  modprobe::NetworkModel model = modprobe::init_params(arch, 3);
  const modprobe::Matrix batch = random_batch(128, 784, 5);
  std::vector<int> labels(128);
  modprobe::Rng rng(9);
  for (int& l : labels) l = static_cast<int>(rng.below(10));
  for (auto _ : state) {
    modprobe::LossGradients lg = modprobe::param_gradients(model, batch, labels);
    benchmark::DoNotOptimize(lg.grads.w.data());
  }
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_param_gradients_mlp);

}  // namespace
