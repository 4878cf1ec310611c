#include <benchmark/benchmark.h>

#include "modprobe/data.hpp"
#include "modprobe/graph.hpp"
#include "modprobe/rng.hpp"
#include "modprobe/trainer.hpp"

namespace {

modprobe::NetworkModel make_mlp() {
  modprobe::ArchitectureSpec arch;
  arch.name = "mlp-256x4";
  arch.input = {28, 28, 1};
  return modprobe::init_params(arch, 3);
}

modprobe::LabeledDataset random_dataset(std::size_t n) {
  modprobe::LabeledDataset data;
  data.height = 28;
  data.width = 28;
  data.channels = 1;
  data.class_count = 10;
  modprobe::Rng rng(21);
  data.images.resize(n * 784);
  for (float& x : data.images) x = static_cast<float>(rng.uniform(0.0, 1.0));
  data.labels.resize(n);
  for (int& l : data.labels) l = static_cast<int>(rng.below(10));
  return data;
}

void BM_weight_graph(benchmark::State& state) {
  const modprobe::NetworkModel model = make_mlp();
  for (auto _ : state) {
    modprobe::NeuronGraph g = modprobe::weight_graph(model);
    benchmark::DoNotOptimize(g.nodes.data());
  }
}
BENCHMARK(BM_weight_graph)->Unit(benchmark::kMillisecond);

void BM_activation_graph(benchmark::State& state) {
  const modprobe::NetworkModel model = make_mlp();
  const modprobe::LabeledDataset data = random_dataset(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    modprobe::NeuronGraph g = modprobe::activation_graph(model, data);
    benchmark::DoNotOptimize(g.nodes.data());
  }
}
BENCHMARK(BM_activation_graph)->Arg(2000)->Unit(benchmark::kMillisecond);

void BM_ncut(benchmark::State& state) {
  const modprobe::NetworkModel model = make_mlp();
  const modprobe::NeuronGraph g = modprobe::weight_graph(model);
  std::vector<int> labels(g.node_count());
  modprobe::Rng rng(23);
  for (int& l : labels) l = static_cast<int>(rng.below(16));
  for (auto _ : state) {
    const double v = modprobe::ncut(g, labels, 16);
    benchmark::DoNotOptimize(v);
  }
}
BENCHMARK(BM_ncut);

}  // namespace
