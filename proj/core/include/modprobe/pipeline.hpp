#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modprobe/data.hpp"
#include "modprobe/graph.hpp"
#include "modprobe/stats.hpp"

namespace modprobe {

// Flat key=value run configuration. `workers` and `out` are execution
// details and stay out of the config hash.
struct RunConfig {
  std::string dataset = "mnist";  // mnist | halves
  std::string mnist_dir = "data/mnist";
  std::string arch = "mlp-256x4";
  int replicates = 5;
  int k = 16;
  std::vector<int> k_sweep;  // empty: single k; else one analysis pass per value
  std::vector<std::string> methods = {"weights-global", "weights-local",
                                      "activations-global", "activations-local"};
  std::vector<Metric> metrics = {Metric::acc_drop, Metric::class_range,
                                 Metric::vis_score, Metric::softmax_entropy};
  std::uint64_t seed = 1;
  std::string out = "out";
  int workers = 0;  // 0: MODPROBE_WORKERS env var, else 1
  double val_fraction = 0.1;
  int vis_steps = 100;
  int epochs = 0;      // 0: architecture default
  int batch_size = 0;  // 0: architecture default
  double learning_rate = 0.001;
  bool conv_gemm_f32 = true;  // float32 GEMM path for conv forward passes
  double alpha = 0.05;
};

struct Method {
  GraphBasis basis = GraphBasis::weights;
  bool local = false;
};
Method parse_method(const std::string& name);
std::string basis_name(GraphBasis basis);

// Configuration handling. Unknown keys and malformed values raise
// InvalidArgument (a usage error at the CLI).
RunConfig load_config_file(const std::filesystem::path& path);
void apply_config_override(RunConfig& cfg, const std::string& key,
                           const std::string& value);
void resolve_config(RunConfig& cfg);  // arch defaults, MODPROBE_WORKERS
void validate_config(const RunConfig& cfg);
std::string serialize_config(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);  // 16 hex digits, FNV-1a

// Train/validation/test triple assembled per the config (MNIST IDX files,
// optionally recombined into the halves task).
struct PipelineData {
  LabeledDataset train, validation, test;
};
PipelineData load_pipeline_data(const RunConfig& cfg);

// Cheap existence check for the four IDX files (plain or .gz); raises
// InvalidArgument naming the first missing one.
void preflight_dataset(const RunConfig& cfg);

// Runs `fn(0..tasks-1)` across up to `workers` threads. Tasks must be
// independent; the first exception is rethrown after all workers stop.
void parallel_for(int tasks, int workers, const std::function<void(int)>& fn);

// Pipeline stages. Each stage re-reads its inputs from the output directory,
// writes its artifacts, and maintains the INCOMPLETE marker; failures are
// rethrown as runtime errors naming the stage.
void run_train(const RunConfig& cfg);
void run_graphify(const RunConfig& cfg);
void run_cluster(const RunConfig& cfg);
void run_lesion(const RunConfig& cfg);
void run_featvis(const RunConfig& cfg);
void run_corrvis(const RunConfig& cfg);
void run_stats(const RunConfig& cfg);
void run_report(const RunConfig& cfg);
void run_all(const RunConfig& cfg);

}  // namespace modprobe
