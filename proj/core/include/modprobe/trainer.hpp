#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modprobe/data.hpp"
#include "modprobe/model.hpp"

namespace modprobe {

// "mlp-<width>x<depth>" (e.g. mlp-256x4): that many ReLU hidden layers on a
// flattened input. "cnn-small": three 3x3 conv layers of 64 channels with
// max-pooling after the second and third, then a dense ReLU layer of 128.
struct ArchitectureSpec {
  std::string name = "mlp-256x4";
  InputShape input{28, 28, 1};
  int class_count = 10;
};

// Builds the architecture with Glorot-uniform weights and zero biases.
NetworkModel init_params(const ArchitectureSpec& arch, std::uint64_t seed);

// Glorot-uniform re-init of an assembled model (biases zeroed).
void glorot_init(NetworkModel& model, std::uint64_t seed);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::uint64_t seed = 1;
  ComputeOptions compute;
};

// Per-architecture defaults: epochs/batch size differ between the MLP and
// CNN recipes; the optimizer settings are shared.
TrainConfig default_train_config(const std::string& arch_name);

struct AdamState {
  std::vector<std::vector<double>> m_w, v_w, m_b, v_b;
  long long step = 0;
};

AdamState make_adam_state(const NetworkModel& model);

// One Adam update; bias correction uses the global step count.
void adam_step(NetworkModel& model, const Gradients& grads, AdamState& state,
               const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;  // NaN when no eval set was given
};

struct TrainResult {
  std::vector<EpochLog> log;
};

// Mini-batch training with a fresh shuffle every epoch (epoch shuffles are
// seeded with seed XOR epoch). The last short batch is used, not dropped.
// `on_epoch`, when set, runs after each epoch (progress reporting).
TrainResult train(NetworkModel& model, const LabeledDataset& train_data,
                  const TrainConfig& cfg, const LabeledDataset* eval_data = nullptr,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

void save_train_log(const TrainResult& result, const std::filesystem::path& path,
                    const std::string& header_comment);

}  // namespace modprobe
