#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "modprobe/matrix.hpp"

namespace modprobe {

// Weights are (out x in); a row holds one output unit's fan-in.
struct DenseLayer {
  Matrix weights;
  std::vector<double> bias;
};

// 3x3 kernels, stride 1, zero padding ("same" shape). Kernels are stored
// row-major as (out, in, 3, 3); activations flow through in NHWC order.
struct Conv2DLayer {
  int out_channels = 0;
  int in_channels = 0;
  std::vector<double> kernels;
  std::vector<double> bias;

  double& k(int o, int i, int kh, int kw) {
    return kernels[((static_cast<std::size_t>(o) * in_channels + i) * 3 + kh) * 3 + kw];
  }
  double k(int o, int i, int kh, int kw) const {
    return kernels[((static_cast<std::size_t>(o) * in_channels + i) * 3 + kh) * 3 + kw];
  }
};

// Inference-only: y = gamma * (x - mean) / (std + epsilon) + beta.
struct BatchNormLayer {
  std::vector<double> gamma, beta, mean, stddev;
  double epsilon = 1e-3;
};

struct ReLULayer {};
struct MaxPool2x2Layer {};  // 2x2 window, stride 2; ties go to the first maximal entry in scan order
struct FlattenLayer {};
struct SoftmaxOutputLayer {};

using LayerSpec = std::variant<DenseLayer, Conv2DLayer, BatchNormLayer, ReLULayer,
                               MaxPool2x2Layer, FlattenLayer, SoftmaxOutputLayer>;

struct InputShape {
  int height = 1, width = 1, channels = 1;
  int flat() const { return height * width * channels; }
};

struct NetworkModel {
  InputShape input;
  std::vector<LayerSpec> layers;
  int class_count = 0;
};

// Activation shape between layers; dense vectors are (1, 1, units).
struct TensorShape {
  int height = 1, width = 1, channels = 1;
  int flat() const { return height * width * channels; }
  bool operator==(const TensorShape&) const = default;
};

// Shape after each layer (result[i] is the output of layers[i]). Throws
// InvalidArgument when adjacent layers do not compose.
std::vector<TensorShape> layer_shapes(const NetworkModel& model);

// Structural checks: shapes compose, exactly one terminal softmax, class
// count matches the last dense layer. Throws InvalidArgument on violation.
void validate_model(const NetworkModel& model);

// A "neuron layer" is a place where lesioning, graph nodes and activation
// probes live: the input vector, each dense layer's units, each conv layer's
// channels, and the logits.
struct NeuronLayer {
  int id = 0;            // position in neuron_layers(model)
  int width = 0;         // dense units or conv channels
  int weight_layer = -1; // index in model.layers of the producing Dense/Conv; -1 = input
  int relu_layer = -1;   // index of the ReLU consuming it; -1 for input and logits
  bool conv = false;     // channel-typed (conv) rather than unit-typed (dense/input)
  int map_height = 1, map_width = 1;  // spatial size at the capture point
};

std::vector<NeuronLayer> neuron_layers(const NetworkModel& model);

// Neurons selected for analysis: `neurons` indexes into the given neuron
// layer (units or channels).
struct Subcluster {
  int layer = 0;
  std::vector<int> neurons;
  int cluster_id = -1;
};

// Per-batch captures from a forward pass. pre_relu[i] is the input to the
// ReLU at layer index i (empty elsewhere); conv captures keep the full
// spatial map per channel, flattened NHWC.
struct ActivationRecord {
  std::vector<Matrix> pre_relu;
  Matrix logits;
  Matrix softmax;
};

struct ComputeOptions {
  // Run conv GEMMs in single precision (master values stay double). Training
  // throughput on wide conv stacks roughly doubles; gradient checks and
  // default inference keep full precision.
  bool conv_gemm_f32 = false;
};

// Forward pass over a batch (one flattened example per row).
ActivationRecord forward(const NetworkModel& model, const Matrix& batch,
                         const ComputeOptions& opts = {});

// Per-example series for one neuron layer, used by activation graphs:
// input -> the raw input values, hidden -> pre-ReLU (conv: L1 over the
// spatial map per channel), logits layer -> logits.
Matrix node_series(const NetworkModel& model, const ActivationRecord& record,
                   const Matrix& batch, const NeuronLayer& layer);

// Mean cross-entropy of the batch and the fraction of correct argmax rows.
struct BatchEval {
  double loss = 0.0;
  double accuracy = 0.0;
};
BatchEval evaluate_batch(const NetworkModel& model, const Matrix& batch,
                         std::span<const int> labels, const ComputeOptions& opts = {});

// Gradients mirror the trainable tensors: w[i]/b[i] align with layers[i] and
// stay empty for parameter-free layers.
struct Gradients {
  std::vector<std::vector<double>> w, b;
};

struct LossGradients {
  double loss = 0.0;
  double accuracy = 0.0;
  Gradients grads;
};

// Mean cross-entropy loss gradients for every trainable tensor.
LossGradients param_gradients(const NetworkModel& model, const Matrix& batch,
                              std::span<const int> labels, const ComputeOptions& opts = {});

// Sum of |pre-ReLU activation| over the subcluster (conv: whole channel maps),
// evaluated on a single example.
double subcluster_l1(const NetworkModel& model, std::span<const double> image,
                     const Subcluster& sub);

// d subcluster_l1 / d image, with the subgradient of |.| taken as 0 at 0.
std::vector<double> input_gradient(const NetworkModel& model, std::span<const double> image,
                                   const Subcluster& sub);

// Per-neuron-layer drop flags; true means the neuron is severed.
struct LesionMask {
  std::vector<std::vector<bool>> drop;  // indexed by neuron layer id
};

LesionMask make_mask(const NetworkModel& model, const Subcluster& sub);
LesionMask merge_masks(const LesionMask& a, const LesionMask& b);

// Copy of the model with incoming weight rows (and biases) and outgoing
// weight columns of every dropped neuron set to zero. Batch-norm parameters
// are left alone; cutting both weight sides already silences the neuron's
// influence.
NetworkModel mask_neurons(const NetworkModel& model, const LesionMask& mask);
NetworkModel mask_neurons(const NetworkModel& model, const Subcluster& sub);

// Binary model file round-trip. Little-endian, magic "NNMOD1\0\0", layer list
// with shape headers and float32 tensors, CRC32 of the payload at the end.
void save_model(const NetworkModel& model, const std::filesystem::path& path);
NetworkModel load_model(const std::filesystem::path& path);

}  // namespace modprobe
