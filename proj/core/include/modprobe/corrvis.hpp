#pragma once

#include <vector>

#include "modprobe/data.hpp"
#include "modprobe/graph.hpp"
#include "modprobe/model.hpp"

namespace modprobe {

// Per-pixel Spearman correlation between pixel value and a neuron's pre-ReLU
// activation. Values in [-1, 1]; constant pixels or a constant neuron give 0.
struct NeuronCorrelationMap {
  int layer = -1;
  int neuron = -1;
  std::vector<double> values;  // h*w*c, row-major like the input
};

// One map per neuron of a dense layer, computed in a single rank/GEMM pass.
// Row u of the result is neuron u's map.
Matrix layer_pixel_maps(const NetworkModel& model, const LabeledDataset& data, int layer);

NeuronCorrelationMap neuron_pixel_map(const NetworkModel& model, const LabeledDataset& data,
                                      NodeId neuron);

// Sweeps maps in index order: flip v_i when its summed cosine against the
// rest is strictly negative. Zero-norm maps neither flip nor contribute.
std::vector<std::vector<double>> sign_align(const std::vector<std::vector<double>>& maps,
                                            int iters = 20);

// Mean of the sign-aligned neuron maps of a subcluster, min-max rescaled to
// [0,1]; a constant mean comes back as all 0.5.
std::vector<double> cluster_visualization(const NetworkModel& model,
                                          const LabeledDataset& data, const Subcluster& sub);

// Same, reusing a layer_pixel_maps result (row per neuron of sub's layer).
std::vector<double> cluster_visualization(const Matrix& layer_maps, const Subcluster& sub);

// |mL - mR| / (mL + mR) over the L1 masses of |image - 0.5| on the left and
// right halves; 0 when the image is exactly flat 0.5.
double side_selectivity(const std::vector<double>& image, int height, int width);

}  // namespace modprobe
