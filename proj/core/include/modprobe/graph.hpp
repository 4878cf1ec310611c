#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "modprobe/data.hpp"
#include "modprobe/matrix.hpp"
#include "modprobe/model.hpp"

namespace modprobe {

enum class GraphBasis { weights, activations };

struct NodeId {
  int layer = 0;
  int index = 0;
  bool operator==(const NodeId&) const = default;
};

// Undirected weighted graph over neurons. Nodes enumerate the universe
// layer-major; adjacency is stored per node, sorted by neighbor, with each
// edge present in both endpoint lists. Weights are >= 0 and zero-weight pairs
// are omitted. local_layer is -1 for global scope.
struct NeuronGraph {
  GraphBasis basis = GraphBasis::weights;
  int local_layer = -1;
  std::vector<int> layer_ids;
  std::vector<int> layer_widths;
  std::vector<NodeId> nodes;
  std::vector<std::vector<std::pair<int, double>>> adj;

  std::size_t node_count() const { return nodes.size(); }
  std::size_t edge_count() const;
  int node_index(NodeId id) const;  // -1 when absent
  double degree(int node) const;
  Matrix dense_weights() const;
  void check() const;  // symmetry, non-negativity, no self-loops
};

// Neuron layers contributing graph nodes: all dense-path layers (input and
// logits included) for pure-dense models; conv channels only when the model
// has conv layers.
std::vector<int> node_universe(const NetworkModel& model);

// |weight| edges between consecutive universe layers. Dense-dense edges are
// |W[j,i]|; conv-conv edges the L1 norm of the 3x3 kernel slice; a batch-norm
// between the weight layer and its ReLU scales edges into neuron j by
// gamma_j/(sigma_j+eps) before the absolute value. Pooling and flatten are
// transparent. Needs no data.
NeuronGraph weight_graph(const NetworkModel& model);

// Squared Spearman correlation of pre-ReLU activation series (conv channels:
// per-example L1 of the spatial map) for every node pair in the universe.
// Constant series contribute no edges. Requires >= 100 examples.
NeuronGraph activation_graph(const NetworkModel& model, const LabeledDataset& validation);

// Graph over the neurons of hidden universe layer l and its universe
// neighbors (clipped at the ends). Weight basis: the global weight graph
// restricted to the node set; activation basis: all pairwise edges within
// the node set.
NeuronGraph local_subgraph(GraphBasis basis, const NetworkModel& model,
                           const LabeledDataset* validation, int l);

// Normalized cut of the labeled partition: (1/2) sum_i W(X_i, ~X_i)/vol(X_i).
// Every label must identify a part of positive volume.
double ncut(const NeuronGraph& graph, const std::vector<int>& labels, int k);

// `header_extra` is appended to the header line (e.g. "config <hash>");
// loaders skip anything after the scope field.
void save_graph(const NeuronGraph& graph, const std::filesystem::path& path,
                const std::string& header_extra = "");
NeuronGraph load_graph(const std::filesystem::path& path);

// Pre-ReLU activation series for every universe layer, evaluated in batches:
// result[u] is (examples x width of universe layer u).
std::vector<Matrix> universe_series(const NetworkModel& model, const LabeledDataset& data,
                                    const std::vector<int>& universe);

}  // namespace modprobe
