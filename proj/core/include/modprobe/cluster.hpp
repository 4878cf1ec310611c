#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "modprobe/graph.hpp"
#include "modprobe/model.hpp"

namespace modprobe {

// Node labeling produced by spectral clustering. `local` distinguishes the
// per-layer pipeline (labels assembled layer by layer with disjoint cluster
// id ranges) from one global clustering.
struct Partitioning {
  GraphBasis basis = GraphBasis::weights;
  bool local = false;
  int k = 0;
  std::vector<NodeId> nodes;
  std::vector<int> labels;

  std::size_t node_count() const { return nodes.size(); }
};

// Shi–Malik normalized spectral clustering: L = D - W, symmetric substitution
// D^{-1/2} L D^{-1/2} v = lambda v, u = D^{-1/2} v, k-means over the rows of
// the k smallest-eigenvalue vectors. Degree-0 nodes land in cluster 0.
Partitioning spectral_cluster(const NeuronGraph& graph, int k, std::uint64_t seed);

// Cluster-and-layer intersections, dropping singletons and whole layers.
// Ordered layer-major, cluster-minor.
std::vector<Subcluster> derive_subclusters(const Partitioning& part);

// Per-layer cluster count of a global partitioning: how many distinct global
// clusters intersect each layer (before any size filtering).
std::map<int, int> align_local_k(const Partitioning& global_part);

// Runs the local pipeline for every hidden universe layer: clusters the
// {l-1, l, l+1} subgraph with k from align_local_k, keeps layer-l labels, and
// assembles one Partitioning with per-layer disjoint cluster ids.
Partitioning cluster_local(GraphBasis basis, const NetworkModel& model,
                           const LabeledDataset* validation,
                           const Partitioning& global_part, std::uint64_t seed);

// `count` uniformly drawn neuron subsets of the same size and layer as `sub`.
// Sample s depends only on (seed, s), so callers may distribute the work.
std::vector<Subcluster> sample_random_subclusters(const Subcluster& sub, int layer_width,
                                                  int count, std::uint64_t seed);

void save_partition(const Partitioning& part, const std::filesystem::path& path,
                    const std::string& header_extra = "");
Partitioning load_partition(const std::filesystem::path& path);

}  // namespace modprobe
