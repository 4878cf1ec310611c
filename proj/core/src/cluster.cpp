#include "modprobe/cluster.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "modprobe/errors.hpp"
#include "modprobe/linalg.hpp"
#include "modprobe/rng.hpp"

namespace modprobe {

Partitioning spectral_cluster(const NeuronGraph& graph, int k, std::uint64_t seed) {
  const std::size_t n = graph.node_count();
  detail::require(k >= 1, "spectral_cluster: k must be positive");
  detail::require(static_cast<std::size_t>(k) <= n,
                  "spectral_cluster: k exceeds the node count");

  // D would be singular on isolated nodes; regularize every degree by tau.
  constexpr double tau = 1e-12;
  std::vector<double> degree(n), inv_sqrt(n);
  std::vector<bool> active(n);
  std::size_t n_active = 0;
  for (std::size_t i = 0; i < n; ++i) {
    degree[i] = graph.degree(i);
    active[i] = degree[i] > 0.0;
    n_active += active[i];
    inv_sqrt[i] = 1.0 / std::sqrt(degree[i] + tau);
  }

  // A = D^{-1/2} (D - W) D^{-1/2} = I - D^{-1/2} W D^{-1/2}
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    a(i, i) = 1.0;
    for (const auto& [j, w] : graph.adj[i]) a(i, j) = -w * inv_sqrt[i] * inv_sqrt[j];
  }
  const EigenResult eig = sym_eig(a);

  // Rows of U = D^{-1/2} [v_1 .. v_k] are the k-means input. Isolated nodes
  // are labeled 0 outright; their rows only enter k-means in the corner case
  // where fewer than k nodes carry any degree.
  const bool use_all = n_active < static_cast<std::size_t>(k);
  const std::size_t m = use_all ? n : n_active;
  Matrix points(m, k);
  std::vector<int> point_node(m);
  std::size_t r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!use_all && !active[i]) continue;
    for (int c = 0; c < k; ++c) points(r, c) = eig.eigenvectors(i, c) * inv_sqrt[i];
    point_node[r++] = static_cast<int>(i);
  }

  const std::vector<int> point_labels = kmeans(points, k, seed);

  Partitioning part;
  part.basis = graph.basis;
  part.local = graph.local_layer >= 0;
  part.k = k;
  part.nodes = graph.nodes;
  part.labels.assign(n, 0);
  for (std::size_t p = 0; p < m; ++p) part.labels[point_node[p]] = point_labels[p];
  for (std::size_t i = 0; i < n; ++i)
    if (!active[i]) part.labels[i] = 0;
  return part;
}

std::vector<Subcluster> derive_subclusters(const Partitioning& part) {
  detail::require(part.nodes.size() == part.labels.size(),
                  "derive_subclusters: label per node required");
  // layer id -> (width, cluster id -> members); layers keep insertion order.
  std::vector<int> layer_order;
  std::map<int, int> width;
  std::map<int, std::map<int, std::vector<int>>> members;
  for (std::size_t i = 0; i < part.nodes.size(); ++i) {
    const NodeId id = part.nodes[i];
    detail::require(part.labels[i] >= 0 && part.labels[i] < part.k,
                    "derive_subclusters: label out of range");
    if (width.find(id.layer) == width.end()) layer_order.push_back(id.layer);
    width[id.layer] += 1;
    members[id.layer][part.labels[i]].push_back(id.index);
  }

  std::vector<Subcluster> out;
  for (int layer : layer_order) {
    for (auto& [cluster, neurons] : members[layer]) {
      const int size = static_cast<int>(neurons.size());
      if (size < 2 || size >= width[layer]) continue;
      std::sort(neurons.begin(), neurons.end());
      out.push_back(Subcluster{layer, neurons, cluster});
    }
  }
  return out;
}

std::map<int, int> align_local_k(const Partitioning& global_part) {
  std::map<int, std::vector<int>> seen;
  for (std::size_t i = 0; i < global_part.nodes.size(); ++i)
    seen[global_part.nodes[i].layer].push_back(global_part.labels[i]);
  std::map<int, int> k_of;
  for (auto& [layer, labels] : seen) {
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    k_of[layer] = static_cast<int>(labels.size());
  }
  return k_of;
}

Partitioning cluster_local(GraphBasis basis, const NetworkModel& model,
                           const LabeledDataset* validation,
                           const Partitioning& global_part, std::uint64_t seed) {
  detail::require(global_part.basis == basis && !global_part.local,
                  "cluster_local: need the global partitioning of the same basis");
  const auto nls = neuron_layers(model);
  const std::vector<int> universe = node_universe(model);
  const std::map<int, int> k_of = align_local_k(global_part);

  Partitioning out;
  out.basis = basis;
  out.local = true;
  int offset = 0;
  for (int l : universe) {
    if (nls[l].weight_layer < 0 || nls[l].relu_layer < 0) continue;  // not hidden
    const auto it = k_of.find(l);
    detail::require(it != k_of.end(), "cluster_local: layer missing from the global partitioning");
    const int k_l = it->second;
    const NeuronGraph g = local_subgraph(basis, model, validation, l);
    const Partitioning local =
        spectral_cluster(g, k_l, derive_seed(seed, static_cast<std::uint64_t>(l)));
    for (std::size_t i = 0; i < local.nodes.size(); ++i) {
      if (local.nodes[i].layer != l) continue;
      out.nodes.push_back(local.nodes[i]);
      out.labels.push_back(offset + local.labels[i]);
    }
    offset += k_l;
  }
  out.k = offset;
  return out;
}

std::vector<Subcluster> sample_random_subclusters(const Subcluster& sub, int layer_width,
                                                  int count, std::uint64_t seed) {
  const int size = static_cast<int>(sub.neurons.size());
  detail::require(size >= 1 && size < layer_width,
                  "sample_random_subclusters: size must be in [1, layer width)");
  detail::require(count >= 0, "sample_random_subclusters: bad count");

  std::vector<Subcluster> out;
  out.reserve(count);
  for (int s = 0; s < count; ++s) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
    std::vector<int> pool(layer_width);
    std::iota(pool.begin(), pool.end(), 0);
    for (int t = 0; t < size; ++t) {
      const std::size_t pick = t + rng.below(static_cast<std::uint64_t>(layer_width - t));
      std::swap(pool[t], pool[pick]);
    }
    Subcluster r;
    r.layer = sub.layer;
    r.cluster_id = sub.cluster_id;
    r.neurons.assign(pool.begin(), pool.begin() + size);
    std::sort(r.neurons.begin(), r.neurons.end());
    out.push_back(std::move(r));
  }
  return out;
}

void save_partition(const Partitioning& part, const std::filesystem::path& path,
                    const std::string& header_extra) {
  detail::require(part.nodes.size() == part.labels.size(),
                  "save_partition: label per node required");
  std::string out = "k " + std::to_string(part.k) + " basis " +
                    (part.basis == GraphBasis::weights ? "weights" : "activations") +
                    " scope " + (part.local ? "local" : "global") +
                    (header_extra.empty() ? "" : " " + header_extra) + "\n";
  for (std::size_t i = 0; i < part.nodes.size(); ++i) {
    out += std::to_string(part.nodes[i].layer) + ':' +
           std::to_string(part.nodes[i].index) + ' ' + std::to_string(part.labels[i]) +
           '\n';
  }
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write: " + path.string());
}

Partitioning load_partition(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open partition file: " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw FormatError("empty partition file", 0);
  std::istringstream hs(line);
  std::string kk, kbasis, kscope, basis, scope;
  int k = 0;
  if (!(hs >> kk >> k >> kbasis >> basis >> kscope >> scope) || kk != "k" ||
      kbasis != "basis" || kscope != "scope" || k < 1 ||
      (basis != "weights" && basis != "activations") ||
      (scope != "global" && scope != "local"))
    throw FormatError("bad partition header: " + line, 0);

  Partitioning part;
  part.basis = basis == "weights" ? GraphBasis::weights : GraphBasis::activations;
  part.local = scope == "local";
  part.k = k;

  std::uint64_t offset = line.size() + 1;
  std::map<int, std::vector<std::pair<int, int>>> by_layer;  // layer -> (index, label)
  std::vector<int> layer_order;
  while (std::getline(f, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::istringstream ls(line);
    std::string tok;
    int label = -1;
    if (!(ls >> tok >> label) || !(ls >> std::ws).eof())
      throw FormatError("expected 'layer:index cluster': " + line, offset);
    const std::size_t colon = tok.find(':');
    if (colon == std::string::npos)
      throw FormatError("expected layer:index, got '" + tok + "'", offset);
    int layer = -1, index = -1;
    const auto parse_int = [&](const char* b, const char* e, int& v) {
      const auto [p, ec] = std::from_chars(b, e, v);
      if (ec != std::errc() || p != e || v < 0)
        throw FormatError("bad node token '" + tok + "'", offset);
    };
    parse_int(tok.data(), tok.data() + colon, layer);
    parse_int(tok.data() + colon + 1, tok.data() + tok.size(), index);
    if (label < 0 || label >= k)
      throw FormatError("cluster id out of range: " + line, offset);
    if (by_layer.find(layer) == by_layer.end()) layer_order.push_back(layer);
    by_layer[layer].emplace_back(index, label);
    offset += line.size() + 1;
  }

  for (int layer : layer_order) {
    auto& entries = by_layer[layer];
    std::sort(entries.begin(), entries.end());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != static_cast<int>(i))
        throw FormatError("partition file: layer " + std::to_string(layer) +
                          " indices are not contiguous from 0");
      part.nodes.push_back(NodeId{layer, entries[i].first});
      part.labels.push_back(entries[i].second);
    }
  }
  if (part.nodes.empty()) throw FormatError("partition file has no nodes");
  return part;
}

}  // namespace modprobe
