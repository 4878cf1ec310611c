#include "modprobe/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "modprobe/blas.hpp"
#include "modprobe/errors.hpp"
#include "modprobe/linalg.hpp"

namespace modprobe {

std::size_t NeuronGraph::edge_count() const {
  std::size_t directed = 0;
  for (const auto& a : adj) directed += a.size();
  return directed / 2;
}

int NeuronGraph::node_index(NodeId id) const {
  int base = 0;
  for (std::size_t p = 0; p < layer_ids.size(); ++p) {
    if (layer_ids[p] == id.layer) {
      if (id.index < 0 || id.index >= layer_widths[p]) return -1;
      return base + id.index;
    }
    base += layer_widths[p];
  }
  return -1;
}

double NeuronGraph::degree(int node) const {
  double d = 0.0;
  for (const auto& [j, w] : adj[node]) d += w;
  return d;
}

Matrix NeuronGraph::dense_weights() const {
  Matrix w(nodes.size(), nodes.size());
  for (std::size_t i = 0; i < adj.size(); ++i)
    for (const auto& [j, wt] : adj[i]) w(i, j) = wt;
  return w;
}

void NeuronGraph::check() const {
  detail::require(adj.size() == nodes.size(), "graph: adjacency/node size mismatch");
  std::size_t total = 0;
  for (const auto& w : layer_widths) total += static_cast<std::size_t>(w);
  detail::require(total == nodes.size(), "graph: layer widths do not cover the nodes");
  for (std::size_t i = 0; i < adj.size(); ++i) {
    for (const auto& [j, w] : adj[i]) {
      detail::require(j >= 0 && static_cast<std::size_t>(j) < nodes.size(),
                      "graph: neighbor out of range");
      detail::require(static_cast<std::size_t>(j) != i, "graph: self-loop");
      detail::require(w >= 0.0 && std::isfinite(w), "graph: bad edge weight");
      const auto& back = adj[j];
      const auto it = std::lower_bound(
          back.begin(), back.end(), std::make_pair(static_cast<int>(i), 0.0),
          [](const auto& a, const auto& b) { return a.first < b.first; });
      detail::require(it != back.end() && it->first == static_cast<int>(i) &&
                          it->second == w,
                      "graph: asymmetric edge");
    }
  }
}

std::vector<int> node_universe(const NetworkModel& model) {
  const auto nls = neuron_layers(model);
  const bool has_conv =
      std::any_of(nls.begin(), nls.end(), [](const NeuronLayer& l) { return l.conv; });
  std::vector<int> universe;
  for (const NeuronLayer& l : nls)
    if (!has_conv || l.conv) universe.push_back(l.id);
  return universe;
}

namespace {

struct GraphFrame {
  NeuronGraph g;
  std::vector<std::vector<std::pair<int, double>>>* adj;
};

NeuronGraph make_frame(GraphBasis basis, int local_layer,
                       const std::vector<NeuronLayer>& nls, const std::vector<int>& layers) {
  NeuronGraph g;
  g.basis = basis;
  g.local_layer = local_layer;
  for (int id : layers) {
    g.layer_ids.push_back(id);
    g.layer_widths.push_back(nls[id].width);
    for (int i = 0; i < nls[id].width; ++i) g.nodes.push_back(NodeId{id, i});
  }
  g.adj.resize(g.nodes.size());
  return g;
}

void add_edge(NeuronGraph& g, int i, int j, double w) {
  g.adj[i].emplace_back(j, w);
  g.adj[j].emplace_back(i, w);
}

void sort_adjacency(NeuronGraph& g) {
  for (auto& a : g.adj) std::sort(a.begin(), a.end());
}

// |effective weight| matrix (to_width x from_width) between two universe
// layers, following the connecting weight layer with batch-norm folding.
// The walk from the producing weight layer back to `from`'s capture point may
// only cross ReLU/pool/flatten/batch-norm layers.
Matrix effective_weights(const NetworkModel& model, const NeuronLayer& from,
                         const NeuronLayer& to) {
  const int t = to.weight_layer;
  detail::require(t >= 0, "weight graph: target layer has no incoming weights");

  std::vector<double> col_scale(from.width, 1.0);
  const int lower = from.relu_layer >= 0 ? from.relu_layer : from.weight_layer;
  for (int j = t - 1; j > lower; --j) {
    const LayerSpec& layer = model.layers[j];
    if (std::holds_alternative<MaxPool2x2Layer>(layer) ||
        std::holds_alternative<FlattenLayer>(layer))
      continue;
    if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      detail::require(static_cast<int>(bn->gamma.size()) == from.width,
                      "weight graph: unsupported batch-norm placement at layer " +
                          std::to_string(j));
      for (int i = 0; i < from.width; ++i)
        col_scale[i] *= bn->gamma[i] / (bn->stddev[i] + bn->epsilon);
      continue;
    }
    throw InvalidArgument("weight graph: unsupported layer arrangement at layer " +
                          std::to_string(j));
  }

  std::vector<double> row_scale(to.width, 1.0);
  if (to.relu_layer >= 0) {
    for (int j = t + 1; j < to.relu_layer; ++j) {
      const auto* bn = std::get_if<BatchNormLayer>(&model.layers[j]);
      detail::require(bn != nullptr, "weight graph: unsupported layer arrangement at layer " +
                                         std::to_string(j));
      detail::require(static_cast<int>(bn->gamma.size()) == to.width,
                      "weight graph: unsupported batch-norm placement at layer " +
                          std::to_string(j));
      for (int i = 0; i < to.width; ++i)
        row_scale[i] *= bn->gamma[i] / (bn->stddev[i] + bn->epsilon);
    }
  }

  Matrix e(to.width, from.width);
  if (const auto* d = std::get_if<DenseLayer>(&model.layers[t])) {
    detail::require(static_cast<int>(d->weights.cols) == from.width,
                    "weight graph: fan-in does not match the previous universe layer");
    for (int j = 0; j < to.width; ++j)
      for (int i = 0; i < from.width; ++i)
        e(j, i) = std::abs(d->weights(j, i) * row_scale[j] * col_scale[i]);
  } else if (const auto* c = std::get_if<Conv2DLayer>(&model.layers[t])) {
    detail::require(c->in_channels == from.width,
                    "weight graph: channel count does not match the previous universe layer");
    for (int o = 0; o < to.width; ++o)
      for (int i = 0; i < from.width; ++i) {
        double slice = 0.0;
        for (int kh = 0; kh < 3; ++kh)
          for (int kw = 0; kw < 3; ++kw)
            slice += std::abs(c->k(o, i, kh, kw) * row_scale[o] * col_scale[i]);
        e(o, i) = slice;
      }
  }
  return e;
}

void add_pair_edges(NeuronGraph& g, const NetworkModel& model,
                    const std::vector<NeuronLayer>& nls, int from_id, int to_id) {
  const Matrix e = effective_weights(model, nls[from_id], nls[to_id]);
  const int from_base = g.node_index(NodeId{from_id, 0});
  const int to_base = g.node_index(NodeId{to_id, 0});
  for (std::size_t j = 0; j < e.rows; ++j)
    for (std::size_t i = 0; i < e.cols; ++i)
      if (e(j, i) > 0.0)
        add_edge(g, from_base + static_cast<int>(i), to_base + static_cast<int>(j),
                 e(j, i));
}

// Stacks standardized ranks of every node's series and fills in rho^2 edges
// for all pairs in the frame.
void add_correlation_edges(NeuronGraph& g, const std::vector<Matrix>& series) {
  std::size_t n_nodes = 0;
  for (const Matrix& s : series) n_nodes += s.cols;
  detail::require(n_nodes == g.nodes.size(), "activation graph: series/node mismatch");
  const std::size_t n = series.front().rows;

  Matrix ranks(n_nodes, n);
  std::vector<bool> constant(n_nodes, false);
  std::size_t base = 0;
  for (const Matrix& s : series) {
    detail::require(s.rows == n, "activation graph: series lengths differ");
    RankRows rr = standardized_rank_rows(s);
    for (std::size_t j = 0; j < s.cols; ++j) {
      std::copy_n(rr.rows.row(j), n, ranks.row(base + j));
      constant[base + j] = rr.constant[j];
    }
    base += s.cols;
  }

  Matrix corr(n_nodes, n_nodes);
  dgemm(false, true, static_cast<int>(n_nodes), static_cast<int>(n_nodes),
        static_cast<int>(n), 1.0, ranks.values.data(), static_cast<int>(n),
        ranks.values.data(), static_cast<int>(n), 0.0, corr.values.data(),
        static_cast<int>(n_nodes));

  for (std::size_t i = 0; i < n_nodes; ++i) {
    if (constant[i]) continue;
    for (std::size_t j = i + 1; j < n_nodes; ++j) {
      if (constant[j]) continue;
      const double rho = std::clamp(corr(i, j), -1.0, 1.0);
      const double w = rho * rho;
      if (w > 0.0) add_edge(g, static_cast<int>(i), static_cast<int>(j), w);
    }
  }
}

}  // namespace

std::vector<Matrix> universe_series(const NetworkModel& model, const LabeledDataset& data,
                                    const std::vector<int>& universe) {
  const auto nls = neuron_layers(model);
  detail::require(static_cast<int>(data.example_floats()) == model.input.flat(),
                  "universe_series: dataset does not match the model input");
  const std::size_t n = data.size();
  std::vector<Matrix> out;
  for (int id : universe) out.emplace_back(n, nls[id].width);

  const bool has_conv = std::any_of(
      model.layers.begin(), model.layers.end(),
      [](const LayerSpec& l) { return std::holds_alternative<Conv2DLayer>(l); });
  const std::size_t chunk = has_conv ? 128 : 1024;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    const Matrix batch = batch_of(data, start, count);
    const ActivationRecord rec = forward(model, batch);
    for (std::size_t u = 0; u < universe.size(); ++u) {
      const Matrix s = node_series(model, rec, batch, nls[universe[u]]);
      for (std::size_t r = 0; r < count; ++r)
        std::copy_n(s.row(r), s.cols, out[u].row(start + r));
    }
  }
  return out;
}

NeuronGraph weight_graph(const NetworkModel& model) {
  validate_model(model);
  const auto nls = neuron_layers(model);
  const std::vector<int> universe = node_universe(model);
  NeuronGraph g = make_frame(GraphBasis::weights, -1, nls, universe);
  for (std::size_t p = 0; p + 1 < universe.size(); ++p)
    add_pair_edges(g, model, nls, universe[p], universe[p + 1]);
  sort_adjacency(g);
  g.check();
  return g;
}

NeuronGraph activation_graph(const NetworkModel& model, const LabeledDataset& validation) {
  validate_model(model);
  detail::require(validation.size() >= 100,
                  "activation graph: need at least 100 validation examples");
  const std::vector<int> universe = node_universe(model);
  const auto nls = neuron_layers(model);
  NeuronGraph g = make_frame(GraphBasis::activations, -1, nls, universe);
  add_correlation_edges(g, universe_series(model, validation, universe));
  sort_adjacency(g);
  g.check();
  return g;
}

NeuronGraph local_subgraph(GraphBasis basis, const NetworkModel& model,
                           const LabeledDataset* validation, int l) {
  validate_model(model);
  const auto nls = neuron_layers(model);
  const std::vector<int> universe = node_universe(model);
  const auto pos = std::find(universe.begin(), universe.end(), l);
  detail::require(pos != universe.end(), "local subgraph: layer is not in the universe");
  const NeuronLayer& nl = nls[l];
  detail::require(nl.weight_layer >= 0 && nl.relu_layer >= 0,
                  "local subgraph: layer must be hidden");

  const std::size_t idx = static_cast<std::size_t>(pos - universe.begin());
  std::vector<int> local_layers;
  if (idx > 0) local_layers.push_back(universe[idx - 1]);
  local_layers.push_back(universe[idx]);
  if (idx + 1 < universe.size()) local_layers.push_back(universe[idx + 1]);

  NeuronGraph g = make_frame(basis, l, nls, local_layers);
  if (basis == GraphBasis::weights) {
    for (std::size_t p = 0; p + 1 < local_layers.size(); ++p)
      add_pair_edges(g, model, nls, local_layers[p], local_layers[p + 1]);
  } else {
    detail::require(validation != nullptr,
                    "local subgraph: activations basis needs validation data");
    detail::require(validation->size() >= 100,
                    "local subgraph: need at least 100 validation examples");
    add_correlation_edges(g, universe_series(model, *validation, local_layers));
  }
  sort_adjacency(g);
  g.check();
  return g;
}

double ncut(const NeuronGraph& graph, const std::vector<int>& labels, int k) {
  detail::require(labels.size() == graph.node_count(), "ncut: one label per node");
  detail::require(k >= 1, "ncut: k must be positive");
  std::vector<double> vol(k, 0.0), cut(k, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::require(labels[i] >= 0 && labels[i] < k, "ncut: label out of range");
    for (const auto& [j, w] : graph.adj[i]) {
      vol[labels[i]] += w;
      if (labels[j] != labels[i]) cut[labels[i]] += w;
    }
  }
  double total = 0.0;
  for (int c = 0; c < k; ++c) {
    if (vol[c] <= 0.0)
      throw InvalidArgument("ncut: part " + std::to_string(c) + " has zero volume");
    total += cut[c] / vol[c];
  }
  return 0.5 * total;
}

namespace {

void print_double(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

}  // namespace

void save_graph(const NeuronGraph& graph, const std::filesystem::path& path,
                const std::string& header_extra) {
  std::string out = "nodes " + std::to_string(graph.node_count()) + " basis " +
                    (graph.basis == GraphBasis::weights ? "weights" : "activations") +
                    " scope " +
                    (graph.local_layer < 0 ? std::string("global")
                                           : "local:" + std::to_string(graph.local_layer)) +
                    (header_extra.empty() ? "" : " " + header_extra) + "\n";
  std::vector<bool> mentioned(graph.node_count(), false);
  for (std::size_t i = 0; i < graph.node_count(); ++i) {
    for (const auto& [j, w] : graph.adj[i]) {
      if (static_cast<std::size_t>(j) < i) continue;  // each edge once
      mentioned[i] = mentioned[j] = true;
      const NodeId a = graph.nodes[i];
      const NodeId b = graph.nodes[j];
      out += std::to_string(a.layer) + ':' + std::to_string(a.index) + ' ' +
             std::to_string(b.layer) + ':' + std::to_string(b.index) + ' ';
      print_double(out, w);
      out += '\n';
    }
  }
  // Isolated nodes are declared with a zero-weight self line so the node set
  // survives the round trip.
  for (std::size_t i = 0; i < graph.node_count(); ++i) {
    if (mentioned[i] || !graph.adj[i].empty()) continue;
    const NodeId a = graph.nodes[i];
    const std::string tag = std::to_string(a.layer) + ':' + std::to_string(a.index);
    out += tag + ' ' + tag + " 0\n";
  }
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write: " + path.string());
}

namespace {

NodeId parse_node(const std::string& tok, std::uint64_t offset) {
  const std::size_t colon = tok.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == tok.size())
    throw FormatError("expected layer:index, got '" + tok + "'", offset);
  NodeId id;
  const auto parse_int = [&](const char* b, const char* e, int& v) {
    const auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e || v < 0)
      throw FormatError("bad node token '" + tok + "'", offset);
  };
  parse_int(tok.data(), tok.data() + colon, id.layer);
  parse_int(tok.data() + colon + 1, tok.data() + tok.size(), id.index);
  return id;
}

}  // namespace

NeuronGraph load_graph(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open graph file: " + path.string());
  std::string line;
  std::uint64_t offset = 0;

  if (!std::getline(f, line)) throw FormatError("empty graph file", 0);
  std::istringstream hs(line);
  std::string knodes, kbasis, kscope, basis, scope;
  std::size_t n_nodes = 0;
  if (!(hs >> knodes >> n_nodes >> kbasis >> basis >> kscope >> scope) ||
      knodes != "nodes" || kbasis != "basis" || kscope != "scope" ||
      (basis != "weights" && basis != "activations"))
    throw FormatError("bad graph header: " + line, 0);
  NeuronGraph g;
  g.basis = basis == "weights" ? GraphBasis::weights : GraphBasis::activations;
  if (scope == "global") {
    g.local_layer = -1;
  } else if (scope.rfind("local:", 0) == 0) {
    const std::string num = scope.substr(6);
    const auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), g.local_layer);
    if (ec != std::errc() || p != num.data() + num.size() || g.local_layer < 0)
      throw FormatError("bad scope in graph header: " + scope, 0);
  } else {
    throw FormatError("bad scope in graph header: " + scope, 0);
  }
  offset += line.size() + 1;

  struct Entry {
    NodeId a, b;
    double w;
  };
  std::vector<Entry> entries;
  std::map<int, int> max_index;  // layer -> max neuron index seen
  while (std::getline(f, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::istringstream ls(line);
    std::string ta, tb, tw;
    if (!(ls >> ta >> tb >> tw) || !(ls >> std::ws).eof())
      throw FormatError("expected 'layer:index layer:index weight': " + line, offset);
    Entry e;
    e.a = parse_node(ta, offset);
    e.b = parse_node(tb, offset);
    const auto [p, ec] = std::from_chars(tw.data(), tw.data() + tw.size(), e.w);
    if (ec != std::errc() || p != tw.data() + tw.size() || !std::isfinite(e.w) || e.w < 0.0)
      throw FormatError("bad edge weight '" + tw + "'", offset);
    if (e.a == e.b && e.w != 0.0)
      throw FormatError("self-loop with non-zero weight: " + line, offset);
    if (!(e.a == e.b) && e.w == 0.0)
      throw FormatError("zero-weight edge is not storable: " + line, offset);
    entries.push_back(e);
    for (const NodeId& id : {e.a, e.b}) {
      auto [it, inserted] = max_index.try_emplace(id.layer, id.index);
      if (!inserted) it->second = std::max(it->second, id.index);
    }
    offset += line.size() + 1;
  }

  for (const auto& [layer, maxi] : max_index) {
    g.layer_ids.push_back(layer);
    g.layer_widths.push_back(maxi + 1);
    for (int i = 0; i <= maxi; ++i) g.nodes.push_back(NodeId{layer, i});
  }
  if (g.node_count() != n_nodes)
    throw FormatError("graph body declares " + std::to_string(g.node_count()) +
                      " nodes but the header says " + std::to_string(n_nodes));
  g.adj.resize(g.node_count());
  for (const Entry& e : entries) {
    if (e.a == e.b) continue;  // declaration line
    const int i = g.node_index(e.a);
    const int j = g.node_index(e.b);
    add_edge(g, i, j, e.w);
  }
  sort_adjacency(g);
  for (const auto& a : g.adj)
    for (std::size_t t = 1; t < a.size(); ++t)
      if (a[t].first == a[t - 1].first)
        throw FormatError("duplicate edge in graph file: " + path.string());
  g.check();
  return g;
}

}  // namespace modprobe
