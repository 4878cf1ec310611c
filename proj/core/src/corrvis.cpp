#include "modprobe/corrvis.hpp"

#include <algorithm>
#include <cmath>
#include <variant>

#include "modprobe/blas.hpp"
#include "modprobe/errors.hpp"
#include "modprobe/graph.hpp"
#include "modprobe/linalg.hpp"

namespace modprobe {

namespace {

const NeuronLayer& dense_layer_or_throw(const std::vector<NeuronLayer>& nls, int layer) {
  detail::require(layer >= 0 && static_cast<std::size_t>(layer) < nls.size(),
                  "pixel map: no such neuron layer");
  const NeuronLayer& nl = nls[layer];
  detail::require(!nl.conv, "pixel map: conv channels are not supported");
  detail::require(nl.weight_layer >= 0, "pixel map: layer must be a dense layer");
  return nl;
}

}  // namespace

Matrix layer_pixel_maps(const NetworkModel& model, const LabeledDataset& data, int layer) {
  const auto nls = neuron_layers(model);
  const NeuronLayer& nl = dense_layer_or_throw(nls, layer);
  detail::require(data.size() >= 100, "pixel map: need at least 100 examples");
  detail::require(static_cast<int>(data.example_floats()) == model.input.flat(),
                  "pixel map: dataset does not match the model input");
  const std::size_t n = data.size();
  const std::size_t pixels = data.example_floats();

  const std::vector<Matrix> series = universe_series(model, data, {layer});
  const RankRows neuron_ranks = standardized_rank_rows(series.front());

  Matrix pixel_series(n, pixels);
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t p = 0; p < pixels; ++p)
      pixel_series(e, p) = static_cast<double>(data.images[e * pixels + p]);
  const RankRows pixel_ranks = standardized_rank_rows(pixel_series);

  Matrix maps(nl.width, pixels);
  dgemm(false, true, nl.width, static_cast<int>(pixels), static_cast<int>(n), 1.0,
        neuron_ranks.rows.values.data(), static_cast<int>(n),
        pixel_ranks.rows.values.data(), static_cast<int>(n), 0.0, maps.values.data(),
        static_cast<int>(pixels));
  for (int u = 0; u < nl.width; ++u)
    for (std::size_t p = 0; p < pixels; ++p) {
      if (neuron_ranks.constant[u] || pixel_ranks.constant[p])
        maps(u, p) = 0.0;
      else
        maps(u, p) = std::clamp(maps(u, p), -1.0, 1.0);
    }
  return maps;
}

NeuronCorrelationMap neuron_pixel_map(const NetworkModel& model, const LabeledDataset& data,
                                      NodeId neuron) {
  const auto nls = neuron_layers(model);
  const NeuronLayer& nl = dense_layer_or_throw(nls, neuron.layer);
  detail::require(neuron.index >= 0 && neuron.index < nl.width,
                  "pixel map: neuron index out of range");
  const Matrix maps = layer_pixel_maps(model, data, neuron.layer);
  NeuronCorrelationMap out;
  out.layer = neuron.layer;
  out.neuron = neuron.index;
  out.values.assign(maps.row(neuron.index), maps.row(neuron.index) + maps.cols);
  return out;
}

std::vector<std::vector<double>> sign_align(const std::vector<std::vector<double>>& maps,
                                            int iters) {
  detail::require(!maps.empty(), "sign_align: no maps");
  detail::require(iters >= 0, "sign_align: negative iteration count");
  const std::size_t n = maps.size();
  const std::size_t dim = maps.front().size();

  // Flipping only changes the sign of a dot product, never its magnitude, so
  // the pairwise cosines are computed once and sweeps track signs.
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(maps[i].size() == dim, "sign_align: maps differ in size");
    double s = 0.0;
    for (double x : maps[i]) s += x * x;
    norm[i] = std::sqrt(s);
  }
  Matrix cosine(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (norm[i] == 0.0 || norm[j] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t p = 0; p < dim; ++p) dot += maps[i][p] * maps[j][p];
      cosine(i, j) = cosine(j, i) = dot / (norm[i] * norm[j]);
    }

  std::vector<double> sign(n, 1.0);
  for (int it = 0; it < iters; ++it) {
    bool flipped = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (norm[i] == 0.0) continue;
      double c = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) c += sign[i] * sign[j] * cosine(i, j);
      if (c < 0.0) {
        sign[i] = -sign[i];
        flipped = true;
      }
    }
    if (!flipped) break;  // fixed point
  }

  std::vector<std::vector<double>> v = maps;
  for (std::size_t i = 0; i < n; ++i)
    if (sign[i] < 0.0)
      for (double& x : v[i]) x = -x;
  return v;
}

std::vector<double> cluster_visualization(const NetworkModel& model,
                                          const LabeledDataset& data, const Subcluster& sub) {
  return cluster_visualization(layer_pixel_maps(model, data, sub.layer), sub);
}

std::vector<double> cluster_visualization(const Matrix& maps, const Subcluster& sub) {
  detail::require(!sub.neurons.empty(), "cluster_visualization: empty subcluster");
  std::vector<std::vector<double>> selected;
  selected.reserve(sub.neurons.size());
  for (int u : sub.neurons) {
    detail::require(u >= 0 && static_cast<std::size_t>(u) < maps.rows,
                    "cluster_visualization: neuron index out of range");
    selected.emplace_back(maps.row(u), maps.row(u) + maps.cols);
  }
  const std::vector<std::vector<double>> aligned = sign_align(selected, 20);

  std::vector<double> mean(maps.cols, 0.0);
  for (const auto& m : aligned)
    for (std::size_t p = 0; p < mean.size(); ++p) mean[p] += m[p];
  for (double& x : mean) x /= static_cast<double>(aligned.size());

  const auto [lo_it, hi_it] = std::minmax_element(mean.begin(), mean.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    std::fill(mean.begin(), mean.end(), 0.5);
    return mean;
  }
  for (double& x : mean) x = (x - lo) / (hi - lo);
  return mean;
}

double side_selectivity(const std::vector<double>& image, int height, int width) {
  detail::require(height > 0 && width > 0 && width % 2 == 0,
                  "side_selectivity: even width required");
  detail::require(image.size() == static_cast<std::size_t>(height) * width,
                  "side_selectivity: pixel count mismatch");
  double left = 0.0, right = 0.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double d = std::abs(image[static_cast<std::size_t>(y) * width + x] - 0.5);
      (x < width / 2 ? left : right) += d;
    }
  if (left == 0.0 && right == 0.0) return 0.0;
  return std::abs(left - right) / (left + right);
}

}  // namespace modprobe
