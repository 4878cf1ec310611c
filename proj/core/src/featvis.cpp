#include "modprobe/featvis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "modprobe/errors.hpp"
#include "modprobe/rng.hpp"

namespace modprobe {

namespace {

// src[q] = flat index of the un-transformed pixel feeding transformed pixel
// q, or -1 for zero fill. Composing maps keeps the backward pass a scatter.
struct IndexMap {
  int height, width, channels;
  std::vector<int> src;
};

IndexMap jitter_map(const InputShape& in, int dx, int dy) {
  IndexMap m{in.height, in.width, in.channels, {}};
  m.src.assign(static_cast<std::size_t>(in.flat()), -1);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const int sy = y - dy, sx = x - dx;
      if (sy < 0 || sy >= in.height || sx < 0 || sx >= in.width) continue;
      for (int c = 0; c < in.channels; ++c)
        m.src[(static_cast<std::size_t>(y) * in.width + x) * in.channels + c] =
            (sy * in.width + sx) * in.channels + c;
    }
  return m;
}

// Nearest-neighbor rescale by s, then center crop or zero-pad back to the
// original size. Returns indices into the *intermediate* (jittered) image.
IndexMap scale_map(const InputShape& in, double s) {
  const int sh = std::max(1, static_cast<int>(std::lround(in.height * s)));
  const int sw = std::max(1, static_cast<int>(std::lround(in.width * s)));
  IndexMap m{in.height, in.width, in.channels, {}};
  m.src.assign(static_cast<std::size_t>(in.flat()), -1);
  const int off_y = (sh - in.height) / 2;  // positive: crop, negative: pad
  const int off_x = (sw - in.width) / 2;
  for (int y = 0; y < in.height; ++y) {
    const int ys = y + off_y;
    if (ys < 0 || ys >= sh) continue;
    const int sy = std::min(in.height - 1,
                            static_cast<int>(std::floor((ys + 0.5) * in.height / sh)));
    for (int x = 0; x < in.width; ++x) {
      const int xs = x + off_x;
      if (xs < 0 || xs >= sw) continue;
      const int sx = std::min(in.width - 1,
                              static_cast<int>(std::floor((xs + 0.5) * in.width / sw)));
      for (int c = 0; c < in.channels; ++c)
        m.src[(static_cast<std::size_t>(y) * in.width + x) * in.channels + c] =
            (sy * in.width + sx) * in.channels + c;
    }
  }
  return m;
}

IndexMap compose(const IndexMap& outer, const IndexMap& inner) {
  IndexMap m = outer;
  for (int& s : m.src)
    if (s >= 0) s = inner.src[s];
  return m;
}

}  // namespace

double softmax_entropy(const NetworkModel& model, std::span<const double> image,
                       const ComputeOptions& opts) {
  detail::require(static_cast<int>(image.size()) == model.input.flat(),
                  "softmax_entropy: image does not match the model input");
  Matrix batch(1, image.size());
  std::copy(image.begin(), image.end(), batch.values.begin());
  const ActivationRecord rec = forward(model, batch, opts);
  double h = 0.0;
  for (std::size_t c = 0; c < rec.softmax.cols; ++c) {
    const double p = rec.softmax(0, c);
    if (p > 0.0) h -= p * std::log(p);
  }
  const double bound = std::log(static_cast<double>(model.class_count));
  detail::require(h >= -1e-9 && h <= bound + 1e-9, "softmax_entropy: out of bounds");
  return std::clamp(h, 0.0, bound);
}

FeatureVisualization visualize_subcluster(const NetworkModel& model, const Subcluster& c,
                                          int steps, std::uint64_t seed,
                                          const ComputeOptions& opts) {
  detail::require(steps >= 0, "visualize_subcluster: negative step count");
  const InputShape& in = model.input;
  const std::size_t n = static_cast<std::size_t>(in.flat());

  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = 0.25 + 0.5 * rng.u01();

  FeatureVisualization out;
  out.steps = steps;
  out.seed = seed;
  out.initial_score = subcluster_l1(model, x, c);

  std::vector<double> m(n, 0.0), v(n, 0.0);
  constexpr double lr = 0.05, beta1 = 0.9, beta2 = 0.999, eps = 1e-7;
  std::vector<double> y(n), gx(n);
  for (int t = 1; t <= steps; ++t) {
    const int dx = static_cast<int>(rng.below(5)) - 2;
    const int dy = static_cast<int>(rng.below(5)) - 2;
    const double s = rng.uniform(0.95, 1.05);
    const IndexMap map = compose(scale_map(in, s), jitter_map(in, dx, dy));

    for (std::size_t q = 0; q < n; ++q) y[q] = map.src[q] >= 0 ? x[map.src[q]] : 0.0;
    const std::vector<double> gy = input_gradient(model, y, c);
    std::fill(gx.begin(), gx.end(), 0.0);
    for (std::size_t q = 0; q < n; ++q)
      if (map.src[q] >= 0) gx[map.src[q]] += gy[q];

    const double lr_t =
        lr * std::sqrt(1.0 - std::pow(beta2, t)) / (1.0 - std::pow(beta1, t));
    for (std::size_t q = 0; q < n; ++q) {
      m[q] = beta1 * m[q] + (1.0 - beta1) * gx[q];
      v[q] = beta2 * v[q] + (1.0 - beta2) * gx[q] * gx[q];
      x[q] = std::clamp(x[q] + lr_t * m[q] / (std::sqrt(v[q]) + eps), 0.0, 1.0);
    }
  }

  out.image = std::move(x);
  out.score = subcluster_l1(model, out.image, c);
  out.softmax_entropy = softmax_entropy(model, out.image, opts);
  return out;
}

void save_pgm(const std::filesystem::path& path, const std::vector<double>& image,
              int height, int width, const std::string& comment) {
  detail::require(height > 0 && width > 0, "save_pgm: bad dimensions");
  detail::require(image.size() == static_cast<std::size_t>(height) * width,
                  "save_pgm: pixel count mismatch (grayscale only)");
  detail::require(comment.find('\n') == std::string::npos, "save_pgm: one-line comment");
  std::string out = "P5\n# " + comment + "\n" + std::to_string(width) + " " +
                    std::to_string(height) + "\n255\n";
  for (double v : image)
    out.push_back(static_cast<char>(
        static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write: " + path.string());
}

}  // namespace modprobe
