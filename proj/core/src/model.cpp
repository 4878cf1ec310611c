#include "modprobe/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "modprobe/blas.hpp"
#include "modprobe/errors.hpp"

namespace modprobe {
namespace {

const DenseLayer* as_dense(const LayerSpec& l) { return std::get_if<DenseLayer>(&l); }
const Conv2DLayer* as_conv(const LayerSpec& l) { return std::get_if<Conv2DLayer>(&l); }

bool is_weight_layer(const LayerSpec& l) { return as_dense(l) || as_conv(l); }

// Next Dense/Conv at or after `from`, or -1.
int next_weight_layer(const NetworkModel& model, int from) {
  for (int i = std::max(from, 0); i < static_cast<int>(model.layers.size()); ++i)
    if (is_weight_layer(model.layers[i])) return i;
  return -1;
}

}  // namespace

std::vector<TensorShape> layer_shapes(const NetworkModel& model) {
  TensorShape cur{model.input.height, model.input.width, model.input.channels};
  detail::require(cur.flat() > 0, "model: input shape must be non-empty");
  std::vector<TensorShape> shapes;
  shapes.reserve(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& layer = model.layers[i];
    if (const auto* d = as_dense(layer)) {
      detail::require(d->weights.rows > 0 && d->weights.cols > 0 &&
                          d->bias.size() == d->weights.rows,
                      "model: dense tensor sizes are inconsistent");
      detail::require(static_cast<int>(d->weights.cols) == cur.flat(),
                      "model: dense fan-in does not match the incoming shape");
      cur = TensorShape{1, 1, static_cast<int>(d->weights.rows)};
    } else if (const auto* c = as_conv(layer)) {
      detail::require(c->out_channels > 0 && c->in_channels > 0 &&
                          c->kernels.size() == static_cast<std::size_t>(c->out_channels) *
                                                   c->in_channels * 9 &&
                          c->bias.size() == static_cast<std::size_t>(c->out_channels),
                      "model: conv tensor sizes are inconsistent");
      detail::require(cur.height >= 1 && cur.width >= 1 && cur.channels == c->in_channels,
                      "model: conv input channels do not match the incoming shape");
      cur = TensorShape{cur.height, cur.width, c->out_channels};
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      const std::size_t nc = bn->gamma.size();
      detail::require(nc > 0 && bn->beta.size() == nc && bn->mean.size() == nc &&
                          bn->stddev.size() == nc,
                      "model: batch-norm parameter lengths differ");
      detail::require(bn->epsilon > 0.0, "model: batch-norm epsilon must be positive");
      for (double s : bn->stddev)
        detail::require(s >= 0.0, "model: batch-norm stddev must be non-negative");
      detail::require(static_cast<int>(nc) == cur.channels,
                      "model: batch-norm width does not match the incoming channels");
    } else if (std::holds_alternative<ReLULayer>(layer)) {
      // shape unchanged
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      detail::require(cur.height % 2 == 0 && cur.width % 2 == 0,
                      "model: max-pool needs even spatial dimensions");
      cur = TensorShape{cur.height / 2, cur.width / 2, cur.channels};
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      cur = TensorShape{1, 1, cur.flat()};
    } else if (std::holds_alternative<SoftmaxOutputLayer>(layer)) {
      detail::require(i + 1 == model.layers.size(),
                      "model: softmax output must be the last layer");
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void validate_model(const NetworkModel& model) {
  detail::require(!model.layers.empty(), "model: no layers");
  const auto shapes = layer_shapes(model);
  int softmax_count = 0;
  int last_dense = -1;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (std::holds_alternative<SoftmaxOutputLayer>(model.layers[i])) ++softmax_count;
    if (as_dense(model.layers[i])) last_dense = static_cast<int>(i);
  }
  detail::require(softmax_count == 1 &&
                      std::holds_alternative<SoftmaxOutputLayer>(model.layers.back()),
                  "model: expected exactly one terminal softmax output");
  detail::require(last_dense >= 0, "model: expected at least one dense layer");
  const int out = static_cast<int>(as_dense(model.layers[last_dense])->weights.rows);
  detail::require(model.class_count == out,
                  "model: class count does not match the last dense layer");
  detail::require(shapes.back().flat() == out, "model: output shape mismatch");
}

std::vector<NeuronLayer> neuron_layers(const NetworkModel& model) {
  std::vector<NeuronLayer> out;
  const auto shapes = layer_shapes(model);
  const int first_w = next_weight_layer(model, 0);
  detail::require(first_w >= 0, "model: no weight layers");

  if (as_dense(model.layers[first_w])) {
    NeuronLayer input;
    input.id = 0;
    input.width = model.input.flat();
    out.push_back(input);
  }
  for (int i = 0; i < static_cast<int>(model.layers.size()); ++i) {
    if (!is_weight_layer(model.layers[i])) continue;
    NeuronLayer nl;
    nl.id = static_cast<int>(out.size());
    nl.weight_layer = i;
    nl.conv = as_conv(model.layers[i]) != nullptr;
    nl.width = nl.conv ? as_conv(model.layers[i])->out_channels
                       : static_cast<int>(as_dense(model.layers[i])->weights.rows);
    if (nl.conv) {
      nl.map_height = shapes[i].height;
      nl.map_width = shapes[i].width;
    }
    // The capture point sits just before the ReLU; batch-norm between the
    // weight layer and the ReLU is part of the affine step.
    for (int j = i + 1; j < static_cast<int>(model.layers.size()); ++j) {
      if (std::holds_alternative<BatchNormLayer>(model.layers[j])) continue;
      if (std::holds_alternative<ReLULayer>(model.layers[j])) nl.relu_layer = j;
      break;
    }
    out.push_back(nl);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

struct ForwardPass {
  std::vector<Matrix> inputs;             // inputs[i] feeds layers[i]
  std::vector<TensorShape> in_shapes;     // shape of inputs[i]
  std::vector<std::vector<int>> pool_arg; // per layer: argmax source index per output element
  std::vector<std::vector<double>> col64; // cached im2col per conv layer
  std::vector<std::vector<float>> col32;
  Matrix logits, softmax;
  std::size_t batch_size = 0;
};

void add_bias_rows(Matrix& m, std::span<const double> bias) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double* row = m.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) row[c] += bias[c];
  }
}

template <class T>
void im2col(const double* act, std::size_t n, int h, int w, int c, std::vector<T>& col) {
  const std::size_t row_len = 9u * c;
  col.assign(n * h * w * row_len, T(0));
  for (std::size_t ni = 0; ni < n; ++ni) {
    const double* img = act + ni * (static_cast<std::size_t>(h) * w * c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T* dst = col.data() + ((ni * h + y) * w + x) * row_len;
        for (int kh = 0; kh < 3; ++kh) {
          const int iy = y + kh - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kw = 0; kw < 3; ++kw) {
            const int ix = x + kw - 1;
            if (ix < 0 || ix >= w) continue;
            const double* src = img + (static_cast<std::size_t>(iy) * w + ix) * c;
            T* seg = dst + (kh * 3 + kw) * c;
            for (int ch = 0; ch < c; ++ch) seg[ch] = static_cast<T>(src[ch]);
          }
        }
      }
  }
}

template <class T>
void col2im_add(const std::vector<T>& col, std::size_t n, int h, int w, int c, double* dact) {
  const std::size_t row_len = 9u * c;
  for (std::size_t ni = 0; ni < n; ++ni) {
    double* img = dact + ni * (static_cast<std::size_t>(h) * w * c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const T* src_row = col.data() + ((ni * h + y) * w + x) * row_len;
        for (int kh = 0; kh < 3; ++kh) {
          const int iy = y + kh - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kw = 0; kw < 3; ++kw) {
            const int ix = x + kw - 1;
            if (ix < 0 || ix >= w) continue;
            double* dst = img + (static_cast<std::size_t>(iy) * w + ix) * c;
            const T* seg = src_row + (kh * 3 + kw) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += static_cast<double>(seg[ch]);
          }
        }
      }
  }
}

template <class T>
std::vector<T> pack_kernels(const Conv2DLayer& conv) {
  // Kmat[(kh*3+kw)*Cin + ci, co] pairs with the im2col column order.
  const int ci_n = conv.in_channels, co_n = conv.out_channels;
  std::vector<T> kmat(static_cast<std::size_t>(9) * ci_n * co_n);
  for (int co = 0; co < co_n; ++co)
    for (int ci = 0; ci < ci_n; ++ci)
      for (int kh = 0; kh < 3; ++kh)
        for (int kw = 0; kw < 3; ++kw)
          kmat[(static_cast<std::size_t>(kh * 3 + kw) * ci_n + ci) * co_n + co] =
              static_cast<T>(conv.k(co, ci, kh, kw));
  return kmat;
}

void sgemm_f(bool ta, bool tb, int m, int n, int k, const float* a, int lda,
             const float* b, int ldb, float beta, float* c, int ldc) {
  sgemm(ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}

// Runs layers [0, stop_after] (whole net when stop_after < 0). keep_caches
// retains what the backward pass needs; otherwise only ReLU inputs survive
// (those are the capture points).
ForwardPass run_forward(const NetworkModel& model, const Matrix& batch,
                        const ComputeOptions& opts, bool keep_caches,
                        int stop_after = -1) {
  detail::require(static_cast<int>(batch.cols) == model.input.flat(),
                  "forward: batch width does not match the input shape");
  const std::size_t n = batch.rows;
  const int last = stop_after < 0 ? static_cast<int>(model.layers.size()) - 1 : stop_after;

  ForwardPass fp;
  fp.batch_size = n;
  fp.inputs.resize(model.layers.size());
  fp.in_shapes.resize(model.layers.size());
  fp.pool_arg.resize(model.layers.size());
  fp.col64.resize(model.layers.size());
  fp.col32.resize(model.layers.size());

  Matrix act = batch;
  TensorShape cur{model.input.height, model.input.width, model.input.channels};

  for (int i = 0; i <= last; ++i) {
    const LayerSpec& layer = model.layers[i];
    fp.in_shapes[i] = cur;
    const bool capture = std::holds_alternative<ReLULayer>(layer);
    if (keep_caches || capture) fp.inputs[i] = act;

    if (const auto* d = as_dense(layer)) {
      const int out = static_cast<int>(d->weights.rows);
      const int in = static_cast<int>(d->weights.cols);
      Matrix next(n, out);
      dgemm(false, true, static_cast<int>(n), out, in, 1.0, act.values.data(), in,
            d->weights.values.data(), in, 0.0, next.values.data(), out);
      add_bias_rows(next, d->bias);
      act = std::move(next);
      cur = TensorShape{1, 1, out};
    } else if (const auto* cv = as_conv(layer)) {
      const int h = cur.height, w = cur.width, ci = cv->in_channels, co = cv->out_channels;
      const int m = static_cast<int>(n) * h * w;
      Matrix next(n, static_cast<std::size_t>(h) * w * co);
      if (opts.conv_gemm_f32) {
        std::vector<float>& col = fp.col32[i];
        im2col<float>(act.values.data(), n, h, w, ci, col);
        const std::vector<float> kmat = pack_kernels<float>(*cv);
        std::vector<float> out_f(static_cast<std::size_t>(m) * co);
        sgemm_f(false, false, m, co, 9 * ci, col.data(), 9 * ci, kmat.data(), co, 0.0f,
                out_f.data(), co);
        for (std::size_t t = 0; t < out_f.size(); ++t)
          next.values[t] = static_cast<double>(out_f[t]);
        if (!keep_caches) col.clear();
      } else {
        std::vector<double>& col = fp.col64[i];
        im2col<double>(act.values.data(), n, h, w, ci, col);
        const std::vector<double> kmat = pack_kernels<double>(*cv);
        dgemm(false, false, m, co, 9 * ci, 1.0, col.data(), 9 * ci, kmat.data(), co, 0.0,
              next.values.data(), co);
        if (!keep_caches) col.clear();
      }
      for (int r = 0; r < m; ++r) {
        double* row = next.values.data() + static_cast<std::size_t>(r) * co;
        for (int ch = 0; ch < co; ++ch) row[ch] += cv->bias[ch];
      }
      act = std::move(next);
      cur = TensorShape{h, w, co};
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      const int nc = static_cast<int>(bn->gamma.size());
      const std::size_t positions = act.values.size() / nc;
      for (std::size_t p = 0; p < positions; ++p) {
        double* seg = act.values.data() + p * nc;
        for (int ch = 0; ch < nc; ++ch)
          seg[ch] = bn->gamma[ch] * (seg[ch] - bn->mean[ch]) / (bn->stddev[ch] + bn->epsilon) +
                    bn->beta[ch];
      }
    } else if (std::holds_alternative<ReLULayer>(layer)) {
      for (double& v : act.values) v = v > 0.0 ? v : 0.0;
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      const int h = cur.height, w = cur.width, c = cur.channels;
      const int oh = h / 2, ow = w / 2;
      Matrix next(n, static_cast<std::size_t>(oh) * ow * c);
      std::vector<int>* arg = keep_caches ? &fp.pool_arg[i] : nullptr;
      if (arg) arg->assign(next.values.size(), 0);
      for (std::size_t ni = 0; ni < n; ++ni) {
        const double* img = act.row(ni);
        double* dst = next.row(ni);
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox)
            for (int ch = 0; ch < c; ++ch) {
              double best = -std::numeric_limits<double>::infinity();
              int best_idx = 0;
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const int idx = ((2 * oy + dy) * w + (2 * ox + dx)) * c + ch;
                  if (img[idx] > best) {  // strict: first maximal entry wins
                    best = img[idx];
                    best_idx = idx;
                  }
                }
              const std::size_t out_idx = (static_cast<std::size_t>(oy) * ow + ox) * c + ch;
              dst[out_idx] = best;
              if (arg)
                (*arg)[ni * next.cols + out_idx] =
                    static_cast<int>(ni * act.cols + best_idx);
            }
      }
      act = std::move(next);
      cur = TensorShape{oh, ow, c};
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      cur = TensorShape{1, 1, cur.flat()};
    } else if (std::holds_alternative<SoftmaxOutputLayer>(layer)) {
      fp.logits = act;
      fp.softmax = act;
      for (std::size_t r = 0; r < act.rows; ++r) {
        double* row = fp.softmax.row(r);
        const double m = *std::max_element(row, row + act.cols);
        double sum = 0.0;
        for (std::size_t ci = 0; ci < act.cols; ++ci) {
          row[ci] = std::exp(row[ci] - m);
          sum += row[ci];
        }
        for (std::size_t ci = 0; ci < act.cols; ++ci) row[ci] /= sum;
      }
    }
  }
  if (fp.logits.empty() && last == static_cast<int>(model.layers.size()) - 1) {
    fp.logits = act;  // model without terminal softmax (not produced by validate_model)
  }
  if (stop_after >= 0) fp.inputs.resize(stop_after + 1), fp.in_shapes.resize(stop_after + 1);
  if (stop_after >= 0 && fp.logits.empty()) fp.logits = std::move(act);
  return fp;
}

// Backpropagates d(out of layer `start`) down to the batch. Fills `grads`
// (when non-null) and returns d(batch) when `want_dinput`.
Matrix run_backward(const NetworkModel& model, const ForwardPass& fp, int start,
                    Matrix dact, Gradients* grads, bool want_dinput,
                    const ComputeOptions& opts) {
  const std::size_t n = fp.batch_size;
  for (int i = start; i >= 0; --i) {
    const LayerSpec& layer = model.layers[i];
    const TensorShape& in_shape = fp.in_shapes[i];
    if (const auto* d = as_dense(layer)) {
      const int out = static_cast<int>(d->weights.rows);
      const int in = static_cast<int>(d->weights.cols);
      if (grads) {
        std::vector<double>& gw = grads->w[i];
        std::vector<double>& gb = grads->b[i];
        dgemm(true, false, out, in, static_cast<int>(n), 1.0, dact.values.data(), out,
              fp.inputs[i].values.data(), in, 1.0, gw.data(), in);
        for (std::size_t r = 0; r < n; ++r) {
          const double* row = dact.row(r);
          for (int c = 0; c < out; ++c) gb[c] += row[c];
        }
      }
      if (i == 0 && !want_dinput) break;
      Matrix dx(n, in);
      dgemm(false, false, static_cast<int>(n), in, out, 1.0, dact.values.data(), out,
            d->weights.values.data(), in, 0.0, dx.values.data(), in);
      dact = std::move(dx);
    } else if (const auto* cv = as_conv(layer)) {
      const int h = in_shape.height, w = in_shape.width;
      const int ci = cv->in_channels, co = cv->out_channels;
      const int m = static_cast<int>(n) * h * w;
      if (opts.conv_gemm_f32) {
        std::vector<float> dy(dact.values.size());
        for (std::size_t t = 0; t < dy.size(); ++t)
          dy[t] = static_cast<float>(dact.values[t]);
        const std::vector<float>* col = &fp.col32[i];
        std::vector<float> col_local;
        if (col->empty()) {
          im2col<float>(fp.inputs[i].values.data(), n, h, w, ci, col_local);
          col = &col_local;
        }
        if (grads) {
          std::vector<float> dkmat(static_cast<std::size_t>(9) * ci * co, 0.0f);
          sgemm_f(true, false, 9 * ci, co, m, col->data(), 9 * ci, dy.data(), co, 0.0f,
                  dkmat.data(), co);
          std::vector<double>& gw = grads->w[i];
          for (int o = 0; o < co; ++o)
            for (int c = 0; c < ci; ++c)
              for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw)
                  gw[((static_cast<std::size_t>(o) * ci + c) * 3 + kh) * 3 + kw] +=
                      dkmat[(static_cast<std::size_t>(kh * 3 + kw) * ci + c) * co + o];
          std::vector<double>& gb = grads->b[i];
          for (int r = 0; r < m; ++r) {
            const float* row = dy.data() + static_cast<std::size_t>(r) * co;
            for (int c = 0; c < co; ++c) gb[c] += row[c];
          }
        }
        if (i == 0 && !want_dinput) break;
        const std::vector<float> kmat = pack_kernels<float>(*cv);
        std::vector<float> dcol(static_cast<std::size_t>(m) * 9 * ci);
        sgemm_f(false, true, m, 9 * ci, co, dy.data(), co, kmat.data(), co, 0.0f,
                dcol.data(), 9 * ci);
        Matrix dx(n, static_cast<std::size_t>(h) * w * ci);
        col2im_add<float>(dcol, n, h, w, ci, dx.values.data());
        dact = std::move(dx);
      } else {
        const std::vector<double>* col = &fp.col64[i];
        std::vector<double> col_local;
        if (col->empty()) {
          im2col<double>(fp.inputs[i].values.data(), n, h, w, ci, col_local);
          col = &col_local;
        }
        if (grads) {
          std::vector<double> dkmat(static_cast<std::size_t>(9) * ci * co, 0.0);
          dgemm(true, false, 9 * ci, co, m, 1.0, col->data(), 9 * ci, dact.values.data(),
                co, 0.0, dkmat.data(), co);
          std::vector<double>& gw = grads->w[i];
          for (int o = 0; o < co; ++o)
            for (int c = 0; c < ci; ++c)
              for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw)
                  gw[((static_cast<std::size_t>(o) * ci + c) * 3 + kh) * 3 + kw] +=
                      dkmat[(static_cast<std::size_t>(kh * 3 + kw) * ci + c) * co + o];
          std::vector<double>& gb = grads->b[i];
          for (int r = 0; r < m; ++r) {
            const double* row = dact.values.data() + static_cast<std::size_t>(r) * co;
            for (int c = 0; c < co; ++c) gb[c] += row[c];
          }
        }
        if (i == 0 && !want_dinput) break;
        const std::vector<double> kmat = pack_kernels<double>(*cv);
        std::vector<double> dcol(static_cast<std::size_t>(m) * 9 * ci);
        dgemm(false, true, m, 9 * ci, co, 1.0, dact.values.data(), co, kmat.data(), co,
              0.0, dcol.data(), 9 * ci);
        Matrix dx(n, static_cast<std::size_t>(h) * w * ci);
        col2im_add<double>(dcol, n, h, w, ci, dx.values.data());
        dact = std::move(dx);
      }
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      const int nc = static_cast<int>(bn->gamma.size());
      const std::size_t positions = dact.values.size() / nc;
      for (std::size_t p = 0; p < positions; ++p) {
        double* seg = dact.values.data() + p * nc;
        for (int ch = 0; ch < nc; ++ch)
          seg[ch] *= bn->gamma[ch] / (bn->stddev[ch] + bn->epsilon);
      }
    } else if (std::holds_alternative<ReLULayer>(layer)) {
      const Matrix& pre = fp.inputs[i];
      for (std::size_t t = 0; t < dact.values.size(); ++t)
        if (pre.values[t] <= 0.0) dact.values[t] = 0.0;  // subgradient 0 at 0
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      const std::vector<int>& arg = fp.pool_arg[i];
      detail::require(!arg.empty(), "backward: pool argmax cache missing");
      Matrix dx(n, static_cast<std::size_t>(in_shape.flat()));
      for (std::size_t t = 0; t < dact.values.size(); ++t)
        dx.values[arg[t]] += dact.values[t];
      dact = std::move(dx);
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      // identical memory layout
    } else if (std::holds_alternative<SoftmaxOutputLayer>(layer)) {
      throw InvalidArgument("backward: cannot start above the softmax layer");
    }
  }
  return dact;
}

Gradients zero_gradients(const NetworkModel& model) {
  Gradients g;
  g.w.resize(model.layers.size());
  g.b.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (const auto* d = as_dense(model.layers[i])) {
      g.w[i].assign(d->weights.values.size(), 0.0);
      g.b[i].assign(d->bias.size(), 0.0);
    } else if (const auto* c = as_conv(model.layers[i])) {
      g.w[i].assign(c->kernels.size(), 0.0);
      g.b[i].assign(c->bias.size(), 0.0);
    }
  }
  return g;
}

double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels,
                             double* accuracy) {
  double loss = 0.0;
  int correct = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const double* row = logits.row(r);
    const int y = labels[r];
    const double m = *std::max_element(row, row + logits.cols);
    double sum = 0.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < logits.cols; ++c) {
      sum += std::exp(row[c] - m);
      if (row[c] > row[arg]) arg = c;
    }
    loss += std::log(sum) + m - row[y];
    if (static_cast<int>(arg) == y) ++correct;
  }
  if (accuracy) *accuracy = static_cast<double>(correct) / static_cast<double>(logits.rows);
  return loss / static_cast<double>(logits.rows);
}

}  // namespace

ActivationRecord forward(const NetworkModel& model, const Matrix& batch,
                         const ComputeOptions& opts) {
  ForwardPass fp = run_forward(model, batch, opts, /*keep_caches=*/false);
  ActivationRecord rec;
  rec.pre_relu.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (std::holds_alternative<ReLULayer>(model.layers[i]))
      rec.pre_relu[i] = std::move(fp.inputs[i]);
  rec.logits = std::move(fp.logits);
  rec.softmax = std::move(fp.softmax);
  return rec;
}

Matrix node_series(const NetworkModel& /*model*/, const ActivationRecord& record,
                   const Matrix& batch, const NeuronLayer& layer) {
  if (layer.weight_layer < 0) return batch;
  if (layer.relu_layer < 0) return record.logits;  // logits layer
  const Matrix& pre = record.pre_relu[layer.relu_layer];
  detail::require(!pre.empty(), "node_series: capture missing for this layer");
  if (!layer.conv) return pre;
  // Channel series: L1 over the spatial map.
  const int c = layer.width;
  const std::size_t positions = pre.cols / c;
  Matrix series(pre.rows, c);
  for (std::size_t r = 0; r < pre.rows; ++r) {
    const double* row = pre.row(r);
    double* out = series.row(r);
    for (std::size_t p = 0; p < positions; ++p)
      for (int ch = 0; ch < c; ++ch) out[ch] += std::abs(row[p * c + ch]);
  }
  return series;
}

BatchEval evaluate_batch(const NetworkModel& model, const Matrix& batch,
                         std::span<const int> labels, const ComputeOptions& opts) {
  detail::require(labels.size() == batch.rows, "evaluate_batch: one label per row");
  ForwardPass fp = run_forward(model, batch, opts, /*keep_caches=*/false);
  BatchEval ev;
  ev.loss = softmax_cross_entropy(fp.logits, labels, &ev.accuracy);
  return ev;
}

LossGradients param_gradients(const NetworkModel& model, const Matrix& batch,
                              std::span<const int> labels, const ComputeOptions& opts) {
  detail::require(labels.size() == batch.rows, "param_gradients: one label per row");
  ForwardPass fp = run_forward(model, batch, opts, /*keep_caches=*/true);
  LossGradients out;
  out.grads = zero_gradients(model);
  out.loss = softmax_cross_entropy(fp.logits, labels, &out.accuracy);

  const std::size_t n = batch.rows;
  Matrix dlogits = fp.softmax;
  for (std::size_t r = 0; r < n; ++r) {
    dlogits(r, labels[r]) -= 1.0;
    double* row = dlogits.row(r);
    for (std::size_t c = 0; c < dlogits.cols; ++c) row[c] /= static_cast<double>(n);
  }
  const int start = static_cast<int>(model.layers.size()) - 2;  // below the softmax
  run_backward(model, fp, start, std::move(dlogits), &out.grads, false, opts);
  return out;
}

namespace {

// Capture tensor for a subcluster's layer: pre-ReLU input of relu_layer, or
// the logits for the output layer. Returns the layer index whose OUTPUT is
// the capture tensor.
int capture_source_layer(const NetworkModel& model, const NeuronLayer& nl) {
  detail::require(nl.weight_layer >= 0,
                  "subcluster objective: input-layer neurons have no incoming weights");
  if (nl.relu_layer >= 0) return nl.relu_layer - 1;
  // Logits layer: everything up to the last layer before the softmax.
  int idx = static_cast<int>(model.layers.size()) - 1;
  if (std::holds_alternative<SoftmaxOutputLayer>(model.layers[idx])) --idx;
  return idx;
}

const NeuronLayer& find_neuron_layer(const std::vector<NeuronLayer>& layers, int id) {
  detail::require(id >= 0 && id < static_cast<int>(layers.size()),
                  "subcluster: layer id out of range");
  return layers[id];
}

// Empty subclusters are legal everywhere: they mask nothing, activate
// nothing, and cost nothing.
void check_subcluster(const NeuronLayer& nl, const Subcluster& sub) {
  for (int v : sub.neurons)
    detail::require(v >= 0 && v < nl.width, "subcluster: neuron index out of range");
}

}  // namespace

double subcluster_l1(const NetworkModel& model, std::span<const double> image,
                     const Subcluster& sub) {
  const auto nls = neuron_layers(model);
  const NeuronLayer& nl = find_neuron_layer(nls, sub.layer);
  check_subcluster(nl, sub);
  Matrix batch(1, image.size());
  std::copy(image.begin(), image.end(), batch.values.begin());
  const int src = capture_source_layer(model, nl);
  ForwardPass fp = run_forward(model, batch, {}, false, src);
  const Matrix& cap = fp.logits;
  double total = 0.0;
  if (nl.conv) {
    const std::size_t positions = cap.cols / nl.width;
    for (int ch : sub.neurons)
      for (std::size_t p = 0; p < positions; ++p)
        total += std::abs(cap.values[p * nl.width + ch]);
  } else {
    for (int ch : sub.neurons) total += std::abs(cap.values[ch]);
  }
  return total;
}

std::vector<double> input_gradient(const NetworkModel& model, std::span<const double> image,
                                   const Subcluster& sub) {
  const auto nls = neuron_layers(model);
  const NeuronLayer& nl = find_neuron_layer(nls, sub.layer);
  check_subcluster(nl, sub);
  detail::require(static_cast<int>(image.size()) == model.input.flat(),
                  "input_gradient: image size does not match the input shape");
  Matrix batch(1, image.size());
  std::copy(image.begin(), image.end(), batch.values.begin());
  const int src = capture_source_layer(model, nl);
  ForwardPass fp = run_forward(model, batch, {}, true, src);

  Matrix seed(1, fp.logits.cols);
  const double* cap = fp.logits.values.data();
  if (nl.conv) {
    const std::size_t positions = seed.cols / nl.width;
    for (int ch : sub.neurons)
      for (std::size_t p = 0; p < positions; ++p) {
        const double v = cap[p * nl.width + ch];
        seed.values[p * nl.width + ch] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      }
  } else {
    for (int ch : sub.neurons) {
      const double v = cap[ch];
      seed.values[ch] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    }
  }
  Matrix dx = run_backward(model, fp, src, std::move(seed), nullptr, true, {});
  return std::move(dx.values);
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

LesionMask make_mask(const NetworkModel& model, const Subcluster& sub) {
  const auto nls = neuron_layers(model);
  const NeuronLayer& nl = find_neuron_layer(nls, sub.layer);
  check_subcluster(nl, sub);
  LesionMask mask;
  mask.drop.resize(nls.size());
  for (const NeuronLayer& l : nls) mask.drop[l.id].assign(l.width, false);
  for (int v : sub.neurons) mask.drop[sub.layer][v] = true;
  return mask;
}

LesionMask merge_masks(const LesionMask& a, const LesionMask& b) {
  detail::require(a.drop.size() == b.drop.size(), "merge_masks: layer count mismatch");
  LesionMask out = a;
  for (std::size_t l = 0; l < out.drop.size(); ++l) {
    detail::require(a.drop[l].size() == b.drop[l].size(), "merge_masks: width mismatch");
    for (std::size_t i = 0; i < out.drop[l].size(); ++i)
      if (b.drop[l][i]) out.drop[l][i] = true;
  }
  return out;
}

NetworkModel mask_neurons(const NetworkModel& model, const LesionMask& mask) {
  const auto nls = neuron_layers(model);
  detail::require(mask.drop.size() == nls.size(), "mask_neurons: layer count mismatch");
  const auto shapes = layer_shapes(model);
  NetworkModel out = model;

  for (const NeuronLayer& nl : nls) {
    const std::vector<bool>& drop = mask.drop[nl.id];
    detail::require(static_cast<int>(drop.size()) == nl.width,
                    "mask_neurons: width mismatch");
    const bool any = std::find(drop.begin(), drop.end(), true) != drop.end();
    if (!any) continue;

    // Incoming weights and bias.
    if (nl.weight_layer >= 0) {
      if (auto* d = std::get_if<DenseLayer>(&out.layers[nl.weight_layer])) {
        for (int i = 0; i < nl.width; ++i)
          if (drop[i]) {
            std::fill_n(d->weights.row(i), d->weights.cols, 0.0);
            d->bias[i] = 0.0;
          }
      } else if (auto* c = std::get_if<Conv2DLayer>(&out.layers[nl.weight_layer])) {
        for (int i = 0; i < nl.width; ++i)
          if (drop[i]) {
            std::fill_n(c->kernels.begin() + static_cast<std::size_t>(i) * c->in_channels * 9,
                        static_cast<std::size_t>(c->in_channels) * 9, 0.0);
            c->bias[i] = 0.0;
          }
      }
    }

    // Outgoing weights.
    const int next = next_weight_layer(model, nl.weight_layer + 1);
    if (next < 0) continue;
    if (auto* c = std::get_if<Conv2DLayer>(&out.layers[next])) {
      detail::require(c->in_channels == nl.width, "mask_neurons: channel count mismatch");
      for (int i = 0; i < nl.width; ++i)
        if (drop[i])
          for (int o = 0; o < c->out_channels; ++o)
            for (int kh = 0; kh < 3; ++kh)
              for (int kw = 0; kw < 3; ++kw) c->k(o, i, kh, kw) = 0.0;
    } else if (auto* d = std::get_if<DenseLayer>(&out.layers[next])) {
      if (!nl.conv) {
        detail::require(static_cast<int>(d->weights.cols) == nl.width,
                        "mask_neurons: fan-in mismatch");
        for (std::size_t r = 0; r < d->weights.rows; ++r)
          for (int i = 0; i < nl.width; ++i)
            if (drop[i]) d->weights(r, i) = 0.0;
      } else {
        // Conv channel feeding a dense layer through a flatten: one column
        // per retained spatial position, NHWC order.
        TensorShape before{0, 0, 0};
        for (int j = next - 1; j >= 0; --j)
          if (std::holds_alternative<FlattenLayer>(model.layers[j])) {
            before = j == 0 ? TensorShape{model.input.height, model.input.width,
                                          model.input.channels}
                            : shapes[j - 1];
            break;
          }
        detail::require(before.channels == nl.width &&
                            before.flat() == static_cast<int>(d->weights.cols),
                        "mask_neurons: flatten shape mismatch");
        const int positions = before.height * before.width;
        for (std::size_t r = 0; r < d->weights.rows; ++r) {
          double* row = d->weights.row(r);
          for (int p = 0; p < positions; ++p)
            for (int i = 0; i < nl.width; ++i)
              if (drop[i]) row[static_cast<std::size_t>(p) * nl.width + i] = 0.0;
        }
      }
    }
  }
  return out;
}

NetworkModel mask_neurons(const NetworkModel& model, const Subcluster& sub) {
  return mask_neurons(model, make_mask(model, sub));
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'N', 'M', 'O', 'D', '1', '\0', '\0'};

enum LayerTag : std::uint8_t {
  kTagInput = 0,
  kTagDense = 1,
  kTagConv = 2,
  kTagBatchNorm = 3,
  kTagReLU = 4,
  kTagMaxPool = 5,
  kTagFlatten = 6,
  kTagSoftmax = 7,
};

struct Writer {
  std::string buf;
  void u8(std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f32_tensor(std::span<const double> vals) {
    for (double v : vals) f32(static_cast<float>(v));
  }
};

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;        // relative to payload start
  std::size_t base_offset;    // bytes before the payload in the file

  std::uint64_t file_offset() const { return base_offset + pos; }
  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size())
      throw FormatError(std::string("model file truncated while reading ") + what,
                        file_offset());
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void f32_tensor(std::vector<double>& out, std::size_t count, const char* what) {
    need(4 * count, what);
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      out[i] = static_cast<double>(f32(what));
  }
};

}  // namespace

void save_model(const NetworkModel& model, const std::filesystem::path& path) {
  validate_model(model);
  Writer w;
  w.u32(static_cast<std::uint32_t>(model.layers.size() + 1));
  w.u8(kTagInput);
  w.u32(static_cast<std::uint32_t>(model.input.height));
  w.u32(static_cast<std::uint32_t>(model.input.width));
  w.u32(static_cast<std::uint32_t>(model.input.channels));
  for (const LayerSpec& layer : model.layers) {
    if (const auto* d = as_dense(layer)) {
      w.u8(kTagDense);
      w.u32(static_cast<std::uint32_t>(d->weights.rows));
      w.u32(static_cast<std::uint32_t>(d->weights.cols));
      w.f32_tensor(d->weights.values);
      w.f32_tensor(d->bias);
    } else if (const auto* c = as_conv(layer)) {
      w.u8(kTagConv);
      w.u32(static_cast<std::uint32_t>(c->out_channels));
      w.u32(static_cast<std::uint32_t>(c->in_channels));
      w.u32(3);
      w.u32(3);
      w.f32_tensor(c->kernels);
      w.f32_tensor(c->bias);
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      w.u8(kTagBatchNorm);
      w.u32(static_cast<std::uint32_t>(bn->gamma.size()));
      w.f32_tensor(bn->gamma);
      w.f32_tensor(bn->beta);
      w.f32_tensor(bn->mean);
      w.f32_tensor(bn->stddev);
      w.f32(static_cast<float>(bn->epsilon));
    } else if (std::holds_alternative<ReLULayer>(layer)) {
      w.u8(kTagReLU);
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      w.u8(kTagMaxPool);
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      w.u8(kTagFlatten);
    } else {
      w.u8(kTagSoftmax);
    }
  }
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(w.buf.data()),
            static_cast<uInt>(w.buf.size())));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open model file for writing: " + path.string());
  f.write(kMagic, 8);
  f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
  Writer tail;
  tail.u32(crc);
  f.write(tail.buf.data(), 4);
  if (!f) throw FormatError("short write to model file: " + path.string());
}

NetworkModel load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open model file: " + path.string());
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (all.size() < 8 || std::memcmp(all.data(), kMagic, 8) != 0)
    throw FormatError("bad model file magic", 0);
  if (all.size() < 12) throw FormatError("model file truncated before checksum", all.size());

  const std::string payload = all.substr(8, all.size() - 12);
  // Parse before verifying the checksum: a truncated file can't carry a valid
  // CRC anyway, and the reader's bounds checks point at the exact tensor
  // where the data ran out.
  const std::uint32_t stored =
      static_cast<std::uint32_t>(static_cast<unsigned char>(all[all.size() - 4])) |
      static_cast<std::uint32_t>(static_cast<unsigned char>(all[all.size() - 3])) << 8 |
      static_cast<std::uint32_t>(static_cast<unsigned char>(all[all.size() - 2])) << 16 |
      static_cast<std::uint32_t>(static_cast<unsigned char>(all[all.size() - 1])) << 24;
  const std::uint32_t actual = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));

  Reader r{payload, 0, 8};
  NetworkModel model;
  const std::uint32_t entries = r.u32("layer count");
  if (entries == 0) throw FormatError("model file has no layers", r.file_offset());
  bool have_input = false;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::uint8_t tag = r.u8("layer tag");
    switch (tag) {
      case kTagInput: {
        if (have_input || e != 0)
          throw FormatError("input shape entry must come first", r.file_offset());
        model.input.height = static_cast<int>(r.u32("input height"));
        model.input.width = static_cast<int>(r.u32("input width"));
        model.input.channels = static_cast<int>(r.u32("input channels"));
        have_input = true;
        break;
      }
      case kTagDense: {
        DenseLayer d;
        const std::uint32_t out = r.u32("dense rows");
        const std::uint32_t in = r.u32("dense cols");
        if (out == 0 || in == 0 || static_cast<std::uint64_t>(out) * in > (1u << 30))
          throw FormatError("unreasonable dense shape", r.file_offset());
        d.weights = Matrix(out, in);
        const std::string name = "layer " + std::to_string(e) + " dense weights";
        r.f32_tensor(d.weights.values, static_cast<std::size_t>(out) * in, name.c_str());
        r.f32_tensor(d.bias, out, "dense bias");
        model.layers.emplace_back(std::move(d));
        break;
      }
      case kTagConv: {
        Conv2DLayer c;
        c.out_channels = static_cast<int>(r.u32("conv out channels"));
        c.in_channels = static_cast<int>(r.u32("conv in channels"));
        const std::uint32_t kh = r.u32("conv kernel height");
        const std::uint32_t kw = r.u32("conv kernel width");
        if (kh != 3 || kw != 3)
          throw FormatError("only 3x3 conv kernels are supported", r.file_offset());
        if (c.out_channels <= 0 || c.in_channels <= 0 ||
            static_cast<std::uint64_t>(c.out_channels) * c.in_channels > (1u << 24))
          throw FormatError("unreasonable conv shape", r.file_offset());
        const std::string name = "layer " + std::to_string(e) + " conv kernels";
        r.f32_tensor(c.kernels,
                     static_cast<std::size_t>(c.out_channels) * c.in_channels * 9,
                     name.c_str());
        r.f32_tensor(c.bias, c.out_channels, "conv bias");
        model.layers.emplace_back(std::move(c));
        break;
      }
      case kTagBatchNorm: {
        BatchNormLayer bn;
        const std::uint32_t nc = r.u32("batch-norm channels");
        if (nc == 0 || nc > (1u << 24))
          throw FormatError("unreasonable batch-norm width", r.file_offset());
        r.f32_tensor(bn.gamma, nc, "batch-norm gamma");
        r.f32_tensor(bn.beta, nc, "batch-norm beta");
        r.f32_tensor(bn.mean, nc, "batch-norm mean");
        r.f32_tensor(bn.stddev, nc, "batch-norm stddev");
        bn.epsilon = static_cast<double>(r.f32("batch-norm epsilon"));
        model.layers.emplace_back(std::move(bn));
        break;
      }
      case kTagReLU:
        model.layers.emplace_back(ReLULayer{});
        break;
      case kTagMaxPool:
        model.layers.emplace_back(MaxPool2x2Layer{});
        break;
      case kTagFlatten:
        model.layers.emplace_back(FlattenLayer{});
        break;
      case kTagSoftmax:
        model.layers.emplace_back(SoftmaxOutputLayer{});
        break;
      default:
        throw FormatError("unknown layer tag " + std::to_string(tag), r.file_offset() - 1);
    }
  }
  if (!have_input) throw FormatError("model file lacks an input shape entry", 8);
  if (r.pos != payload.size())
    throw FormatError("trailing bytes after the last layer", r.file_offset());
  if (stored != actual)
    throw FormatError("model file checksum mismatch", all.size() - 4);

  for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it)
    if (const auto* d = as_dense(*it)) {
      model.class_count = static_cast<int>(d->weights.rows);
      break;
    }
  try {
    validate_model(model);
  } catch (const InvalidArgument& err) {
    throw FormatError(std::string("model file fails validation: ") + err.what());
  }
  return model;
}

}  // namespace modprobe
