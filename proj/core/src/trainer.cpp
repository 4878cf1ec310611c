#include "modprobe/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "modprobe/errors.hpp"
#include "modprobe/rng.hpp"

namespace modprobe {
namespace {

// Fan counts for Glorot limits. Conv fans include the 3x3 receptive field.
void layer_fans(const LayerSpec& layer, int& fan_in, int& fan_out) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) {
    fan_in = static_cast<int>(d->weights.cols);
    fan_out = static_cast<int>(d->weights.rows);
  } else if (const auto* c = std::get_if<Conv2DLayer>(&layer)) {
    fan_in = c->in_channels * 9;
    fan_out = c->out_channels * 9;
  } else {
    fan_in = fan_out = 0;
  }
}

bool parse_mlp_name(const std::string& name, int& width, int& depth) {
  if (name.rfind("mlp-", 0) != 0) return false;
  const std::string rest = name.substr(4);
  const std::size_t x = rest.find('x');
  if (x == std::string::npos) return false;
  const auto parse = [](const std::string& s, int& out) {
    const char* b = s.data();
    const char* e = b + s.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e && out > 0;
  };
  return parse(rest.substr(0, x), width) && parse(rest.substr(x + 1), depth);
}

}  // namespace

void glorot_init(NetworkModel& model, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x696e6974));  // "init"
  for (LayerSpec& layer : model.layers) {
    int fan_in = 0, fan_out = 0;
    layer_fans(layer, fan_in, fan_out);
    if (fan_in == 0) continue;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      for (double& v : d->weights.values) v = rng.uniform(-limit, limit);
      std::fill(d->bias.begin(), d->bias.end(), 0.0);
    } else if (auto* c = std::get_if<Conv2DLayer>(&layer)) {
      for (double& v : c->kernels) v = rng.uniform(-limit, limit);
      std::fill(c->bias.begin(), c->bias.end(), 0.0);
    }
  }
}

NetworkModel init_params(const ArchitectureSpec& arch, std::uint64_t seed) {
  NetworkModel model;
  model.input = arch.input;
  model.class_count = arch.class_count;

  const auto dense = [](int out, int in) {
    DenseLayer d;
    d.weights = Matrix(out, in);
    d.bias.assign(out, 0.0);
    return d;
  };
  const auto conv = [](int out, int in) {
    Conv2DLayer c;
    c.out_channels = out;
    c.in_channels = in;
    c.kernels.assign(static_cast<std::size_t>(out) * in * 9, 0.0);
    c.bias.assign(out, 0.0);
    return c;
  };

  int width = 0, depth = 0;
  if (parse_mlp_name(arch.name, width, depth)) {
    int in = arch.input.flat();
    for (int i = 0; i < depth; ++i) {
      model.layers.emplace_back(dense(width, in));
      model.layers.emplace_back(ReLULayer{});
      in = width;
    }
    model.layers.emplace_back(dense(arch.class_count, in));
    model.layers.emplace_back(SoftmaxOutputLayer{});
  } else if (arch.name == "cnn-small") {
    detail::require(arch.input.height % 4 == 0 && arch.input.width % 4 == 0,
                    "cnn-small: input must pool twice");
    model.layers.emplace_back(conv(64, arch.input.channels));
    model.layers.emplace_back(ReLULayer{});
    model.layers.emplace_back(conv(64, 64));
    model.layers.emplace_back(ReLULayer{});
    model.layers.emplace_back(MaxPool2x2Layer{});
    model.layers.emplace_back(conv(64, 64));
    model.layers.emplace_back(ReLULayer{});
    model.layers.emplace_back(MaxPool2x2Layer{});
    model.layers.emplace_back(FlattenLayer{});
    const int flat = (arch.input.height / 4) * (arch.input.width / 4) * 64;
    model.layers.emplace_back(dense(128, flat));
    model.layers.emplace_back(ReLULayer{});
    model.layers.emplace_back(dense(arch.class_count, 128));
    model.layers.emplace_back(SoftmaxOutputLayer{});
  } else {
    throw InvalidArgument("unknown architecture: " + arch.name);
  }
  glorot_init(model, seed);
  validate_model(model);
  return model;
}

TrainConfig default_train_config(const std::string& arch_name) {
  TrainConfig cfg;
  if (arch_name == "cnn-small") {
    cfg.epochs = 10;
    cfg.batch_size = 64;
  } else {
    int width = 0, depth = 0;
    if (!parse_mlp_name(arch_name, width, depth))
      throw InvalidArgument("unknown architecture: " + arch_name);
    cfg.epochs = 20;
    cfg.batch_size = 128;
  }
  return cfg;
}

AdamState make_adam_state(const NetworkModel& model) {
  AdamState st;
  const std::size_t n = model.layers.size();
  st.m_w.resize(n);
  st.v_w.resize(n);
  st.m_b.resize(n);
  st.v_b.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t wn = 0, bn = 0;
    if (const auto* d = std::get_if<DenseLayer>(&model.layers[i])) {
      wn = d->weights.values.size();
      bn = d->bias.size();
    } else if (const auto* c = std::get_if<Conv2DLayer>(&model.layers[i])) {
      wn = c->kernels.size();
      bn = c->bias.size();
    }
    st.m_w[i].assign(wn, 0.0);
    st.v_w[i].assign(wn, 0.0);
    st.m_b[i].assign(bn, 0.0);
    st.v_b[i].assign(bn, 0.0);
  }
  return st;
}

namespace {

void adam_update(std::vector<double>& params, const std::vector<double>& grad,
                 std::vector<double>& m, std::vector<double>& v, double lr_t,
                 const TrainConfig& cfg) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    params[i] -= lr_t * m[i] / (std::sqrt(v[i]) + cfg.epsilon);
  }
}

}  // namespace

void adam_step(NetworkModel& model, const Gradients& grads, AdamState& state,
               const TrainConfig& cfg) {
  ++state.step;
  // Keras-style update: bias correction folded into the step size, epsilon
  // outside the square root.
  const double lr_t = cfg.learning_rate *
                      std::sqrt(1.0 - std::pow(cfg.beta2, state.step)) /
                      (1.0 - std::pow(cfg.beta1, state.step));
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (state.m_w[i].empty()) continue;
    if (auto* d = std::get_if<DenseLayer>(&model.layers[i])) {
      adam_update(d->weights.values, grads.w[i], state.m_w[i], state.v_w[i], lr_t, cfg);
      adam_update(d->bias, grads.b[i], state.m_b[i], state.v_b[i], lr_t, cfg);
    } else if (auto* c = std::get_if<Conv2DLayer>(&model.layers[i])) {
      adam_update(c->kernels, grads.w[i], state.m_w[i], state.v_w[i], lr_t, cfg);
      adam_update(c->bias, grads.b[i], state.m_b[i], state.v_b[i], lr_t, cfg);
    }
  }
}

TrainResult train(NetworkModel& model, const LabeledDataset& train_data,
                  const TrainConfig& cfg, const LabeledDataset* eval_data,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  detail::require(train_data.size() > 0, "train: empty dataset");
  detail::require(cfg.batch_size > 0 && cfg.epochs >= 0, "train: bad schedule");
  validate_model(model);

  AdamState state = make_adam_state(model);
  TrainResult result;
  const std::size_t n = train_data.size();
  std::vector<int> order(n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed ^ static_cast<std::uint64_t>(epoch), 0x65706f63));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0, acc_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - start);
      std::vector<int> rows(order.begin() + start, order.begin() + start + count);
      const Matrix batch = batch_of(train_data, rows);
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = train_data.labels[rows[i]];

      LossGradients lg = param_gradients(model, batch, labels, cfg.compute);
      adam_step(model, lg.grads, state, cfg);
      loss_sum += lg.loss * count;
      acc_sum += lg.accuracy * count;
      seen += count;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(seen);
    log.train_accuracy = acc_sum / static_cast<double>(seen);
    log.eval_accuracy = std::numeric_limits<double>::quiet_NaN();
    if (eval_data && eval_data->size() > 0) {
      double correct = 0.0;
      const std::size_t chunk = model.input.height > 1 && model.input.width > 1 &&
                                        std::any_of(model.layers.begin(), model.layers.end(),
                                                    [](const LayerSpec& l) {
                                                      return std::holds_alternative<Conv2DLayer>(l);
                                                    })
                                    ? 64
                                    : 2048;
      for (std::size_t s = 0; s < eval_data->size(); s += chunk) {
        const std::size_t c = std::min(chunk, eval_data->size() - s);
        const Matrix b = batch_of(*eval_data, s, c);
        const std::span<const int> lab(eval_data->labels.data() + s, c);
        correct += evaluate_batch(model, b, lab, cfg.compute).accuracy * c;
      }
      log.eval_accuracy = correct / static_cast<double>(eval_data->size());
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void save_train_log(const TrainResult& result, const std::filesystem::path& path,
                    const std::string& header_comment) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  if (!header_comment.empty()) f << "# " << header_comment << "\n";
  f << "epoch,train_loss,train_accuracy,eval_accuracy\n";
  f.precision(17);
  for (const EpochLog& l : result.log) {
    f << l.epoch << ',' << l.train_loss << ',' << l.train_accuracy << ',';
    if (std::isnan(l.eval_accuracy))
      f << "";
    else
      f << l.eval_accuracy;
    f << '\n';
  }
}

}  // namespace modprobe
