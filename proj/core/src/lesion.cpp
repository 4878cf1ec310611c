#include "modprobe/lesion.hpp"

#include <algorithm>
#include <variant>

#include "modprobe/errors.hpp"

namespace modprobe {

double ClassCounts::overall() const {
  std::int64_t c = 0, n = 0;
  for (std::size_t i = 0; i < total.size(); ++i) {
    c += correct[i];
    n += total[i];
  }
  detail::require(n > 0, "accuracy of an empty dataset");
  return static_cast<double>(c) / static_cast<double>(n);
}

double ClassCounts::class_accuracy(int cls) const {
  detail::require(cls >= 0 && static_cast<std::size_t>(cls) < total.size(),
                  "class out of range");
  detail::require(total[cls] > 0, "class absent from the dataset");
  return static_cast<double>(correct[cls]) / static_cast<double>(total[cls]);
}

ClassCounts evaluate_classes(const NetworkModel& model, const LabeledDataset& data,
                             const ComputeOptions& opts) {
  detail::require(data.size() > 0, "evaluate_classes: empty dataset");
  detail::require(static_cast<int>(data.example_floats()) == model.input.flat(),
                  "evaluate_classes: dataset does not match the model input");
  ClassCounts counts;
  counts.correct.assign(model.class_count, 0);
  counts.total.assign(model.class_count, 0);

  const bool has_conv = std::any_of(
      model.layers.begin(), model.layers.end(),
      [](const LayerSpec& l) { return std::holds_alternative<Conv2DLayer>(l); });
  // Chunk size is fixed here so results cannot depend on caller batching.
  const std::size_t chunk = has_conv ? 64 : 2048;

  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t count = std::min(chunk, data.size() - start);
    const Matrix batch = batch_of(data, start, count);
    const ActivationRecord rec = forward(model, batch, opts);
    for (std::size_t r = 0; r < count; ++r) {
      const double* logits = rec.logits.row(r);
      int best = 0;
      for (int c = 1; c < model.class_count; ++c)
        if (logits[c] > logits[best]) best = c;
      const int label = data.labels[start + r];
      detail::require(label >= 0 && label < model.class_count,
                      "evaluate_classes: label out of range");
      counts.total[label] += 1;
      if (best == label) counts.correct[label] += 1;
    }
  }
  return counts;
}

double accuracy(const NetworkModel& model, const LabeledDataset& data,
                const ComputeOptions& opts) {
  return evaluate_classes(model, data, opts).overall();
}

LesionResult lesion_measure(const NetworkModel& model, const ClassCounts& baseline,
                            const Subcluster& c, const LabeledDataset& test,
                            const ComputeOptions& opts) {
  detail::require(baseline.total.size() == static_cast<std::size_t>(model.class_count),
                  "lesion_measure: baseline/model class mismatch");
  LesionResult res;
  res.subcluster = c;
  res.class_drops.assign(model.class_count, 0.0);
  for (int i = 0; i < model.class_count; ++i)
    detail::require(baseline.total[i] > 0,
                    "lesion: class " + std::to_string(i) + " absent from the test set");
  if (c.neurons.empty()) return res;  // exact zeros, no evaluation

  const NetworkModel masked = mask_neurons(model, c);
  const ClassCounts after = evaluate_classes(masked, test, opts);
  res.acc_drop = baseline.overall() - after.overall();
  double lo = 0.0, hi = 0.0;
  for (int i = 0; i < model.class_count; ++i) {
    res.class_drops[i] = baseline.class_accuracy(i) - after.class_accuracy(i);
    if (i == 0) {
      lo = hi = res.class_drops[i];
    } else {
      lo = std::min(lo, res.class_drops[i]);
      hi = std::max(hi, res.class_drops[i]);
    }
  }
  res.class_range = hi - lo;
  return res;
}

double lesion_importance(const NetworkModel& model, const Subcluster& c,
                         const LabeledDataset& test, const ComputeOptions& opts) {
  if (c.neurons.empty()) return 0.0;
  const NetworkModel masked = mask_neurons(model, c);
  return accuracy(model, test, opts) - accuracy(masked, test, opts);
}

LesionResult lesion_class_range(const NetworkModel& model, const Subcluster& c,
                                const LabeledDataset& test, const ComputeOptions& opts) {
  return lesion_measure(model, evaluate_classes(model, test, opts), c, test, opts);
}

}  // namespace modprobe
