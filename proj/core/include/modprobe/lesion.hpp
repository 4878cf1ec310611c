#pragma once

#include <cstdint>
#include <vector>

#include "modprobe/data.hpp"
#include "modprobe/model.hpp"

namespace modprobe {

// Per-class argmax-correct counts from one evaluation pass.
struct ClassCounts {
  std::vector<std::int64_t> correct;
  std::vector<std::int64_t> total;

  double overall() const;
  double class_accuracy(int cls) const;
};

struct LesionResult {
  Subcluster subcluster;
  double acc_drop = 0.0;
  std::vector<double> class_drops;
  double class_range = 0.0;
};

ClassCounts evaluate_classes(const NetworkModel& model, const LabeledDataset& data,
                             const ComputeOptions& opts = {});

// Fraction of argmax-correct predictions; ties go to the lowest class index.
double accuracy(const NetworkModel& model, const LabeledDataset& data,
                const ComputeOptions& opts = {});

// Acc(model, test) - Acc(masked, test). Empty subclusters cost nothing and
// drop exactly 0.
double lesion_importance(const NetworkModel& model, const Subcluster& c,
                         const LabeledDataset& test, const ComputeOptions& opts = {});

// Per-class drops and their range; requires every class present in `test`.
LesionResult lesion_class_range(const NetworkModel& model, const Subcluster& c,
                                const LabeledDataset& test, const ComputeOptions& opts = {});

// Same measurements against precomputed baseline counts, one masked pass.
LesionResult lesion_measure(const NetworkModel& model, const ClassCounts& baseline,
                            const Subcluster& c, const LabeledDataset& test,
                            const ComputeOptions& opts = {});

}  // namespace modprobe
