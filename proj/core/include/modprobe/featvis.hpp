#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "modprobe/model.hpp"

namespace modprobe {

struct FeatureVisualization {
  std::vector<double> image;  // row-major h*w*c, clamped to [0,1]
  double score = 0.0;
  double initial_score = 0.0;
  double softmax_entropy = 0.0;
  int steps = 0;
  std::uint64_t seed = 0;
};

// Activation maximization of ||Act(x, c)||_1: seeded uniform noise start in
// [0.25, 0.75], per-step random jitter (+-2 px, zero fill) then random
// nearest-neighbor scale (0.95-1.05, center crop/pad) ahead of the gradient,
// Adam ascent (lr 0.05) on the un-transformed image, clamp to [0,1] each
// step. Score and entropy come from the final un-transformed image.
FeatureVisualization visualize_subcluster(const NetworkModel& model, const Subcluster& c,
                                          int steps, std::uint64_t seed,
                                          const ComputeOptions& opts = {});

// H = -sum p ln p of the softmax outputs for one image, in nats.
double softmax_entropy(const NetworkModel& model, std::span<const double> image,
                       const ComputeOptions& opts = {});

// 8-bit binary PGM; `comment` lands in a '#' line after the magic.
void save_pgm(const std::filesystem::path& path, const std::vector<double>& image,
              int height, int width, const std::string& comment);

}  // namespace modprobe
