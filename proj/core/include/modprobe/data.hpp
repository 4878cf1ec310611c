#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "modprobe/matrix.hpp"

namespace modprobe {

// Images are stored as float32 in [0, 1] (u8 pixels / 255), one flattened
// example after another; computation promotes batches to double.
struct LabeledDataset {
  int height = 0, width = 0, channels = 1;
  int class_count = 10;
  std::vector<float> images;
  std::vector<int> labels;
  std::string split_tag = "train";

  std::size_t size() const { return labels.size(); }
  std::size_t example_floats() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
};

// Reads an IDX image/label file pair (big-endian headers, magic 0x803/0x801).
// Gzip-compressed files are detected and inflated transparently.
LabeledDataset load_idx_pair(const std::filesystem::path& images,
                             const std::filesystem::path& labels);

// Writes plain (uncompressed) IDX files; pixels are rounded back to u8.
void save_idx_pair(const LabeledDataset& data, const std::filesystem::path& images,
                   const std::filesystem::path& labels);

// Synthetic composite-digit task: two base examples are width-halved (adjacent
// column pairs averaged) and placed side by side; the label is the sum of the
// two source labels mod 10. Output count equals the base count.
LabeledDataset make_halves_dataset(const LabeledDataset& base, std::uint64_t seed);

// Deterministic shuffle-split by fractions (last part takes the remainder).
std::vector<LabeledDataset> split_dataset(const LabeledDataset& data,
                                          const std::vector<double>& fractions,
                                          const std::vector<std::string>& tags,
                                          std::uint64_t seed);

// Rows `first .. first+count-1` promoted to a double batch.
Matrix batch_of(const LabeledDataset& data, std::size_t first, std::size_t count);

// Rows picked by index, in the given order.
Matrix batch_of(const LabeledDataset& data, const std::vector<int>& rows);

}  // namespace modprobe
