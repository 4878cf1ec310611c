#include "modprobe/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "modprobe/errors.hpp"
#include "modprobe/rng.hpp"

namespace modprobe {
namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string gunzip(const std::string& raw, const std::string& name) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
    throw FormatError("zlib init failed for " + name);
  std::string out;
  out.resize(std::max<std::size_t>(raw.size() * 4, 1 << 20));
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(raw.data()));
  zs.avail_in = static_cast<uInt>(raw.size());
  std::size_t written = 0;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
    zs.avail_out = static_cast<uInt>(out.size() - written);
    rc = inflate(&zs, Z_NO_FLUSH);
    written = out.size() - zs.avail_out;
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError("corrupt gzip stream in " + name, written);
    }
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

std::string read_maybe_gzip(const std::filesystem::path& path) {
  std::string raw = read_file(path);
  if (raw.size() >= 2 && static_cast<unsigned char>(raw[0]) == 0x1f &&
      static_cast<unsigned char>(raw[1]) == 0x8b)
    return gunzip(raw, path.string());
  return raw;
}

std::uint32_t be32(const std::string& buf, std::size_t pos, const std::string& name) {
  if (pos + 4 > buf.size())
    throw FormatError("IDX header truncated in " + name, pos);
  return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos])) << 24 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + 1])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + 2])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + 3]));
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  f.write(bytes, 4);
}

}  // namespace

LabeledDataset load_idx_pair(const std::filesystem::path& images,
                             const std::filesystem::path& labels) {
  const std::string ibuf = read_maybe_gzip(images);
  const std::string lbuf = read_maybe_gzip(labels);

  if (be32(ibuf, 0, images.string()) != 0x803)
    throw FormatError("not an IDX image file (magic != 0x00000803): " + images.string(), 0);
  if (be32(lbuf, 0, labels.string()) != 0x801)
    throw FormatError("not an IDX label file (magic != 0x00000801): " + labels.string(), 0);

  LabeledDataset out;
  const std::uint32_t n = be32(ibuf, 4, images.string());
  out.height = static_cast<int>(be32(ibuf, 8, images.string()));
  out.width = static_cast<int>(be32(ibuf, 12, images.string()));
  out.channels = 1;
  const std::uint32_t nl = be32(lbuf, 4, labels.string());
  if (n != nl)
    throw FormatError("image/label counts differ (" + std::to_string(n) + " vs " +
                      std::to_string(nl) + ")");

  const std::size_t pix = static_cast<std::size_t>(out.height) * out.width;
  if (ibuf.size() != 16 + pix * n)
    throw FormatError("IDX image payload has wrong size: " + images.string(), ibuf.size());
  if (lbuf.size() != 8 + n)
    throw FormatError("IDX label payload has wrong size: " + labels.string(), lbuf.size());

  out.images.resize(pix * n);
  for (std::size_t i = 0; i < pix * n; ++i)
    out.images[i] = static_cast<float>(static_cast<unsigned char>(ibuf[16 + i])) / 255.0f;
  out.labels.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    out.labels[i] = static_cast<int>(static_cast<unsigned char>(lbuf[8 + i]));
    max_label = std::max(max_label, out.labels[i]);
  }
  out.class_count = std::max(10, max_label + 1);
  return out;
}

void save_idx_pair(const LabeledDataset& data, const std::filesystem::path& images,
                   const std::filesystem::path& labels) {
  detail::require(data.channels == 1, "save_idx_pair: IDX stores single-channel images");
  std::ofstream fi(images, std::ios::binary | std::ios::trunc);
  if (!fi) throw FormatError("cannot open for writing: " + images.string());
  put_be32(fi, 0x803);
  put_be32(fi, static_cast<std::uint32_t>(data.size()));
  put_be32(fi, static_cast<std::uint32_t>(data.height));
  put_be32(fi, static_cast<std::uint32_t>(data.width));
  std::string pixels(data.images.size(), '\0');
  for (std::size_t i = 0; i < data.images.size(); ++i)
    pixels[i] = static_cast<char>(
        std::lround(std::clamp(data.images[i], 0.0f, 1.0f) * 255.0f));
  fi.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!fi) throw FormatError("short write: " + images.string());

  std::ofstream fl(labels, std::ios::binary | std::ios::trunc);
  if (!fl) throw FormatError("cannot open for writing: " + labels.string());
  put_be32(fl, 0x801);
  put_be32(fl, static_cast<std::uint32_t>(data.size()));
  for (int v : data.labels) fl.put(static_cast<char>(v));
  if (!fl) throw FormatError("short write: " + labels.string());
}

LabeledDataset make_halves_dataset(const LabeledDataset& base, std::uint64_t seed) {
  detail::require(base.width % 2 == 0, "halves: base width must be even");
  detail::require(base.channels == 1, "halves: single-channel base expected");
  detail::require(base.size() >= 2, "halves: need at least two base examples");

  LabeledDataset out;
  out.height = base.height;
  out.width = base.width;
  out.channels = 1;
  out.class_count = 10;
  out.split_tag = base.split_tag;
  const std::size_t n = base.size();
  out.images.resize(n * out.example_floats());
  out.labels.resize(n);

  const int half = base.width / 2;
  Rng rng(derive_seed(seed, 0x68616c76));  // "halv"
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = rng.below(n);
    const std::size_t b = rng.below(n);
    const float* ia = base.images.data() + a * base.example_floats();
    const float* ib = base.images.data() + b * base.example_floats();
    float* dst = out.images.data() + i * out.example_floats();
    for (int y = 0; y < base.height; ++y) {
      const float* ra = ia + static_cast<std::size_t>(y) * base.width;
      const float* rb = ib + static_cast<std::size_t>(y) * base.width;
      float* rd = dst + static_cast<std::size_t>(y) * base.width;
      for (int x = 0; x < half; ++x) {
        rd[x] = 0.5f * (ra[2 * x] + ra[2 * x + 1]);
        rd[half + x] = 0.5f * (rb[2 * x] + rb[2 * x + 1]);
      }
    }
    out.labels[i] = (base.labels[a] + base.labels[b]) % 10;
  }
  return out;
}

std::vector<LabeledDataset> split_dataset(const LabeledDataset& data,
                                          const std::vector<double>& fractions,
                                          const std::vector<std::string>& tags,
                                          std::uint64_t seed) {
  detail::require(!fractions.empty() && fractions.size() == tags.size(),
                  "split_dataset: need one tag per fraction");
  double total = 0.0;
  for (double f : fractions) {
    detail::require(f >= 0.0, "split_dataset: fractions must be non-negative");
    total += f;
  }
  detail::require(std::abs(total - 1.0) < 1e-9, "split_dataset: fractions must sum to 1");

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x73706c74));  // "splt"
  for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates
    const std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }

  std::vector<LabeledDataset> parts;
  std::size_t start = 0;
  const std::size_t ex = data.example_floats();
  for (std::size_t p = 0; p < fractions.size(); ++p) {
    std::size_t count = (p + 1 == fractions.size())
                            ? n - start
                            : static_cast<std::size_t>(std::floor(fractions[p] * n));
    count = std::min(count, n - start);
    LabeledDataset part;
    part.height = data.height;
    part.width = data.width;
    part.channels = data.channels;
    part.class_count = data.class_count;
    part.split_tag = tags[p];
    part.images.resize(count * ex);
    part.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t src = order[start + i];
      std::copy_n(data.images.data() + src * ex, ex, part.images.data() + i * ex);
      part.labels[i] = data.labels[src];
    }
    start += count;
    parts.push_back(std::move(part));
  }
  return parts;
}

Matrix batch_of(const LabeledDataset& data, std::size_t first, std::size_t count) {
  detail::require(first + count <= data.size(), "batch_of: range out of bounds");
  const std::size_t ex = data.example_floats();
  Matrix m(count, ex);
  for (std::size_t i = 0; i < count; ++i) {
    const float* src = data.images.data() + (first + i) * ex;
    double* dst = m.row(i);
    for (std::size_t j = 0; j < ex; ++j) dst[j] = static_cast<double>(src[j]);
  }
  return m;
}

Matrix batch_of(const LabeledDataset& data, const std::vector<int>& rows) {
  const std::size_t ex = data.example_floats();
  Matrix m(rows.size(), ex);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] >= 0 && static_cast<std::size_t>(rows[i]) < data.size(),
                    "batch_of: row index out of bounds");
    const float* src = data.images.data() + static_cast<std::size_t>(rows[i]) * ex;
    double* dst = m.row(i);
    for (std::size_t j = 0; j < ex; ++j) dst[j] = static_cast<double>(src[j]);
  }
  return m;
}

}  // namespace modprobe
