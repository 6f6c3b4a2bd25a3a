#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/model.hpp"
#include "dlab/rng.hpp"

namespace dlab {

/// Isotropic Gaussian classes, squashed into [0,1] by one global affine map.
struct SyntheticSpec {
  std::size_t n_classes = 2;
  Shape dims{2};                          // per-example shape
  std::vector<std::vector<double>> means;  // one vector of shape_size(dims) per class
  double sigma = 0.1;
  std::size_t n_per_class = 100;
  std::uint64_t seed = 0;
};

/// Examples are interleaved by class (0, 1, ..., k-1, 0, 1, ...). The
/// squash maps the global min/max over all values to 0/1, which keeps the
/// geometry isotropic.
inline LabeledBatch gen_gaussian_blobs(const SyntheticSpec& spec) {
  const std::size_t d = shape_size(spec.dims);
  if (spec.n_classes == 0 || spec.dims.empty() || d == 0)
    throw ConfigError("gaussian: n_classes and dims must be positive");
  if (spec.means.size() != spec.n_classes) throw ConfigError("gaussian: need one mean per class");
  for (const auto& m : spec.means)
    if (m.size() != d) throw ConfigError("gaussian: mean length does not match dims");
  if (!(spec.sigma >= 0.0)) throw ConfigError("gaussian: sigma must be >= 0");

  const std::size_t n = spec.n_classes * spec.n_per_class;
  Shape shape{n};
  shape.insert(shape.end(), spec.dims.begin(), spec.dims.end());
  LabeledBatch out{DenseArray(shape), std::vector<int>(n)};
  Rng rng(spec.seed, "gaussian");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.n_classes;
    out.labels[i] = static_cast<int>(c);
    auto row = out.images.row(i);
    for (std::size_t k = 0; k < d; ++k) row[k] = spec.means[c][k] + spec.sigma * rng.normal();
  }
  if (n == 0) return out;
  auto v = out.images.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo, range = *hi - *lo;
  for (double& x : v) x = range > 0.0 ? std::clamp((x - min) / range, 0.0, 1.0) : 0.5;
  return out;
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

inline constexpr std::size_t kCifarRecord = 3073;

/// CIFAR-10 binary batches: records of one label byte then 1024 R, 1024 G,
/// 1024 B bytes. Output images are [n, 3, 32, 32] with byte / 255 pixels.
inline LabeledBatch load_cifar10_bin(const std::vector<std::string>& paths) {
  std::vector<unsigned char> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() % kCifarRecord != 0)
      throw FormatError(path + ": truncated record at byte offset " +
                        std::to_string(bytes.size() - bytes.size() % kCifarRecord) + " (size " +
                        std::to_string(bytes.size()) + " is not a multiple of 3073)");
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      if (bytes[off] > 9)
        throw FormatError(path + ": label " + std::to_string(bytes[off]) + " > 9 at byte offset " +
                          std::to_string(off));
      labels.push_back(bytes[off]);
      pixels.insert(pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                    bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecord));
    }
  }
  std::vector<double> data(pixels.size());
  std::transform(pixels.begin(), pixels.end(), data.begin(), [](unsigned char p) { return p / 255.0; });
  return {DenseArray({labels.size(), 3, 32, 32}, std::move(data)), std::move(labels)};
}

/// IDX image file (magic 0x00000803, dims n, rows, cols) plus IDX label file
/// (magic 0x00000801, dim n). Output images are [n, rows, cols].
inline LabeledBatch load_idx(const std::string& images_path, const std::string& labels_path,
                             std::size_t n_classes = 10) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 16) throw FormatError(images_path + ": header truncated at byte offset " + std::to_string(img.size()));
  if (lab.size() < 8) throw FormatError(labels_path + ": header truncated at byte offset " + std::to_string(lab.size()));
  if (detail::be32(img, 0) != 0x00000803) throw FormatError(images_path + ": bad magic at byte offset 0");
  if (detail::be32(lab, 0) != 0x00000801) throw FormatError(labels_path + ": bad magic at byte offset 0");
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  const std::size_t n_labels = detail::be32(lab, 4);
  if (n != n_labels)
    throw FormatError("idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  const std::size_t per = rows * cols;
  if (rows != 0 && per / rows != cols) throw FormatError(images_path + ": dimensions overflow");
  if (per != 0 && n > (img.size() - 16) / per)
    throw FormatError(images_path + ": pixel data truncated at byte offset " + std::to_string(img.size()));
  if (img.size() != 16 + n * per)
    throw FormatError(images_path + ": expected " + std::to_string(16 + n * per) + " bytes, found " +
                      std::to_string(img.size()));
  if (lab.size() != 8 + n)
    throw FormatError(labels_path + ": expected " + std::to_string(8 + n) + " bytes, found " +
                      std::to_string(lab.size()));

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lab[8 + i];
    if (static_cast<std::size_t>(labels[i]) >= n_classes)
      throw FormatError(labels_path + ": label " + std::to_string(labels[i]) + " out of range at byte offset " +
                        std::to_string(8 + i));
  }
  std::vector<double> data(n * per);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = img[16 + i] / 255.0;
  return {DenseArray({n, rows, cols}, std::move(data)), std::move(labels)};
}

}  // namespace dlab
