#pragma once

#include <zlib.h>

#include <cstdint>
#include <string>
#include <vector>

#include "epk/data/dataset.hpp"
#include "epk/error.hpp"

namespace epk {

namespace detail {

/// Whole file contents; gzip-compressed files (by magic 1f 8b) are inflated transparently.
inline std::vector<unsigned char> read_maybe_gzip(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw InvalidInput("cannot open " + path);
  std::vector<unsigned char> bytes;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) bytes.insert(bytes.end(), buf, buf + n);
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END))
    throw FormatError("gzip stream error in " + path + ": " + msg, bytes.size());
  return bytes;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset) {
  if (offset + 4 > b.size()) throw FormatError("IDX: truncated header", offset);
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;  // 2051
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;  // 2049

/// Loads an IDX image/label pair (raw or gzip). Pixels are scaled to [0, 1] and each 28×28 image
/// flattened to 784 values.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_maybe_gzip(images_path);
  const auto lab = detail::read_maybe_gzip(labels_path);
  if (detail::read_be32(img, 0) != kIdxImageMagic) throw FormatError("IDX images: bad magic number", 0);
  if (detail::read_be32(lab, 0) != kIdxLabelMagic) throw FormatError("IDX labels: bad magic number", 0);
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  if (rows != 28 || cols != 28) throw FormatError("IDX images: expected 28x28 images", 8);
  const std::size_t n_labels = detail::read_be32(lab, 4);
  if (n_labels != n) throw FormatError("IDX labels: count differs from image count", 4);
  const std::size_t d = rows * cols;
  if (img.size() != 16 + n * d) throw FormatError("IDX images: payload size mismatch", std::min(img.size(), 16 + n * d));
  if (lab.size() != 8 + n) throw FormatError("IDX labels: payload size mismatch", std::min(lab.size(), 8 + n));

  Matrix x(n, d);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = img[16 + i * d + j] / 255.0;
    labels[i] = lab[8 + i];
    if (labels[i] > 9) throw FormatError("IDX labels: label outside 0..9", 8 + i);
  }
  return make_dataset(std::move(x), std::move(labels), 10, "mnist");
}

}  // namespace epk
