#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "epk/error.hpp"
#include "epk/model/mlp.hpp"
#include "epk/numerics/matrix.hpp"

namespace epk {

// Binary layout, all little-endian:
//   "EPKC" | u32 version | u32 layer count n | n × u64 layer sizes | u64 M | M × f64 θ
// Matrices (gradient bases and similar) use "EPKM" | u32 version | u64 rows | u64 cols | f64 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, std::size_t& offset) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("checkpoint: truncated file", offset);
  offset += sizeof v;
  return v;
}

inline void expect_magic(std::istream& in, const char* magic, std::size_t& offset) {
  char buf[4];
  if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
    throw FormatError(std::string("checkpoint: expected magic ") + magic, offset);
  offset += 4;
}

}  // namespace detail

struct Checkpoint {
  ModelSpec spec;
  Vector theta;
};

inline void write_checkpoint(const std::string& path, const ModelSpec& spec, std::span<const double> theta) {
  if (theta.size() != spec.param_count()) throw InvalidInput("write_checkpoint: parameter count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_checkpoint: cannot open " + path);
  out.write("EPKC", 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(spec.layer_sizes.size()));
  for (std::size_t n : spec.layer_sizes) detail::put<std::uint64_t>(out, n);
  detail::put<std::uint64_t>(out, theta.size());
  out.write(reinterpret_cast<const char*>(theta.data()), static_cast<std::streamsize>(theta.size() * sizeof(double)));
  if (!out) throw InvalidInput("write_checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("read_checkpoint: cannot open " + path);
  std::size_t off = 0;
  detail::expect_magic(in, "EPKC", off);
  const auto version = detail::get<std::uint32_t>(in, off);
  if (version != kCheckpointVersion) throw FormatError("read_checkpoint: unsupported version", off - 4);
  const auto n = detail::get<std::uint32_t>(in, off);
  if (n < 2 || n > 1024) throw FormatError("read_checkpoint: implausible layer count", off - 4);
  Checkpoint cp;
  for (std::uint32_t i = 0; i < n; ++i) cp.spec.layer_sizes.push_back(detail::get<std::uint64_t>(in, off));
  const auto m = detail::get<std::uint64_t>(in, off);
  if (m != cp.spec.param_count()) throw FormatError("read_checkpoint: parameter count disagrees with layout", off - 8);
  cp.theta.resize(m);
  if (!in.read(reinterpret_cast<char*>(cp.theta.data()), static_cast<std::streamsize>(m * sizeof(double))))
    throw FormatError("read_checkpoint: truncated payload", off);
  return cp;
}

inline nlohmann::json checkpoint_json(const ModelSpec& spec, std::span<const double> theta) {
  return {{"version", kCheckpointVersion},
          {"layer_sizes", spec.layer_sizes},
          {"param_count", spec.param_count()},
          {"theta", std::vector<double>(theta.begin(), theta.end())}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint cp;
  cp.spec.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
  cp.spec.validate();
  cp.theta = j.at("theta").get<Vector>();
  if (cp.theta.size() != cp.spec.param_count()) throw FormatError("checkpoint json: parameter count mismatch", 0);
  return cp;
}

inline void write_matrix_binary(const std::string& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_matrix_binary: cannot open " + path);
  out.write("EPKM", 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, m.rows());
  detail::put<std::uint64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline Matrix read_matrix_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("read_matrix_binary: cannot open " + path);
  std::size_t off = 0;
  detail::expect_magic(in, "EPKM", off);
  if (detail::get<std::uint32_t>(in, off) != kCheckpointVersion) throw FormatError("read_matrix_binary: unsupported version", 4);
  const auto rows = detail::get<std::uint64_t>(in, off);
  const auto cols = detail::get<std::uint64_t>(in, off);
  Vector v(rows * cols);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw FormatError("read_matrix_binary: truncated payload", off);
  return Matrix(rows, cols, std::move(v));
}

}  // namespace epk
