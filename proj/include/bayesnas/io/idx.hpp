#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bayesnas/error.hpp"
#include "bayesnas/io/dataset.hpp"

namespace bayesnas {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

// Reads a whole file, inflating it when gzip-compressed.
inline std::vector<unsigned char> read_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open '" + path + "'");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw DataError("truncated or corrupt file '" + path + "': " + std::string(msg ? msg : "read error"));
  }
  return out;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void write_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

inline IdxHeader read_idx_header(const std::vector<unsigned char>& b, std::uint32_t expected_magic,
                                 const std::string& path) {
  if (b.size() < 4) throw DataError("IDX truncated: '" + path + "' is shorter than its magic number");
  const std::uint32_t magic = read_be32(b, 0);
  if (magic != expected_magic) {
    char got[16], want[16];
    std::snprintf(got, sizeof(got), "0x%08X", magic);
    std::snprintf(want, sizeof(want), "0x%08X", expected_magic);
    throw DataError("IDX bad magic in '" + path + "': " + got + ", expected " + want);
  }
  const std::size_t ndims = expected_magic & 0xFF;
  if (b.size() < 4 + 4 * ndims) throw DataError("IDX truncated: '" + path + "' header is incomplete");
  IdxHeader h;
  for (std::size_t i = 0; i < ndims; ++i) h.dims.push_back(read_be32(b, 4 + 4 * i));
  h.payload_offset = 4 + 4 * ndims;
  std::size_t expect = 1;
  for (auto d : h.dims) expect *= d;
  if (b.size() - h.payload_offset < expect) {
    throw DataError("IDX truncated: '" + path + "' holds " + std::to_string(b.size() - h.payload_offset) +
                    " payload bytes, header declares " + std::to_string(expect));
  }
  return h;
}

}  // namespace detail

/// Loads an MNIST-style image/label pair (optionally gzip-compressed);
/// pixels are scaled to [0,1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t num_classes = 0) {
  const auto ib = detail::read_maybe_gz(images_path);
  const auto lb = detail::read_maybe_gz(labels_path);
  const auto ih = detail::read_idx_header(ib, kIdxImagesMagic, images_path);
  const auto lh = detail::read_idx_header(lb, kIdxLabelsMagic, labels_path);
  if (ih.dims[0] != lh.dims[0]) {
    throw DataError("IDX count mismatch: " + std::to_string(ih.dims[0]) + " images vs " +
                    std::to_string(lh.dims[0]) + " labels");
  }
  Dataset d;
  d.kind = FeatureKind::image;
  d.tag = "idx";
  d.input_shape = {1, ih.dims[1], ih.dims[2]};
  const std::size_t n = ih.dims[0], f = std::size_t{ih.dims[1]} * ih.dims[2];
  d.features.resize(n * f);
  for (std::size_t i = 0; i < n * f; ++i) d.features[i] = static_cast<double>(ib[ih.payload_offset + i]) / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = lb[lh.payload_offset + i];
    d.labels.push_back(l);
    max_label = std::max(max_label, l);
  }
  d.num_classes = num_classes ? num_classes : std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  d.validate();
  return d;
}

/// Writes uint8 IDX files (uncompressed); pixel values are rounded from [0,1].
inline void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  if (d.input_shape.size() != 3 || d.input_shape[0] != 1) {
    throw DataError("IDX export supports single-channel images only, got " + shape_str(d.input_shape));
  }
  std::vector<unsigned char> ib, lb;
  detail::write_be32(ib, kIdxImagesMagic);
  detail::write_be32(ib, static_cast<std::uint32_t>(d.size()));
  detail::write_be32(ib, static_cast<std::uint32_t>(d.input_shape[1]));
  detail::write_be32(ib, static_cast<std::uint32_t>(d.input_shape[2]));
  for (double v : d.features) ib.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  detail::write_be32(lb, kIdxLabelsMagic);
  detail::write_be32(lb, static_cast<std::uint32_t>(d.size()));
  for (int l : d.labels) lb.push_back(static_cast<unsigned char>(l));
  auto dump = [](const std::string& p, const std::vector<unsigned char>& b) {
    std::ofstream o(p, std::ios::binary);
    if (!o) throw DataError("cannot write '" + p + "'");
    o.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  };
  dump(images_path, ib);
  dump(labels_path, lb);
}

}  // namespace bayesnas
