#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/model.hpp"
#include "dlab/network.hpp"

namespace dlab {

// Model container layout, all integers u32 little-endian:
//
//   "DLAB" | version | n_classes | input rank | input dims...
//   | n_layers | per layer: kind (0 Dense, 1 Conv2d, 2 ReLU, 3 Flatten)
//                 then Dense: in, out
//                      Conv2d: in_channels, out_channels, kernel, stride, pad
//   | flags (bit 0: momentum buffers follow)
//   | parameter tensors as f64 little-endian, layer order, weight then bias
//   | momentum tensors, same order (if flagged)
//
// Tensor lengths follow from the layer table.
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint64_t v) {
    if (v > 0xFFFFFFFFULL) throw ConfigError("container: value does not fit in u32");
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("container: truncated at byte offset " + std::to_string(pos_));
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

// Rejects element counts above 2^31 without overflowing on the way.
inline bool bounded_size(const Shape& shape) {
  constexpr std::size_t kMax = std::size_t{1} << 31;
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d != 0 && n > kMax / d) return false;
    n *= d;
  }
  return n <= kMax;
}

}  // namespace detail

inline std::vector<unsigned char> encode_model(const ModelSpec& spec, const ModelState& state) {
  activation_shapes(spec);
  check_state(spec, state);
  detail::ByteWriter w;
  w.raw("DLAB");
  w.u32(kContainerVersion);
  w.u32(spec.n_classes);
  w.u32(spec.input_shape.size());
  for (std::size_t d : spec.input_shape) w.u32(d);
  w.u32(spec.layers.size());
  for (const Layer& layer : spec.layers) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      w.u32(0);
      w.u32(d->in);
      w.u32(d->out);
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      w.u32(1);
      for (std::size_t v : {c->in_channels, c->out_channels, c->kernel, c->stride, c->pad}) w.u32(v);
    } else {
      w.u32(std::holds_alternative<ReLU>(layer) ? 2 : 3);
    }
  }
  w.u32(1);
  for (const DenseArray& p : state.params)
    for (double v : p.values()) w.f64(v);
  for (const DenseArray& m : state.momentum)
    for (double v : m.values()) w.f64(v);
  return w.bytes();
}

struct DecodedModel {
  ModelSpec spec;
  ModelState state;
};

inline DecodedModel decode_model(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != "DLAB")
    throw FormatError("container: bad magic at byte offset 0");
  detail::ByteReader r(bytes);
  r.skip(4);
  if (const auto v = r.u32(); v != kContainerVersion)
    throw FormatError("container: unsupported version " + std::to_string(v) + " at byte offset 4");
  DecodedModel out;
  out.spec.n_classes = r.u32();
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError("container: input rank " + std::to_string(rank) + " too large");
  for (std::uint32_t i = 0; i < rank; ++i) out.spec.input_shape.push_back(r.u32());
  if (!detail::bounded_size(out.spec.input_shape)) throw FormatError("container: input shape too large");
  const std::uint32_t n_layers = r.u32();
  r.need(std::size_t{n_layers} * 4);
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const std::size_t at = r.offset();
    switch (r.u32()) {
      case 0: {
        Dense d;
        d.in = r.u32();
        d.out = r.u32();
        out.spec.layers.emplace_back(d);
        break;
      }
      case 1: {
        Conv2d c;
        c.in_channels = r.u32();
        c.out_channels = r.u32();
        c.kernel = r.u32();
        c.stride = r.u32();
        c.pad = r.u32();
        out.spec.layers.emplace_back(c);
        break;
      }
      case 2:
        out.spec.layers.emplace_back(ReLU{});
        break;
      case 3:
        out.spec.layers.emplace_back(Flatten{});
        break;
      default:
        throw FormatError("container: unknown layer kind at byte offset " + std::to_string(at));
    }
  }
  for (const Shape& s : param_shapes(out.spec))
    if (!detail::bounded_size(s)) throw FormatError("container: parameter tensor too large");
  try {
    activation_shapes(out.spec);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("container: invalid layer table: ") + e.what());
  }
  const std::size_t flags_at = r.offset();
  const std::uint32_t flags = r.u32();
  if (flags > 1) throw FormatError("container: unknown flags at byte offset " + std::to_string(flags_at));
  const auto shapes = param_shapes(out.spec);
  std::size_t total = 0;
  for (const Shape& s : shapes) total += shape_size(s);
  r.need(total * 8 * (flags ? 2 : 1));
  const auto read_tensors = [&](std::vector<DenseArray>& dst) {
    for (const Shape& s : shapes) {
      DenseArray t(s);
      for (double& v : t.values()) v = r.f64();
      dst.push_back(std::move(t));
    }
  };
  read_tensors(out.state.params);
  if (flags)
    read_tensors(out.state.momentum);
  else
    for (const Shape& s : shapes) out.state.momentum.emplace_back(s);
  if (!r.done()) throw FormatError("container: trailing bytes at byte offset " + std::to_string(r.offset()));
  return out;
}

inline void save_model(const Network& net, const std::string& path) {
  const auto bytes = encode_model(net.spec(), net.state());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline Network load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  auto decoded = decode_model(bytes);
  return Network(std::move(decoded.spec), std::move(decoded.state));
}

}  // namespace dlab
