#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/rng.hpp"

namespace dlab {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

using Layer = std::variant<Dense, Conv2d, ReLU, Flatten>;

inline bool has_params(const Layer& layer) {
  return std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv2d>(layer);
}

/// Architecture description: per-example input shape, a layer list, and the
/// number of classes the final layer must produce.
struct ModelSpec {
  Shape input_shape;
  std::vector<Layer> layers;
  std::size_t n_classes = 0;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Output shape of `layer` for a per-example input shape, or ConfigError.
inline Shape layer_output_shape(const Layer& layer, const Shape& in, std::size_t index) {
  const auto where = [&] { return "layer " + std::to_string(index) + ": "; };
  if (const auto* d = std::get_if<Dense>(&layer)) {
    if (d->in == 0 || d->out == 0) throw ConfigError(where() + "Dense dimensions must be positive");
    if (in.size() != 1 || in[0] != d->in)
      throw ConfigError(where() + "Dense(" + std::to_string(d->in) + "," + std::to_string(d->out) +
                        ") cannot take input " + shape_string(in));
    return {d->out};
  }
  if (const auto* c = std::get_if<Conv2d>(&layer)) {
    if (c->in_channels == 0 || c->out_channels == 0 || c->kernel == 0 || c->stride == 0)
      throw ConfigError(where() + "Conv2d dimensions must be positive");
    if (in.size() != 3 || in[0] != c->in_channels)
      throw ConfigError(where() + "Conv2d cannot take input " + shape_string(in));
    const std::size_t h = in[1] + 2 * c->pad, w = in[2] + 2 * c->pad;
    if (h < c->kernel || w < c->kernel) throw ConfigError(where() + "Conv2d kernel larger than padded input");
    return {c->out_channels, (h - c->kernel) / c->stride + 1, (w - c->kernel) / c->stride + 1};
  }
  if (std::holds_alternative<Flatten>(layer)) return {shape_size(in)};
  return in;  // ReLU
}

/// Validates that layer shapes compose and end in n_classes logits.
/// Returns the per-example activation shapes, input first.
inline std::vector<Shape> activation_shapes(const ModelSpec& spec) {
  if (spec.n_classes == 0) throw ConfigError("model: n_classes must be positive");
  if (spec.input_shape.empty() || shape_size(spec.input_shape) == 0)
    throw ConfigError("model: input shape must be non-empty with positive dimensions");
  std::vector<Shape> shapes{spec.input_shape};
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    shapes.push_back(layer_output_shape(spec.layers[i], shapes.back(), i));
  const Shape& last = shapes.back();
  if (last.size() != 1 || last[0] != spec.n_classes)
    throw ConfigError("model: final output " + shape_string(last) + " does not match n_classes " +
                      std::to_string(spec.n_classes));
  return shapes;
}

/// Shapes of every parameter tensor, in layer order (weight then bias).
inline std::vector<Shape> param_shapes(const ModelSpec& spec) {
  std::vector<Shape> shapes;
  for (const Layer& layer : spec.layers) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      shapes.push_back({d->out, d->in});
      shapes.push_back({d->out});
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      shapes.push_back({c->out_channels, c->in_channels, c->kernel, c->kernel});
      shapes.push_back({c->out_channels});
    }
  }
  return shapes;
}

/// Parameter values plus SGD momentum buffers of identical shapes.
struct ModelState {
  std::vector<DenseArray> params;
  std::vector<DenseArray> momentum;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

inline void check_state(const ModelSpec& spec, const ModelState& state) {
  const auto shapes = param_shapes(spec);
  if (state.params.size() != shapes.size() || state.momentum.size() != shapes.size())
    throw ConfigError("model state: expected " + std::to_string(shapes.size()) + " parameter tensors");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (state.params[i].shape() != shapes[i] || state.momentum[i].shape() != shapes[i])
      throw ConfigError("model state: tensor " + std::to_string(i) + " has wrong shape");
  }
}

/// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero, momentum zero.
inline ModelState init_state(const ModelSpec& spec, std::uint64_t seed) {
  activation_shapes(spec);
  Rng rng(seed, "init");
  ModelState state;
  for (const Layer& layer : spec.layers) {
    double fan_in = 0, fan_out = 0;
    if (const auto* d = std::get_if<Dense>(&layer)) {
      fan_in = static_cast<double>(d->in);
      fan_out = static_cast<double>(d->out);
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      const double area = static_cast<double>(c->kernel * c->kernel);
      fan_in = static_cast<double>(c->in_channels) * area;
      fan_out = static_cast<double>(c->out_channels) * area;
    } else {
      continue;
    }
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    const auto shapes = param_shapes(ModelSpec{{}, {layer}, 0});
    DenseArray weight(shapes[0]);
    for (double& w : weight.values()) w = rng.uniform(-limit, limit);
    state.params.push_back(std::move(weight));
    state.params.emplace_back(shapes[1]);
  }
  for (const DenseArray& p : state.params) state.momentum.emplace_back(p.shape());
  return state;
}

/// Images [n, ...pixel dims] in [0,1] with integer labels.
struct LabeledBatch {
  DenseArray images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }

  void validate(std::size_t n_classes) const {
    if (images.rows() != labels.size())
      throw InputError("batch: " + std::to_string(images.rows()) + " images but " +
                       std::to_string(labels.size()) + " labels");
    for (double v : images.values())
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("batch: pixel outside [0,1]");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
        throw InputError("batch: label " + std::to_string(y) + " out of range");
  }

  friend bool operator==(const LabeledBatch&, const LabeledBatch&) = default;
};

inline LabeledBatch gather(const LabeledBatch& batch, std::span<const std::size_t> indices) {
  LabeledBatch out{gather_rows(batch.images, indices), {}};
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(batch.labels[i]);
  return out;
}

}  // namespace dlab
