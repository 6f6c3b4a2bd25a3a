#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/attacks.hpp"
#include "dlab/network.hpp"
#include "dlab/rng.hpp"

namespace dlab {

struct SurfaceCell {
  double a = 0.0;
  double b = 0.0;
  double loss = 0.0;
  int pred = 0;
  bool correct = false;
  friend bool operator==(const SurfaceCell&, const SurfaceCell&) = default;
};

/// Loss and prediction samples over anchor + a * v1 + b * v2.
/// Cells are row-major with a outer and b inner.
struct SurfaceGrid {
  std::size_t anchor_index = 0;
  DenseArray v1;
  DenseArray v2;
  double a_lo = 0.0, a_hi = 1.0;
  double b_lo = 0.0, b_hi = 1.0;
  std::size_t resolution = 0;
  std::vector<SurfaceCell> cells;

  const SurfaceCell& at(std::size_t i, std::size_t j) const { return cells[i * resolution + j]; }
};

enum class DirectionSource { Fgsm, Fast, Supplied };

struct SurfaceOptions {
  double epsilon = 8.0 / 255.0;
  double alpha = 1.25 * 8.0 / 255.0;  // Fast source only
  double a_lo = 0.0, a_hi = 1.0;
  double b_lo = 0.0, b_hi = 1.0;
  std::size_t resolution = 41;
  DenseArray supplied;  // per-example shape, Supplied source only
};

/// Per-pixel Uniform(-epsilon, epsilon).
inline DenseArray random_direction(const Shape& shape, double epsilon, Rng& rng) {
  DenseArray v(shape);
  for (double& x : v.values()) x = rng.uniform(-epsilon, epsilon);
  return v;
}

/// Grid coordinate i of `resolution` evenly spaced points on [lo, hi].
inline double grid_point(double lo, double hi, std::size_t i, std::size_t resolution) {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(resolution - 1);
}

template <Classifier M>
SurfaceGrid sample_surface(const M& model, const LabeledBatch& data, std::size_t anchor_index,
                           DirectionSource source, Rng& rng, const SurfaceOptions& opt) {
  if (opt.resolution < 2) throw ConfigError("surface: resolution must be >= 2");
  if (anchor_index >= data.size()) throw ConfigError("surface: anchor index out of range");
  const std::size_t idx[] = {anchor_index};
  const LabeledBatch anchor = gather(data, idx);
  const Shape pixel_shape = anchor.images.row_shape();

  SurfaceGrid grid;
  grid.anchor_index = anchor_index;
  grid.a_lo = opt.a_lo;
  grid.a_hi = opt.a_hi;
  grid.b_lo = opt.b_lo;
  grid.b_hi = opt.b_hi;
  grid.resolution = opt.resolution;

  switch (source) {
    case DirectionSource::Fgsm: {
      detail::check_epsilon(opt.epsilon);
      const InputGradient g = model.input_gradient(anchor.images, anchor.labels);
      grid.v1 = DenseArray(pixel_shape);
      for (std::size_t i = 0; i < grid.v1.size(); ++i) grid.v1[i] = opt.epsilon * sign(g.grad[i]);
      break;
    }
    case DirectionSource::Fast: {
      Rng attack_rng(rng.next());
      grid.v1 = fast_single_step(model, anchor, opt.epsilon, opt.alpha, attack_rng).delta.reshaped(pixel_shape);
      break;
    }
    case DirectionSource::Supplied:
      if (opt.supplied.shape() != pixel_shape) throw ConfigError("surface: supplied direction has wrong shape");
      grid.v1 = opt.supplied;
      break;
  }
  if (linf_norm(grid.v1.values()) == 0.0) throw ConfigError("surface: adversarial direction v1 is zero");
  grid.v2 = random_direction(pixel_shape, opt.epsilon, rng);

  const std::size_t res = opt.resolution;
  const std::size_t m = grid.v1.size();
  grid.cells.reserve(res * res);
  Shape row_batch{res};
  row_batch.insert(row_batch.end(), pixel_shape.begin(), pixel_shape.end());
  const std::vector<int> labels(res, anchor.labels[0]);
  for (std::size_t i = 0; i < res; ++i) {
    const double a = grid_point(opt.a_lo, opt.a_hi, i, res);
    DenseArray probes(row_batch);
    for (std::size_t j = 0; j < res; ++j) {
      const double b = grid_point(opt.b_lo, opt.b_hi, j, res);
      auto p = probes.row(j);
      for (std::size_t k = 0; k < m; ++k)
        p[k] = std::clamp(anchor.images[k] + a * grid.v1[k] + b * grid.v2[k], 0.0, 1.0);
    }
    const auto losses = model.example_losses(probes, labels);
    const auto pred = predictions(model.forward(probes));
    for (std::size_t j = 0; j < res; ++j)
      grid.cells.push_back({a, grid_point(opt.b_lo, opt.b_hi, j, res), losses[j], pred[j], pred[j] == labels[j]});
  }
  return grid;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV: header "a,b,loss,pred,correct", then one row per cell (a outer,
/// b inner), floats printed with 17 significant digits.
inline void export_grid(const SurfaceGrid& grid, const std::string& path) {
  if (grid.resolution < 2 || grid.cells.size() != grid.resolution * grid.resolution)
    throw ConfigError("surface: grid must have resolution >= 2 and resolution^2 cells");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "a,b,loss,pred,correct\n";
  for (const SurfaceCell& c : grid.cells)
    out << format_double(c.a) << ',' << format_double(c.b) << ',' << format_double(c.loss) << ',' << c.pred
        << ',' << (c.correct ? 1 : 0) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<SurfaceCell> read_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "a,b,loss,pred,correct") throw FormatError(path + ": bad header");
  std::vector<SurfaceCell> cells;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream row(line);
    std::string f[5];
    for (auto& s : f)
      if (!std::getline(row, s, ','))
        throw FormatError(path + ":" + std::to_string(lineno) + ": expected 5 fields");
    try {
      SurfaceCell c;
      c.a = std::stod(f[0]);
      c.b = std::stod(f[1]);
      c.loss = std::stod(f[2]);
      c.pred = std::stoi(f[3]);
      if (f[4] != "0" && f[4] != "1") throw std::invalid_argument("correct");
      c.correct = f[4] == "1";
      cells.push_back(c);
    } catch (const std::logic_error&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed field");
    }
  }
  return cells;
}

}  // namespace dlab
