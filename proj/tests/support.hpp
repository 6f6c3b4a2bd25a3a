#pragma once

// Scripted classifiers and reference computations shared by the unit tests
// and the acceptance runner.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dlab/dlab.hpp"

namespace dlab::testing {

/// Classifier defined by per-example callbacks. Logits are 10 at the
/// predicted class and 0 elsewhere. The loss and its gradient are
/// independent of the logits, which lets a test pin both down exactly.
struct FunctionClassifier {
  using Row = std::span<const double>;
  std::size_t classes = 2;
  std::function<int(Row)> predict = [](Row) { return 0; };
  std::function<double(Row, int)> loss = [](Row, int) { return 0.0; };
  std::function<void(Row, int, std::span<double>)> grad = [](Row, int, std::span<double> g) {
    std::fill(g.begin(), g.end(), 0.0);
  };
  mutable PassCounts counts;
  mutable std::vector<DenseArray> forward_inputs;  // every forward, in call order
  mutable std::vector<DenseArray> gradient_inputs;

  std::size_t n_classes() const { return classes; }

  DenseArray forward(const DenseArray& x) const {
    ++counts.forward;
    forward_inputs.push_back(x);
    return logits(x);
  }

  std::vector<double> example_losses(const DenseArray& x, std::span<const int> y) const {
    ++counts.forward;
    forward_inputs.push_back(x);
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = loss(x.row(i), y[i]);
    return out;
  }

  InputGradient input_gradient(const DenseArray& x, std::span<const int> y) const {
    ++counts.forward;
    ++counts.backward;
    gradient_inputs.push_back(x);
    InputGradient out;
    out.logits = logits(x);
    out.losses.resize(x.rows());
    out.grad = DenseArray(x.shape());
    const double n = static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out.losses[i] = loss(x.row(i), y[i]);
      std::vector<double> g(x.row_size());
      grad(x.row(i), y[i], g);
      auto dst = out.grad.row(i);
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] = g[k] / n;
    }
    return out;
  }

 private:
  DenseArray logits(const DenseArray& x) const {
    DenseArray z(Shape{x.rows(), classes});
    for (std::size_t i = 0; i < x.rows(); ++i) z.row(i)[static_cast<std::size_t>(predict(x.row(i)))] = 10.0;
    return z;
  }
};

/// Answers the k-th prediction request (gradient pass included) from a
/// script: script[k] == true means "misclassify". Requests beyond the
/// script predict correctly.
struct ScriptedClassifier {
  std::vector<bool> script;
  int label = 0;
  mutable std::size_t calls = 0;
  mutable std::vector<DenseArray> inputs;
  FunctionClassifier inner;

  std::size_t n_classes() const { return 2; }

  int next() const {
    const bool wrong = calls < script.size() && script[calls];
    ++calls;
    return wrong ? 1 - label : label;
  }
  DenseArray scripted_logits(const DenseArray& x) const {
    inputs.push_back(x);
    DenseArray z(Shape{x.rows(), 2});
    const int p = next();
    for (std::size_t i = 0; i < x.rows(); ++i) z.row(i)[static_cast<std::size_t>(p)] = 10.0;
    return z;
  }
  DenseArray forward(const DenseArray& x) const { return scripted_logits(x); }
  std::vector<double> example_losses(const DenseArray& x, std::span<const int> y) const {
    return inner.example_losses(x, y);
  }
  InputGradient input_gradient(const DenseArray& x, std::span<const int> y) const {
    InputGradient g = inner.input_gradient(x, y);
    g.logits = scripted_logits(x);
    return g;
  }
};

/// 1-D classifier along the positive axis: correct (label 0) except on the
/// open interval (lo, hi), with a constant positive input gradient so the
/// adversarial direction is +epsilon.
inline FunctionClassifier interval_classifier(double lo, double hi) {
  FunctionClassifier m;
  m.predict = [lo, hi](FunctionClassifier::Row x) { return x[0] > lo && x[0] < hi ? 1 : 0; };
  m.loss = [](FunctionClassifier::Row x, int) { return x[0]; };
  m.grad = [](FunctionClassifier::Row, int, std::span<double> g) { std::fill(g.begin(), g.end(), 1.0); };
  return m;
}

/// loss(x) = w . x + b, prediction always correct.
inline FunctionClassifier affine_loss_classifier(std::vector<double> w, double b) {
  FunctionClassifier m;
  m.loss = [w, b](FunctionClassifier::Row x, int) {
    double s = b;
    for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * x[k];
    return s;
  };
  m.grad = [w](FunctionClassifier::Row, int, std::span<double> g) { std::copy(w.begin(), w.end(), g.begin()); };
  return m;
}

/// loss(x) = c0 - (x - x0)^2 in one dimension.
inline FunctionClassifier concave_classifier(double x0, double c0 = 1.0) {
  FunctionClassifier m;
  m.loss = [x0, c0](FunctionClassifier::Row x, int) { return c0 - (x[0] - x0) * (x[0] - x0); };
  m.grad = [x0](FunctionClassifier::Row x, int, std::span<double> g) { g[0] = -2.0 * (x[0] - x0); };
  return m;
}

inline LabeledBatch scalar_batch(std::vector<double> xs, int label = 0) {
  const std::size_t n = xs.size();
  return {DenseArray(Shape{n, 1}, std::move(xs)), std::vector<int>(n, label)};
}

// ---- random networks and finite differences ---------------------------------

/// Small random architectures, all under 1k parameters.
inline ModelSpec small_spec(std::size_t variant) {
  switch (variant % 5) {
    case 0:
      return {{4}, {Dense{4, 3}, ReLU{}, Dense{3, 2}}, 2};
    case 1:
      return {{6}, {Dense{6, 8}, ReLU{}, Dense{8, 8}, ReLU{}, Dense{8, 3}}, 3};
    case 2:
      return {{1, 5, 5}, {Conv2d{1, 2, 3, 1, 1}, ReLU{}, Flatten{}, Dense{50, 4}}, 4};
    case 3:
      return {{2, 6, 6}, {Conv2d{2, 3, 3, 2, 0}, ReLU{}, Conv2d{3, 2, 2, 1, 1}, Flatten{}, Dense{18, 3}}, 3};
    default:
      return {{3, 4}, {Flatten{}, Dense{12, 10}, ReLU{}, Dense{10, 5}}, 5};
  }
}

inline std::size_t param_count(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const Shape& s : param_shapes(spec)) n += shape_size(s);
  return n;
}

inline LabeledBatch random_batch(const ModelSpec& spec, std::size_t n, Rng& rng) {
  Shape s{n};
  s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
  LabeledBatch b{DenseArray(s), std::vector<int>(n)};
  for (double& v : b.images.values()) v = rng.uniform();
  for (int& y : b.labels) y = static_cast<int>(rng.below(spec.n_classes));
  return b;
}

/// Network with weights scaled up so ReLU units actually switch.
inline Network random_network(const ModelSpec& spec, std::uint64_t seed, double scale = 2.0) {
  Network net = Network::initialized(spec, seed);
  Rng rng(seed, "test-bias");
  for (DenseArray& p : net.state().params)
    for (double& v : p.values()) v = v * scale + (v == 0.0 ? rng.uniform(-0.3, 0.3) : 0.0);
  return net;
}

inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

/// Central differences of the mean loss with respect to the inputs.
inline DenseArray fd_input_gradient(const Network& net, const LabeledBatch& b, double h) {
  DenseArray g(b.images.shape());
  DenseArray x = b.images;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = loss(net.forward(x), b.labels);
    x[i] = x0 - h;
    const double down = loss(net.forward(x), b.labels);
    x[i] = x0;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Central differences of the mean loss with respect to every parameter.
inline std::vector<DenseArray> fd_param_gradients(const Network& net, const LabeledBatch& b, double h) {
  Network probe = net;
  std::vector<DenseArray> out;
  for (std::size_t t = 0; t < probe.state().params.size(); ++t) {
    DenseArray& p = probe.state().params[t];
    DenseArray g(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double v0 = p[i];
      p[i] = v0 + h;
      const double up = loss(probe.forward(b.images), b.labels);
      p[i] = v0 - h;
      const double down = loss(probe.forward(b.images), b.labels);
      p[i] = v0;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dlab-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dlab::testing
