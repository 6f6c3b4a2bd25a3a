#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/model.hpp"

namespace dlab {

/// Per-example softmax cross-entropy, computed with a stable log-sum-exp.
inline double cross_entropy(std::span<const double> logits, int label) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - m);
  return m + std::log(s) - logits[static_cast<std::size_t>(label)];
}

inline void check_labels(const DenseArray& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2) throw InputError("loss: logits must be [n, classes]");
  if (logits.rows() != labels.size())
    throw InputError("loss: " + std::to_string(logits.rows()) + " logit rows but " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t k = logits.row_size();
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw InputError("loss: label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
}

inline std::vector<double> example_cross_entropy(const DenseArray& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = cross_entropy(logits.row(i), labels[i]);
  return out;
}

/// Mean softmax cross-entropy over the batch.
inline double loss(const DenseArray& logits, std::span<const int> labels) {
  const auto per = example_cross_entropy(logits, labels);
  if (per.empty()) return 0.0;
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

/// Arg-max per row; ties resolve to the lowest class index.
inline std::vector<int> predictions(const DenseArray& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto r = logits.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

/// d(mean loss)/d(logits) = (softmax - onehot) / n.
inline DenseArray cross_entropy_grad(const DenseArray& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  DenseArray g(logits.shape());
  const double inv_n = labels.empty() ? 0.0 : 1.0 / static_cast<double>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto z = logits.row(i);
    auto d = g.row(i);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < z.size(); ++k) d[k] = std::exp(z[k] - lse) * inv_n;
    d[static_cast<std::size_t>(labels[i])] -= inv_n;
  }
  return g;
}

struct InputGradient {
  DenseArray logits;            // at the evaluated point
  std::vector<double> losses;   // per-example loss at the evaluated point
  DenseArray grad;              // d(mean loss)/d(input), same shape as the input
};

/// Anything attacks and metrics can probe: logits, per-example losses and
/// the input gradient of the mean loss. Network is the real model; tests
/// plug in scripted classifiers.
template <class M>
concept Classifier = requires(const M& m, const DenseArray& x, std::span<const int> y) {
  { m.n_classes() } -> std::convertible_to<std::size_t>;
  { m.forward(x) } -> std::convertible_to<DenseArray>;
  { m.example_losses(x, y) } -> std::convertible_to<std::vector<double>>;
  { m.input_gradient(x, y) } -> std::convertible_to<InputGradient>;
};

struct PassCounts {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
  friend bool operator==(const PassCounts&, const PassCounts&) = default;
};

struct ParamGradients {
  double loss = 0.0;
  DenseArray logits;
  std::vector<DenseArray> grads;
};

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Classical momentum with weight decay folded into the gradient:
///   v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v
inline void sgd_step(ModelState& state, std::span<const DenseArray> grads, const SgdOptions& opt) {
  if (grads.size() != state.params.size()) throw InputError("sgd_step: gradient count mismatch");
  for (std::size_t t = 0; t < grads.size(); ++t) {
    auto theta = state.params[t].values();
    auto v = state.momentum[t].values();
    auto g = grads[t].values();
    if (g.size() != theta.size() || v.size() != theta.size())
      throw InputError("sgd_step: shape mismatch in tensor " + std::to_string(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = opt.momentum * v[i] + (g[i] + opt.weight_decay * theta[i]);
      theta[i] -= opt.lr * v[i];
    }
  }
}

/// Feed-forward classifier over Dense / Conv2d / ReLU / Flatten layers with
/// hand-written reverse-mode gradients.
///
/// Every call to forward / example_losses counts one forward pass; every
/// gradient call counts one forward and one backward pass. A pass is over
/// the whole batch given.
class Network {
 public:
  Network(ModelSpec spec, ModelState state) : spec_(std::move(spec)), state_(std::move(state)) {
    shapes_ = activation_shapes(spec_);
    check_state(spec_, state_);
  }

  static Network initialized(ModelSpec spec, std::uint64_t seed) {
    ModelState state = init_state(spec, seed);
    return Network(std::move(spec), std::move(state));
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const ModelState& state() const noexcept { return state_; }
  ModelState& state() noexcept { return state_; }
  std::size_t n_classes() const noexcept { return spec_.n_classes; }
  const Shape& input_shape() const noexcept { return spec_.input_shape; }

  PassCounts counts() const noexcept { return counts_; }

  DenseArray forward(const DenseArray& x) const {
    ++counts_.forward;
    return std::move(trace(x).back());
  }

  std::vector<double> example_losses(const DenseArray& x, std::span<const int> labels) const {
    return example_cross_entropy(forward(x), labels);
  }

  InputGradient input_gradient(const DenseArray& x, std::span<const int> labels) const {
    ++counts_.forward;
    ++counts_.backward;
    auto acts = trace(x);
    InputGradient out;
    out.losses = example_cross_entropy(acts.back(), labels);
    out.grad = backward(acts, cross_entropy_grad(acts.back(), labels), nullptr, true);
    out.logits = std::move(acts.back());
    return out;
  }

  ParamGradients param_gradients(const DenseArray& x, std::span<const int> labels) const {
    ++counts_.forward;
    ++counts_.backward;
    auto acts = trace(x);
    ParamGradients out;
    out.loss = loss(acts.back(), labels);
    for (const DenseArray& p : state_.params) out.grads.emplace_back(p.shape());
    backward(acts, cross_entropy_grad(acts.back(), labels), &out.grads, false);
    out.logits = std::move(acts.back());
    return out;
  }

 private:
  void check_input(const DenseArray& x) const {
    if (x.row_shape() != spec_.input_shape || x.shape().empty())
      throw ConfigError("forward: input " + shape_string(x.shape()) + " does not match model input " +
                        shape_string(spec_.input_shape));
    x.require_finite("forward");
  }

  static Shape batched(std::size_t n, const Shape& s) {
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  std::vector<DenseArray> trace(const DenseArray& x) const {
    check_input(x);
    const std::size_t n = x.rows();
    std::vector<DenseArray> acts;
    acts.reserve(spec_.layers.size() + 1);
    acts.push_back(x);
    std::size_t p = 0;
    for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
      const Layer& layer = spec_.layers[l];
      const DenseArray& in = acts.back();
      DenseArray out(batched(n, shapes_[l + 1]));
      if (const auto* d = std::get_if<Dense>(&layer)) {
        dense_forward(*d, state_.params[p], state_.params[p + 1], in, out);
        p += 2;
      } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
        conv_forward(*c, shapes_[l], shapes_[l + 1], state_.params[p], state_.params[p + 1], in, out);
        p += 2;
      } else if (std::holds_alternative<ReLU>(layer)) {
        auto src = in.values();
        auto dst = out.values();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
      } else {
        std::copy(in.values().begin(), in.values().end(), out.values().begin());
      }
      acts.push_back(std::move(out));
    }
    return acts;
  }

  // Walks the layers in reverse. Fills `param_grads` when given; returns the
  // input gradient when `want_input` (otherwise stops before the first layer's dx).
  DenseArray backward(const std::vector<DenseArray>& acts, DenseArray grad,
                      std::vector<DenseArray>* param_grads, bool want_input) const {
    std::size_t p = state_.params.size();
    for (std::size_t l = spec_.layers.size(); l-- > 0;) {
      const Layer& layer = spec_.layers[l];
      const DenseArray& in = acts[l];
      const bool need_dx = want_input || l > 0;
      DenseArray dx(in.shape());
      if (const auto* d = std::get_if<Dense>(&layer)) {
        p -= 2;
        dense_backward(*d, state_.params[p], in, grad, dx, need_dx,
                       param_grads ? &(*param_grads)[p] : nullptr,
                       param_grads ? &(*param_grads)[p + 1] : nullptr);
      } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
        p -= 2;
        conv_backward(*c, shapes_[l], shapes_[l + 1], state_.params[p], in, grad, dx, need_dx,
                      param_grads ? &(*param_grads)[p] : nullptr,
                      param_grads ? &(*param_grads)[p + 1] : nullptr);
      } else if (std::holds_alternative<ReLU>(layer)) {
        auto src = in.values();
        auto g = grad.values();
        auto dst = dx.values();
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? g[i] : 0.0;
      } else {
        std::copy(grad.values().begin(), grad.values().end(), dx.values().begin());
      }
      grad = std::move(dx);
    }
    return grad;
  }

  static void dense_forward(const Dense& d, const DenseArray& w, const DenseArray& b, const DenseArray& in,
                            DenseArray& out) {
    const std::size_t n = in.rows();
    for (std::size_t i = 0; i < n; ++i) {
      auto x = in.row(i);
      auto y = out.row(i);
      for (std::size_t o = 0; o < d.out; ++o) {
        const double* wr = w.values().data() + o * d.in;
        double s = b[o];
        for (std::size_t k = 0; k < d.in; ++k) s += wr[k] * x[k];
        y[o] = s;
      }
    }
  }

  static void dense_backward(const Dense& d, const DenseArray& w, const DenseArray& in, const DenseArray& dy,
                             DenseArray& dx, bool need_dx, DenseArray* dw, DenseArray* db) {
    const std::size_t n = in.rows();
    for (std::size_t i = 0; i < n; ++i) {
      auto x = in.row(i);
      auto g = dy.row(i);
      if (dw) {
        for (std::size_t o = 0; o < d.out; ++o) {
          double* dwr = dw->values().data() + o * d.in;
          for (std::size_t k = 0; k < d.in; ++k) dwr[k] += g[o] * x[k];
          (*db)[o] += g[o];
        }
      }
      if (need_dx) {
        auto dxr = dx.row(i);
        for (std::size_t o = 0; o < d.out; ++o) {
          const double* wr = w.values().data() + o * d.in;
          for (std::size_t k = 0; k < d.in; ++k) dxr[k] += g[o] * wr[k];
        }
      }
    }
  }

  static void conv_forward(const Conv2d& c, const Shape& is, const Shape& os, const DenseArray& w,
                           const DenseArray& b, const DenseArray& in, DenseArray& out) {
    const std::size_t H = is[1], W = is[2], OH = os[1], OW = os[2], K = c.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(c.pad);
    for (std::size_t i = 0; i < in.rows(); ++i) {
      auto x = in.row(i);
      auto y = out.row(i);
      for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            double s = b[oc];
            for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
              for (std::size_t kh = 0; kh < K; ++kh) {
                const auto h = static_cast<std::ptrdiff_t>(oh * c.stride + kh) - pad;
                if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kw = 0; kw < K; ++kw) {
                  const auto ww = static_cast<std::ptrdiff_t>(ow * c.stride + kw) - pad;
                  if (ww < 0 || ww >= static_cast<std::ptrdiff_t>(W)) continue;
                  s += w[((oc * c.in_channels + ic) * K + kh) * K + kw] *
                       x[(ic * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(ww)];
                }
              }
            }
            y[(oc * OH + oh) * OW + ow] = s;
          }
        }
      }
    }
  }

  static void conv_backward(const Conv2d& c, const Shape& is, const Shape& os, const DenseArray& w,
                            const DenseArray& in, const DenseArray& dy, DenseArray& dx, bool need_dx,
                            DenseArray* dw, DenseArray* db) {
    const std::size_t H = is[1], W = is[2], OH = os[1], OW = os[2], K = c.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(c.pad);
    for (std::size_t i = 0; i < in.rows(); ++i) {
      auto x = in.row(i);
      auto g = dy.row(i);
      auto dxr = dx.row(i);
      for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const double go = g[(oc * OH + oh) * OW + ow];
            if (db) (*db)[oc] += go;
            for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
              for (std::size_t kh = 0; kh < K; ++kh) {
                const auto h = static_cast<std::ptrdiff_t>(oh * c.stride + kh) - pad;
                if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kw = 0; kw < K; ++kw) {
                  const auto ww = static_cast<std::ptrdiff_t>(ow * c.stride + kw) - pad;
                  if (ww < 0 || ww >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t xi = (ic * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(ww);
                  const std::size_t wi = ((oc * c.in_channels + ic) * K + kh) * K + kw;
                  if (dw) (*dw)[wi] += go * x[xi];
                  if (need_dx) dxr[xi] += go * w[wi];
                }
              }
            }
          }
        }
      }
    }
  }

  ModelSpec spec_;
  ModelState state_;
  std::vector<Shape> shapes_;
  mutable PassCounts counts_;
};

/// Fraction of rows whose arg-max equals the label.
template <Classifier M>
double accuracy(const M& model, const LabeledBatch& batch) {
  if (batch.size() == 0) return 0.0;
  const auto pred = predictions(model.forward(batch.images));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == batch.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

}  // namespace dlab
