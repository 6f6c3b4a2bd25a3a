#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/attacks.hpp"
#include "dlab/network.hpp"
#include "dlab/rng.hpp"

namespace dlab {

/// Estimate of the fraction of examples that are correct at x and at
/// x + delta but misclassified somewhere strictly in between.
struct DistortionEstimate {
  std::optional<double> d;  // empty when no example qualifies for S_N
  std::size_t n_s_n = 0;
  std::size_t n_s_d_and_s_n = 0;
  std::size_t samples_per_example = 0;
  std::vector<std::size_t> distorted;  // dataset indices in S_D and S_N
};

struct GammaStats {
  std::vector<double> per_example_gamma;
  double mean_gamma = 0.0;
  double fraction_negative = 0.0;
};

struct RobustAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<double> ratio;  // empty when total == 0
};

struct GradNormStats {
  double mean_l2 = 0.0;
  double mean_l2_squared = 0.0;
};

inline constexpr std::size_t kDefaultChunk = 512;

namespace detail {

inline std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

template <class F>
void for_each_chunk(const LabeledBatch& data, std::size_t chunk, F&& f) {
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const auto idx = iota_range(begin, end);
    f(begin, gather(data, idx));
  }
}

}  // namespace detail

/// Probes x + (j / (n_samples + 1)) * delta for j = 1..n_samples with
/// delta = epsilon * sgn(grad), keeping every probe strictly inside the
/// open segment. The grid for 2n + 1 samples contains the grid for n.
template <Classifier M>
DistortionEstimate estimate_distortion(const M& model, const LabeledBatch& data, double epsilon,
                                       std::size_t n_samples = 100, std::size_t chunk = kDefaultChunk) {
  if (n_samples < 1) throw ConfigError("distortion: n_samples must be >= 1");
  detail::check_epsilon(epsilon);
  DistortionEstimate est;
  est.samples_per_example = n_samples;
  const double denom = static_cast<double>(n_samples + 1);

  detail::for_each_chunk(data, chunk, [&](std::size_t base, const LabeledBatch& b) {
    const std::size_t n = b.size();
    const InputGradient g = model.input_gradient(b.images, b.labels);
    DenseArray delta(g.grad.shape());
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = epsilon * sign(g.grad[i]);

    const auto clean = predictions(g.logits);
    const auto end = predictions(model.forward(detail::offset(b.images, delta, 1.0)));
    std::vector<bool> in_n(n), in_d(n, false);
    for (std::size_t i = 0; i < n; ++i) in_n[i] = clean[i] == b.labels[i] && end[i] == b.labels[i];

    if (std::none_of(in_n.begin(), in_n.end(), [](bool v) { return v; })) return;
    for (std::size_t j = 1; j <= n_samples; ++j) {
      const double k = static_cast<double>(j) / denom;
      const auto pred = predictions(model.forward(detail::offset(b.images, delta, k)));
      for (std::size_t i = 0; i < n; ++i)
        if (pred[i] != b.labels[i]) in_d[i] = true;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_n[i]) continue;
      ++est.n_s_n;
      if (in_d[i]) {
        ++est.n_s_d_and_s_n;
        est.distorted.push_back(base + i);
      }
    }
  });

  if (est.n_s_n > 0) est.d = static_cast<double>(est.n_s_d_and_s_n) / static_cast<double>(est.n_s_n);
  return est;
}

/// Per-example nonlinearity {l(x + delta) - l(x)} - epsilon * ||grad l(x)||_1
/// with delta = epsilon * sgn(grad l(x)). Uses per-example losses and does
/// not clamp x + delta, so an affine loss gives exactly zero up to rounding.
template <Classifier M>
GammaStats gamma(const M& model, const LabeledBatch& batch, double epsilon) {
  detail::check_epsilon(epsilon);
  GammaStats out;
  const std::size_t n = batch.size();
  if (n == 0) return out;
  const InputGradient g = model.input_gradient(batch.images, batch.labels);
  const double scale = static_cast<double>(n);  // mean-loss gradient -> per-example gradient
  DenseArray shifted(batch.images.shape());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] = batch.images[i] + epsilon * sign(g.grad[i]);
  const auto after = model.example_losses(shifted, batch.labels);

  out.per_example_gamma.resize(n);
  std::size_t negative = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double l1 = 0.0;
    for (double v : g.grad.row(i)) l1 += std::abs(v * scale);
    const double gm = (after[i] - g.losses[i]) - epsilon * l1;
    out.per_example_gamma[i] = gm;
    sum += gm;
    negative += gm < 0.0;
  }
  out.mean_gamma = sum / scale;
  out.fraction_negative = static_cast<double>(negative) / scale;
  return out;
}

/// Fraction of examples still classified correctly after the attack. With
/// `restrict_to_correct`, only clean-correct examples enter the denominator.
template <Classifier M>
RobustAccuracy robust_accuracy(const M& model, const LabeledBatch& data, const AttackSpec& attack,
                               bool restrict_to_correct, Rng& rng, std::size_t chunk = kDefaultChunk) {
  RobustAccuracy out;
  detail::for_each_chunk(data, chunk, [&](std::size_t, const LabeledBatch& b) {
    Rng chunk_rng(rng.next());
    const auto outcome = run_attack(model, b, attack, chunk_rng);
    const auto adv = predictions(model.forward(outcome.adv_images));
    std::vector<int> clean;
    if (restrict_to_correct) clean = predictions(model.forward(b.images));
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (restrict_to_correct && clean[i] != b.labels[i]) continue;
      ++out.total;
      out.correct += adv[i] == b.labels[i];
    }
  });
  if (out.total > 0) out.ratio = static_cast<double>(out.correct) / static_cast<double>(out.total);
  return out;
}

/// Mean per-pixel |delta|.
inline double perturbation_l1_mean(const DenseArray& deltas) {
  if (deltas.empty()) return 0.0;
  return l1_norm(deltas.values()) / static_cast<double>(deltas.size());
}

/// Mean over examples of ||grad_x l_i||_2 and of its square, where l_i is
/// the example's own loss.
template <Classifier M>
GradNormStats input_grad_l2(const M& model, const LabeledBatch& batch) {
  GradNormStats out;
  const std::size_t n = batch.size();
  if (n == 0) return out;
  const InputGradient g = model.input_gradient(batch.images, batch.labels);
  const double scale = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (double v : g.grad.row(i)) sq += (v * scale) * (v * scale);
    out.mean_l2 += std::sqrt(sq);
    out.mean_l2_squared += sq;
  }
  out.mean_l2 /= scale;
  out.mean_l2_squared /= scale;
  return out;
}

}  // namespace dlab
