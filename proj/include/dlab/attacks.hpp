#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dlab/array.hpp"
#include "dlab/model.hpp"
#include "dlab/network.hpp"
#include "dlab/rng.hpp"

namespace dlab {

enum class AttackKind { Fgsm, Fast, Pgd, Checkpointed };

/// Which attack to run and with which budget. Fields not used by a kind
/// are ignored (alpha by FGSM, steps/restarts outside PGD, checkpoints
/// outside Checkpointed).
struct AttackSpec {
  AttackKind kind = AttackKind::Fgsm;
  double epsilon = 0.0;
  double alpha = 0.0;
  std::size_t steps = 1;
  std::size_t restarts = 1;
  std::size_t checkpoints = 1;
};

/// Rational scale j/c chosen for one example.
struct Scale {
  std::size_t num = 1;
  std::size_t den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Scale&, const Scale&) = default;
};

struct AttackOutcome {
  DenseArray adv_images;
  DenseArray delta;               // adv_images - clean images
  std::vector<Scale> selected_k;  // 1/1 except for the checkpointed attack
  std::uint64_t forward_count = 0;
  std::uint64_t backward_count = 0;
};

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Elementwise clip to [-epsilon, epsilon].
inline DenseArray project_linf(DenseArray delta, double epsilon) {
  for (double& d : delta.values()) d = std::clamp(d, -epsilon, epsilon);
  return delta;
}

/// Elementwise clip to [0, 1].
inline DenseArray clamp_pixels(DenseArray x) {
  for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

namespace detail {

inline void check_epsilon(double epsilon) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
    throw ConfigError("attack: epsilon must be finite and >= 0, got " + std::to_string(epsilon));
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw ConfigError("attack: alpha must be finite and >= 0, got " + std::to_string(alpha));
}

/// clamp(x + scale * direction)
inline DenseArray offset(const DenseArray& x, const DenseArray& direction, double scale) {
  DenseArray out(x.shape());
  auto o = out.values();
  auto xs = x.values();
  auto ds = direction.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(xs[i] + scale * ds[i], 0.0, 1.0);
  return out;
}

inline DenseArray difference(const DenseArray& a, const DenseArray& b) {
  DenseArray out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

/// Uniform(-eps, eps) per pixel, then pulled back so x + eta stays in [0,1].
inline DenseArray random_start(const DenseArray& x, double epsilon, Rng& rng) {
  DenseArray eta(x.shape());
  for (std::size_t i = 0; i < eta.size(); ++i) {
    const double start = std::clamp(x[i] + rng.uniform(-epsilon, epsilon), 0.0, 1.0);
    eta[i] = start - x[i];
  }
  return eta;
}

/// One signed-gradient step from eta, clipped to the epsilon ball.
inline DenseArray signed_step(const DenseArray& eta, const DenseArray& grad, double alpha, double epsilon) {
  DenseArray delta(eta.shape());
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = std::clamp(eta[i] + alpha * sign(grad[i]), -epsilon, epsilon);
  return delta;
}

inline DenseArray add(const DenseArray& x, const DenseArray& delta) {
  DenseArray out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + delta[i];
  return out;
}

inline AttackOutcome finish(const DenseArray& x, DenseArray adv, std::uint64_t fwd, std::uint64_t bwd) {
  AttackOutcome out;
  out.delta = difference(adv, x);
  out.adv_images = std::move(adv);
  out.selected_k.assign(x.rows(), Scale{1, 1});
  out.forward_count = fwd;
  out.backward_count = bwd;
  return out;
}

}  // namespace detail

/// x' = clamp(x + epsilon * sgn(grad)), sgn(0) = 0. One forward, one backward.
template <Classifier M>
AttackOutcome fgsm(const M& model, const LabeledBatch& batch, double epsilon) {
  detail::check_epsilon(epsilon);
  const InputGradient g = model.input_gradient(batch.images, batch.labels);
  DenseArray direction(g.grad.shape());
  for (std::size_t i = 0; i < direction.size(); ++i) direction[i] = sign(g.grad[i]);
  return detail::finish(batch.images, detail::offset(batch.images, direction, epsilon), 1, 1);
}

/// Random-init single step: eta ~ U(-eps, eps), delta = clip(eta + alpha *
/// sgn(grad at x + eta)). One forward, one backward.
template <Classifier M>
AttackOutcome fast_single_step(const M& model, const LabeledBatch& batch, double epsilon, double alpha, Rng& rng) {
  detail::check_epsilon(epsilon);
  detail::check_alpha(alpha);
  const DenseArray& x = batch.images;
  const DenseArray eta = detail::random_start(x, epsilon, rng);
  const InputGradient g = model.input_gradient(detail::add(x, eta), batch.labels);
  const DenseArray delta = detail::signed_step(eta, g.grad, alpha, epsilon);
  return detail::finish(x, clamp_pixels(detail::add(x, delta)), 1, 1);
}

struct PgdOptions {
  bool random_start = true;
  /// Keep each example's highest-loss iterate seen so far instead of the
  /// last one; costs one extra forward per restart.
  bool track_best = false;
};

/// L-infinity PGD with sign steps, projection and pixel clamping at every
/// step. Across restarts the per-example iterate with the highest loss is
/// kept (ties go to the earlier restart).
///
/// Passes: restarts * steps backward; restarts * steps forward when
/// restarts == 1 and track_best is off, otherwise one extra forward per
/// restart to score the final iterate.
template <Classifier M>
AttackOutcome pgd(const M& model, const LabeledBatch& batch, double epsilon, double alpha, std::size_t steps,
                  std::size_t restarts, Rng& rng, PgdOptions options = {}) {
  detail::check_epsilon(epsilon);
  detail::check_alpha(alpha);
  if (steps < 1) throw ConfigError("pgd: steps must be >= 1");
  if (restarts < 1) throw ConfigError("pgd: restarts must be >= 1");
  const DenseArray& x = batch.images;
  const std::size_t n = x.rows();
  const bool score = restarts > 1 || options.track_best;

  DenseArray best = x;
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  std::uint64_t fwd = 0, bwd = 0;

  const auto keep_better = [&](const DenseArray& cand, const std::vector<double>& losses) {
    for (std::size_t i = 0; i < n; ++i) {
      if (losses[i] > best_loss[i]) {
        best_loss[i] = losses[i];
        auto src = cand.row(i);
        std::copy(src.begin(), src.end(), best.row(i).begin());
      }
    }
  };

  for (std::size_t r = 0; r < restarts; ++r) {
    DenseArray cur = options.random_start ? detail::add(x, detail::random_start(x, epsilon, rng)) : x;
    for (std::size_t t = 0; t < steps; ++t) {
      const InputGradient g = model.input_gradient(cur, batch.labels);
      ++fwd;
      ++bwd;
      if (options.track_best) keep_better(cur, g.losses);
      DenseArray next(x.shape());
      for (std::size_t i = 0; i < next.size(); ++i) {
        const double d = std::clamp((cur[i] - x[i]) + alpha * sign(g.grad[i]), -epsilon, epsilon);
        next[i] = std::clamp(x[i] + d, 0.0, 1.0);
      }
      cur = std::move(next);
    }
    if (score) {
      keep_better(cur, model.example_losses(cur, batch.labels));
      ++fwd;
    } else {
      best = std::move(cur);
    }
  }
  return detail::finish(x, std::move(best), fwd, bwd);
}

/// Where the k = 0 prediction of the checkpointed attack is taken.
enum class CheckpointReference {
  Perturbed,  // at x + eta, reusing the forward of the gradient pass
  Clean,      // at x itself, one extra forward
};

/// Single-step attack that probes x + (j/c) * delta for j = 1..c and trains
/// on the smallest misclassified scale:
///   k* = min({j : y_hat_j != y} U {c}) / c,   x' = clamp(x + k* delta).
/// y_hat_0 comes from the gradient pass at x + eta (or from x, see
/// CheckpointReference); k* = 0 yields the clean image.
///
/// Passes: c + 1 forward (c + 2 with a clean reference), 1 backward.
template <Classifier M>
AttackOutcome checkpointed_single_step(const M& model, const LabeledBatch& batch, double epsilon, double alpha,
                                       std::size_t c, Rng& rng,
                                       CheckpointReference reference = CheckpointReference::Perturbed) {
  detail::check_epsilon(epsilon);
  detail::check_alpha(alpha);
  if (c < 1) throw ConfigError("checkpointed attack: c must be >= 1");
  const DenseArray& x = batch.images;
  const std::size_t n = x.rows();
  std::uint64_t fwd = 1;

  const DenseArray eta = detail::random_start(x, epsilon, rng);
  const InputGradient g = model.input_gradient(detail::add(x, eta), batch.labels);
  std::vector<int> pred0;
  if (reference == CheckpointReference::Clean) {
    pred0 = predictions(model.forward(x));
    ++fwd;
  } else {
    pred0 = predictions(g.logits);
  }
  const DenseArray delta = detail::signed_step(eta, g.grad, alpha, epsilon);

  std::vector<std::size_t> k(n, c);
  for (std::size_t i = 0; i < n; ++i)
    if (pred0[i] != batch.labels[i]) k[i] = 0;
  for (std::size_t j = 1; j <= c; ++j) {
    const double scale = static_cast<double>(j) / static_cast<double>(c);
    const auto pred = predictions(model.forward(detail::offset(x, delta, scale)));
    ++fwd;
    for (std::size_t i = 0; i < n; ++i)
      if (k[i] == c && j < c && pred[i] != batch.labels[i]) k[i] = j;
  }

  DenseArray adv(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double scale = static_cast<double>(k[i]) / static_cast<double>(c);
    auto xr = x.row(i);
    auto dr = delta.row(i);
    auto ar = adv.row(i);
    for (std::size_t p = 0; p < xr.size(); ++p) ar[p] = std::clamp(xr[p] + scale * dr[p], 0.0, 1.0);
  }
  AttackOutcome out = detail::finish(x, std::move(adv), fwd, 1);
  for (std::size_t i = 0; i < n; ++i) out.selected_k[i] = Scale{k[i], c};
  return out;
}

/// Dispatches on spec.kind. PGD uses default options (random start).
template <Classifier M>
AttackOutcome run_attack(const M& model, const LabeledBatch& batch, const AttackSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case AttackKind::Fgsm:
      return fgsm(model, batch, spec.epsilon);
    case AttackKind::Fast:
      return fast_single_step(model, batch, spec.epsilon, spec.alpha, rng);
    case AttackKind::Pgd:
      return pgd(model, batch, spec.epsilon, spec.alpha, spec.steps, spec.restarts, rng);
    case AttackKind::Checkpointed:
      return checkpointed_single_step(model, batch, spec.epsilon, spec.alpha, spec.checkpoints, rng);
  }
  throw ConfigError("unknown attack kind");
}

}  // namespace dlab
