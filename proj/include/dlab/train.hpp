#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dlab/array.hpp"
#include "dlab/attacks.hpp"
#include "dlab/metrics.hpp"
#include "dlab/network.hpp"
#include "dlab/rng.hpp"
#include "dlab/runlog.hpp"

namespace dlab {

enum class Method { Standard, FgsmAT, FastAT, PgdAT, Proposed, FastATEpsSchedule };

struct AlphaRule {
  enum class Kind { Fixed, TimesEpsilon, Pgd };
  Kind kind = Kind::TimesEpsilon;
  double value = 1.25;  // alpha for Fixed, the factor for TimesEpsilon
};

/// Step size for a perturbation budget. The PGD rule is max(2/255, eps/steps).
inline double alpha_for(const AlphaRule& rule, double epsilon, std::size_t pgd_steps) {
  switch (rule.kind) {
    case AlphaRule::Kind::Fixed:
      return rule.value;
    case AlphaRule::Kind::TimesEpsilon:
      return rule.value * epsilon;
    case AlphaRule::Kind::Pgd:
      return std::max(2.0 / 255.0, epsilon / static_cast<double>(std::max<std::size_t>(pgd_steps, 1)));
  }
  return rule.value;
}

struct LrSchedule {
  enum class Kind { Constant, StepDecay, Cyclic };
  Kind kind = Kind::Constant;
  double factor = 0.2;               // StepDecay
  std::vector<double> milestones;    // StepDecay, strictly increasing epochs
  double max_lr = 0.3;               // Cyclic
  double peak_epoch = 15.0;          // Cyclic
  double total_epochs = 30.0;        // Cyclic
};

/// Learning rate at a (possibly fractional) epoch.
///   StepDecay: base * factor^(number of milestones <= epoch)
///   Cyclic:    linear 0 -> max_lr at peak_epoch -> 0 at total_epochs
inline double lr_at(const LrSchedule& s, double base_lr, double epoch) {
  switch (s.kind) {
    case LrSchedule::Kind::Constant:
      return base_lr;
    case LrSchedule::Kind::StepDecay: {
      double lr = base_lr;
      for (double m : s.milestones)
        if (m <= epoch) lr *= s.factor;
      return lr;
    }
    case LrSchedule::Kind::Cyclic:
      if (epoch <= 0.0) return 0.0;
      if (epoch <= s.peak_epoch) return s.max_lr * epoch / s.peak_epoch;
      if (epoch < s.total_epochs) return s.max_lr * (s.total_epochs - epoch) / (s.total_epochs - s.peak_epoch);
      return 0.0;
  }
  return base_lr;
}

enum class EvalCadence { Never, Epoch, Batch };
enum class EvalScope { Batch, TrainSet };

/// Metric evaluation inside training. Epoch cadence evaluates after the last
/// batch of each epoch; Batch cadence ("trace" mode) after every batch.
struct EvalConfig {
  EvalCadence cadence = EvalCadence::Epoch;
  EvalScope scope = EvalScope::Batch;
  std::size_t pgd_steps = 7;
  double pgd_alpha_ratio = 0.25;  // alpha = ratio * epsilon, i.e. 2/255 at 8/255
  std::size_t pgd_restarts = 1;
  bool distortion = true;
  std::size_t distortion_samples = 100;
  bool gamma = true;
};

struct TrainConfig {
  Method method = Method::Proposed;
  std::size_t pgd_steps = 2;        // PgdAT
  std::size_t checkpoints = 3;      // Proposed
  std::vector<double> eps_schedule;  // FastATEpsSchedule, one value per epoch
  CheckpointReference checkpoint_reference = CheckpointReference::Perturbed;
  double epsilon = 8.0 / 255.0;
  AlphaRule alpha;
  std::size_t epochs = 1;
  std::size_t batch_size = 128;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule lr_schedule;
  std::uint64_t seed = 0;
  EvalConfig eval;
};

// ---------------------------------------------------------------------------
// JSON mapping of the training configuration (also the run-log header).

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void get_to(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    const auto& v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw ConfigError(where + "." + key + ": expected a non-negative integer");
  }
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class E>
E enum_from(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const std::string& where) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(where + ": unknown value '" + s + "'");
}

template <class E>
std::string enum_to(E v, std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, value] : table)
    if (v == value) return name;
  return "?";
}

inline const std::initializer_list<std::pair<const char*, Method>> kMethods = {
    {"standard", Method::Standard},   {"fgsm", Method::FgsmAT},         {"fast", Method::FastAT},
    {"pgd", Method::PgdAT},           {"proposed", Method::Proposed},   {"fast_eps_schedule", Method::FastATEpsSchedule}};

inline const std::initializer_list<std::pair<const char*, AlphaRule::Kind>> kAlphaRules = {
    {"fixed", AlphaRule::Kind::Fixed}, {"times_epsilon", AlphaRule::Kind::TimesEpsilon}, {"pgd", AlphaRule::Kind::Pgd}};

inline const std::initializer_list<std::pair<const char*, LrSchedule::Kind>> kLrKinds = {
    {"constant", LrSchedule::Kind::Constant}, {"step", LrSchedule::Kind::StepDecay}, {"cyclic", LrSchedule::Kind::Cyclic}};

inline const std::initializer_list<std::pair<const char*, EvalCadence>> kCadences = {
    {"never", EvalCadence::Never}, {"epoch", EvalCadence::Epoch}, {"batch", EvalCadence::Batch}};

inline const std::initializer_list<std::pair<const char*, EvalScope>> kScopes = {
    {"batch", EvalScope::Batch}, {"train_set", EvalScope::TrainSet}};

inline const std::initializer_list<std::pair<const char*, CheckpointReference>> kReferences = {
    {"perturbed", CheckpointReference::Perturbed}, {"clean", CheckpointReference::Clean}};

}  // namespace detail

inline nlohmann::json to_json(const TrainConfig& c) {
  using detail::enum_to;
  nlohmann::json j;
  j["method"] = enum_to(c.method, detail::kMethods);
  j["pgd_steps"] = c.pgd_steps;
  j["checkpoints"] = c.checkpoints;
  j["eps_schedule"] = c.eps_schedule;
  j["checkpoint_reference"] = enum_to(c.checkpoint_reference, detail::kReferences);
  j["epsilon"] = c.epsilon;
  j["alpha"] = {{"rule", enum_to(c.alpha.kind, detail::kAlphaRules)}, {"value", c.alpha.value}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["lr_schedule"] = {{"kind", enum_to(c.lr_schedule.kind, detail::kLrKinds)},
                      {"factor", c.lr_schedule.factor},
                      {"milestones", c.lr_schedule.milestones},
                      {"max_lr", c.lr_schedule.max_lr},
                      {"peak_epoch", c.lr_schedule.peak_epoch},
                      {"total_epochs", c.lr_schedule.total_epochs}};
  j["seed"] = c.seed;
  j["eval"] = {{"cadence", enum_to(c.eval.cadence, detail::kCadences)},
               {"scope", enum_to(c.eval.scope, detail::kScopes)},
               {"pgd_steps", c.eval.pgd_steps},
               {"pgd_alpha_ratio", c.eval.pgd_alpha_ratio},
               {"pgd_restarts", c.eval.pgd_restarts},
               {"distortion", c.eval.distortion},
               {"distortion_samples", c.eval.distortion_samples},
               {"gamma", c.eval.gamma}};
  return j;
}

/// Strict inverse of to_json: missing keys keep their defaults, unknown
/// keys are rejected. `eps_schedule_log` is accepted and ignored here (the
/// CLI resolves it into eps_schedule).
inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where = "train") {
  using detail::get_to;
  detail::reject_unknown(j,
                         {"method", "pgd_steps", "checkpoints", "eps_schedule", "eps_schedule_log",
                          "checkpoint_reference", "epsilon", "alpha", "epochs", "batch_size", "lr", "momentum",
                          "weight_decay", "lr_schedule", "seed", "eval"},
                         where);
  TrainConfig c;
  std::string s;
  if (j.contains("method")) {
    get_to(j, "method", s, where);
    c.method = detail::enum_from(s, detail::kMethods, where + ".method");
  }
  get_to(j, "pgd_steps", c.pgd_steps, where);
  get_to(j, "checkpoints", c.checkpoints, where);
  get_to(j, "eps_schedule", c.eps_schedule, where);
  if (j.contains("checkpoint_reference")) {
    get_to(j, "checkpoint_reference", s, where);
    c.checkpoint_reference = detail::enum_from(s, detail::kReferences, where + ".checkpoint_reference");
  }
  get_to(j, "epsilon", c.epsilon, where);
  if (j.contains("alpha")) {
    const auto& a = j["alpha"];
    detail::reject_unknown(a, {"rule", "value"}, where + ".alpha");
    if (a.contains("rule")) {
      get_to(a, "rule", s, where + ".alpha");
      c.alpha.kind = detail::enum_from(s, detail::kAlphaRules, where + ".alpha.rule");
    }
    get_to(a, "value", c.alpha.value, where + ".alpha");
  }
  get_to(j, "epochs", c.epochs, where);
  get_to(j, "batch_size", c.batch_size, where);
  get_to(j, "lr", c.lr, where);
  get_to(j, "momentum", c.momentum, where);
  get_to(j, "weight_decay", c.weight_decay, where);
  if (j.contains("lr_schedule")) {
    const auto& l = j["lr_schedule"];
    const std::string w = where + ".lr_schedule";
    detail::reject_unknown(l, {"kind", "factor", "milestones", "max_lr", "peak_epoch", "total_epochs"}, w);
    if (l.contains("kind")) {
      get_to(l, "kind", s, w);
      c.lr_schedule.kind = detail::enum_from(s, detail::kLrKinds, w + ".kind");
    }
    get_to(l, "factor", c.lr_schedule.factor, w);
    get_to(l, "milestones", c.lr_schedule.milestones, w);
    get_to(l, "max_lr", c.lr_schedule.max_lr, w);
    get_to(l, "peak_epoch", c.lr_schedule.peak_epoch, w);
    get_to(l, "total_epochs", c.lr_schedule.total_epochs, w);
  }
  get_to(j, "seed", c.seed, where);
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    const std::string w = where + ".eval";
    detail::reject_unknown(e, {"cadence", "scope", "pgd_steps", "pgd_alpha_ratio", "pgd_restarts", "distortion",
                               "distortion_samples", "gamma"},
                           w);
    if (e.contains("cadence")) {
      get_to(e, "cadence", s, w);
      c.eval.cadence = detail::enum_from(s, detail::kCadences, w + ".cadence");
    }
    if (e.contains("scope")) {
      get_to(e, "scope", s, w);
      c.eval.scope = detail::enum_from(s, detail::kScopes, w + ".scope");
    }
    get_to(e, "pgd_steps", c.eval.pgd_steps, w);
    get_to(e, "pgd_alpha_ratio", c.eval.pgd_alpha_ratio, w);
    get_to(e, "pgd_restarts", c.eval.pgd_restarts, w);
    get_to(e, "distortion", c.eval.distortion, w);
    get_to(e, "distortion_samples", c.eval.distortion_samples, w);
    get_to(e, "gamma", c.eval.gamma, w);
  }
  return c;
}

inline void validate(const TrainConfig& c, std::size_t dataset_size) {
  if (c.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (c.batch_size == 0 || c.batch_size > dataset_size)
    throw ConfigError("train: batch_size must be in [1, dataset size]");
  if (!(c.epsilon >= 0.0) || !std::isfinite(c.epsilon)) throw ConfigError("train: epsilon must be >= 0");
  for (std::size_t i = 1; i < c.lr_schedule.milestones.size(); ++i)
    if (!(c.lr_schedule.milestones[i] > c.lr_schedule.milestones[i - 1]))
      throw ConfigError("train: lr milestones must be strictly increasing");
  if (c.lr_schedule.kind == LrSchedule::Kind::Cyclic &&
      !(c.lr_schedule.peak_epoch > 0.0 && c.lr_schedule.total_epochs > c.lr_schedule.peak_epoch))
    throw ConfigError("train: cyclic schedule needs 0 < peak_epoch < total_epochs");
  if (c.method == Method::PgdAT && c.pgd_steps < 1) throw ConfigError("train: pgd_steps must be >= 1");
  if (c.method == Method::Proposed && c.checkpoints < 1) throw ConfigError("train: checkpoints must be >= 1");
  if (c.method == Method::FastATEpsSchedule && c.eps_schedule.size() < c.epochs)
    throw ConfigError("train: epsilon schedule covers " + std::to_string(c.eps_schedule.size()) +
                      " epochs but the run needs " + std::to_string(c.epochs));
  if (c.eval.cadence != EvalCadence::Never) {
    if (c.eval.pgd_steps < 1 || c.eval.pgd_restarts < 1) throw ConfigError("train: eval PGD needs steps, restarts >= 1");
    if (c.eval.distortion && c.eval.distortion_samples < 1) throw ConfigError("train: distortion_samples must be >= 1");
  }
}

// ---------------------------------------------------------------------------

/// Fills the optional metric fields of `rec` by evaluating `model` on `batch`.
template <Classifier M>
void evaluate_metrics(const M& model, const LabeledBatch& batch, double epsilon, const EvalConfig& eval, Rng& rng,
                      BatchRecord& rec) {
  if (batch.size() == 0) return;
  rec.clean_acc = accuracy(model, batch);
  const AttackOutcome f = fgsm(model, batch, epsilon);
  const auto fp = predictions(model.forward(f.adv_images));
  const AttackOutcome p =
      pgd(model, batch, epsilon, eval.pgd_alpha_ratio * epsilon, eval.pgd_steps, eval.pgd_restarts, rng);
  const auto pp = predictions(model.forward(p.adv_images));
  std::size_t f_ok = 0, p_ok = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    f_ok += fp[i] == batch.labels[i];
    p_ok += pp[i] == batch.labels[i];
  }
  const double n = static_cast<double>(batch.size());
  rec.fgsm_acc = static_cast<double>(f_ok) / n;
  rec.pgd_acc = static_cast<double>(p_ok) / n;
  rec.mean_abs_pgd_perturbation = perturbation_l1_mean(p.delta);
  const GradNormStats norms = input_grad_l2(model, batch);
  rec.input_grad_l2 = norms.mean_l2;
  rec.input_grad_l2_squared = norms.mean_l2_squared;
  if (eval.distortion) {
    const auto d = estimate_distortion(model, batch, epsilon, eval.distortion_samples);
    rec.distortion_d = d.d;
    rec.distortion_n_s_n = d.n_s_n;
  }
  if (eval.gamma) {
    const GammaStats g = gamma(model, batch, epsilon);
    rec.mean_gamma = g.mean_gamma;
    rec.gamma_fraction_negative = g.fraction_negative;
  }
}

struct TrainResult {
  Network model;
  RunLog log;
};

/// Runs adversarial training. Each batch: build the training inputs for the
/// configured method, take one SGD step on them, append a BatchRecord.
/// Deterministic for a given config, dataset and initial model.
inline TrainResult train(const TrainConfig& cfg, const LabeledBatch& data, Network model) {
  validate(cfg, data.size());
  data.validate(model.n_classes());

  RunLog log;
  log.config = to_json(cfg);
  log.seed = cfg.seed;

  const std::size_t n = data.size();
  const std::size_t n_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(cfg.seed, "shuffle", epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    const double eps =
        cfg.method == Method::FastATEpsSchedule ? cfg.eps_schedule[epoch] : cfg.epsilon;
    const double alpha = alpha_for(cfg.alpha, eps, cfg.pgd_steps);

    for (std::size_t b = 0; b < n_batches; ++b, ++step) {
      const std::size_t begin = b * cfg.batch_size, end = std::min(n, begin + cfg.batch_size);
      const LabeledBatch batch = gather(data, std::span(order).subspan(begin, end - begin));

      BatchRecord rec;
      rec.epoch = epoch;
      rec.batch = b;
      rec.step = step;
      rec.epsilon_used = eps;
      rec.lr_used = lr_at(cfg.lr_schedule, cfg.lr,
                          static_cast<double>(epoch) + static_cast<double>(b) / static_cast<double>(n_batches));

      const PassCounts before = model.counts();
      Rng attack_rng(cfg.seed, "attack", step);
      std::optional<AttackOutcome> outcome;
      switch (cfg.method) {
        case Method::Standard:
          break;
        case Method::FgsmAT:
          outcome = fgsm(model, batch, eps);
          break;
        case Method::FastAT:
        case Method::FastATEpsSchedule:
          outcome = fast_single_step(model, batch, eps, alpha, attack_rng);
          break;
        case Method::PgdAT:
          outcome = pgd(model, batch, eps, alpha, cfg.pgd_steps, 1, attack_rng);
          break;
        case Method::Proposed:
          outcome = checkpointed_single_step(model, batch, eps, alpha, cfg.checkpoints, attack_rng,
                                             cfg.checkpoint_reference);
          break;
      }

      const DenseArray& inputs = outcome ? outcome->adv_images : batch.images;
      const ParamGradients grads = model.param_gradients(inputs, batch.labels);
      sgd_step(model.state(), grads.grads, SgdOptions{rec.lr_used, cfg.momentum, cfg.weight_decay});
      const PassCounts after = model.counts();
      rec.forward_passes = after.forward - before.forward;
      rec.backward_passes = after.backward - before.backward;
      rec.train_loss = grads.loss;

      if (outcome) {
        double sum = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) sum += linf_norm(outcome->delta.row(i));
        rec.mean_delta_linf = sum / static_cast<double>(batch.size());
        if (cfg.method == Method::Proposed) {
          std::size_t zero = 0;
          double ksum = 0.0;
          for (const Scale& k : outcome->selected_k) {
            zero += k.num == 0;
            ksum += k.value();
          }
          rec.frac_k_zero = static_cast<double>(zero) / static_cast<double>(batch.size());
          rec.mean_k = ksum / static_cast<double>(batch.size());
        }
      }

      const bool evaluate = cfg.eval.cadence == EvalCadence::Batch ||
                            (cfg.eval.cadence == EvalCadence::Epoch && b + 1 == n_batches);
      if (evaluate) {
        Rng eval_rng(cfg.seed, "eval", step);
        evaluate_metrics(model, cfg.eval.scope == EvalScope::TrainSet ? data : batch, cfg.epsilon, cfg.eval,
                         eval_rng, rec);
      }
      log.records.push_back(rec);
    }
  }
  return {std::move(model), std::move(log)};
}

/// Per-epoch mean of mean_delta_linf, in log order. Every epoch from 0 to
/// the last one present must have at least one record.
inline std::vector<double> eps_schedule_from_log(const RunLog& log) {
  std::map<std::uint64_t, std::pair<double, std::size_t>> acc;
  for (const BatchRecord& r : log.records) {
    auto& [sum, count] = acc[r.epoch];
    sum += r.mean_delta_linf;
    ++count;
  }
  std::vector<double> out;
  for (const auto& [epoch, sc] : acc) {
    if (epoch != out.size())
      throw ConfigError("epsilon schedule: source log has no records for epoch " + std::to_string(out.size()));
    out.push_back(sc.first / static_cast<double>(sc.second));
  }
  if (out.empty()) throw ConfigError("epsilon schedule: source log has no records");
  return out;
}

struct CollapseEvent {
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
  std::size_t record_index = 0;
};

/// First record at which the trailing window (over records that carry both
/// pgd_acc and fgsm_acc) has mean pgd_acc < pgd_floor while mean fgsm_acc >
/// fgsm_ceiling. Windows shorter than `window` at the start are not tested.
/// Reports only; training is never stopped.
inline std::optional<CollapseEvent> collapse_monitor(const std::vector<BatchRecord>& records, std::size_t window,
                                                     double pgd_floor, double fgsm_ceiling) {
  if (window < 1) throw ConfigError("collapse monitor: window must be >= 1");
  std::vector<std::size_t> evaluated;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].pgd_acc || !records[i].fgsm_acc) continue;
    evaluated.push_back(i);
    if (evaluated.size() < window) continue;
    double pgd_sum = 0.0, fgsm_sum = 0.0;
    for (std::size_t k = evaluated.size() - window; k < evaluated.size(); ++k) {
      pgd_sum += *records[evaluated[k]].pgd_acc;
      fgsm_sum += *records[evaluated[k]].fgsm_acc;
    }
    const double w = static_cast<double>(window);
    if (pgd_sum / w < pgd_floor && fgsm_sum / w > fgsm_ceiling) return CollapseEvent{records[i].epoch, records[i].batch, i};
  }
  return std::nullopt;
}

}  // namespace dlab
