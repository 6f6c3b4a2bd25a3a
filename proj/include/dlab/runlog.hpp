#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dlab/array.hpp"

namespace dlab {

/// One training batch's metric row. Optional fields are null when the
/// metric was not evaluated for this batch (or, for distortion_d, when it
/// is undefined because no example qualified).
struct BatchRecord {
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;  // index within the epoch
  std::uint64_t step = 0;   // global batch counter
  double lr_used = 0.0;
  double epsilon_used = 0.0;
  double train_loss = 0.0;
  double mean_delta_linf = 0.0;  // E[||delta||_inf] of the training perturbations
  std::optional<double> frac_k_zero;
  std::optional<double> mean_k;
  std::uint64_t forward_passes = 0;  // training step only, metrics excluded
  std::uint64_t backward_passes = 0;
  std::optional<double> clean_acc;
  std::optional<double> fgsm_acc;
  std::optional<double> pgd_acc;
  std::optional<double> distortion_d;
  std::optional<std::uint64_t> distortion_n_s_n;
  std::optional<double> mean_abs_pgd_perturbation;
  std::optional<double> input_grad_l2;
  std::optional<double> input_grad_l2_squared;
  std::optional<double> mean_gamma;
  std::optional<double> gamma_fraction_negative;

  friend bool operator==(const BatchRecord&, const BatchRecord&) = default;
};

/// Header (config + seed) followed by one record per training batch.
struct RunLog {
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<BatchRecord> records;

  friend bool operator==(const RunLog&, const RunLog&) = default;
};

inline constexpr const char* kRunLogSchema = "dlab-runlog";
inline constexpr int kRunLogVersion = 1;

namespace detail {

template <class T>
nlohmann::ordered_json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

// Field list in file order; visiting the same table for writing and
// reading keeps the two in lockstep.
template <class Rec, class F>
void visit_fields(Rec& r, F&& f) {
  f("epoch", r.epoch);
  f("batch", r.batch);
  f("step", r.step);
  f("lr_used", r.lr_used);
  f("epsilon_used", r.epsilon_used);
  f("train_loss", r.train_loss);
  f("mean_delta_linf", r.mean_delta_linf);
  f("frac_k_zero", r.frac_k_zero);
  f("mean_k", r.mean_k);
  f("forward_passes", r.forward_passes);
  f("backward_passes", r.backward_passes);
  f("clean_acc", r.clean_acc);
  f("fgsm_acc", r.fgsm_acc);
  f("pgd_acc", r.pgd_acc);
  f("distortion_d", r.distortion_d);
  f("distortion_n_s_n", r.distortion_n_s_n);
  f("mean_abs_pgd_perturbation", r.mean_abs_pgd_perturbation);
  f("input_grad_l2", r.input_grad_l2);
  f("input_grad_l2_squared", r.input_grad_l2_squared);
  f("mean_gamma", r.mean_gamma);
  f("gamma_fraction_negative", r.gamma_fraction_negative);
}

template <class T>
struct is_optional : std::false_type {};
template <class T>
struct is_optional<std::optional<T>> : std::true_type {};

template <class T>
void read_field(const nlohmann::json& j, T& out) {
  if constexpr (is_optional<T>::value) {
    if (j.is_null()) {
      out.reset();
    } else {
      typename T::value_type v;
      read_field(j, v);
      out = v;
    }
  } else if constexpr (std::is_same_v<T, double>) {
    if (!j.is_number()) throw std::invalid_argument("expected a number");
    out = j.get<double>();
  } else {
    if (!j.is_number_unsigned()) throw std::invalid_argument("expected a non-negative integer");
    out = j.get<T>();
  }
}

}  // namespace detail

inline std::string record_line(const BatchRecord& r) {
  nlohmann::ordered_json j;
  detail::visit_fields(r, [&](const char* name, const auto& v) {
    if constexpr (detail::is_optional<std::decay_t<decltype(v)>>::value)
      j[name] = detail::opt_json(v);
    else
      j[name] = v;
  });
  return j.dump();
}

inline std::string header_line(const RunLog& log) {
  nlohmann::ordered_json h;
  h["schema"] = kRunLogSchema;
  h["version"] = kRunLogVersion;
  h["seed"] = log.seed;
  h["config"] = log.config;
  return h.dump();
}

inline void write_run_log(const RunLog& log, std::ostream& out) {
  out << header_line(log) << '\n';
  for (const BatchRecord& r : log.records) out << record_line(r) << '\n';
}

inline void write_run_log(const RunLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_run_log(log, out);
  if (!out) throw IoError("write failed for " + path);
}

/// Parses a header line; returns false when the line is not a run-log header.
inline bool parse_header(const std::string& line, RunLog& log) {
  nlohmann::json h = nlohmann::json::parse(line, nullptr, false);
  if (h.is_discarded() || !h.is_object() || !h.contains("schema") || h["schema"] != kRunLogSchema) return false;
  if (!h.contains("version") || h["version"] != kRunLogVersion)
    throw FormatError("run log: schema version mismatch (expected " + std::to_string(kRunLogVersion) + ")");
  for (const auto& [key, _] : h.items())
    if (key != "schema" && key != "version" && key != "seed" && key != "config")
      throw FormatError("run log: line 1: unknown header field '" + key + "'");
  if (!h.contains("seed") || !h["seed"].is_number_unsigned() || !h.contains("config"))
    throw FormatError("run log: line 1: header needs seed and config");
  log.seed = h["seed"].get<std::uint64_t>();
  log.config = h["config"];
  return true;
}

inline BatchRecord parse_record(const std::string& line, std::size_t lineno) {
  const auto where = [&] { return "run log: line " + std::to_string(lineno) + ": "; };
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError(where() + "not a JSON object");
  BatchRecord r;
  std::size_t seen = 0;
  detail::visit_fields(r, [&](const char* name, auto& v) {
    const auto it = j.find(name);
    if (it == j.end()) throw FormatError(where() + "missing field '" + name + "'");
    try {
      detail::read_field(*it, v);
    } catch (const std::exception& e) {
      throw FormatError(where() + "field '" + name + "': " + e.what());
    }
    ++seen;
  });
  if (seen != j.size()) {
    BatchRecord probe;
    for (const auto& [key, _] : j.items()) {
      bool known = false;
      detail::visit_fields(probe, [&](const char* name, auto&) { known = known || key == name; });
      if (!known) throw FormatError(where() + "unknown field '" + key + "'");
    }
  }
  return r;
}

inline RunLog read_run_log(std::istream& in) {
  RunLog log;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("run log: empty file");
  if (!parse_header(line, log)) throw FormatError("run log: line 1: not a run-log header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    log.records.push_back(parse_record(line, lineno));
  }
  return log;
}

inline RunLog read_run_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_run_log(in);
}

}  // namespace dlab
