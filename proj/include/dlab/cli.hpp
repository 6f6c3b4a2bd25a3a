#pragma once

// Command-line front end: `dlab <subcommand> --config FILE ...`.
// See README.md for the config key tree.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dlab/dlab.hpp"

namespace dlab::cli {

inline constexpr int kConfigVersion = 1;

enum ExitCode { kOk = 0, kFailure = 1, kBadConfig = 2, kIoError = 3 };

using nlohmann::json;

namespace detail {

using dlab::detail::get_to;
using dlab::detail::reject_unknown;

inline json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string first;
  std::getline(in, first);
  RunLog header;
  if (parse_header(first, header)) return header.config;  // a run log reproduces its own config
  in.clear();
  in.seekg(0);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
  return j;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

inline void make_dirs(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

// ---- model ------------------------------------------------------------------

inline ModelSpec model_spec_from_json(const json& j) {
  reject_unknown(j, {"input_shape", "n_classes", "layers"}, "model");
  ModelSpec spec;
  get_to(j, "input_shape", spec.input_shape, "model");
  get_to(j, "n_classes", spec.n_classes, "model");
  if (!j.contains("layers") || !j["layers"].is_array()) throw ConfigError("model.layers: expected an array");
  for (std::size_t i = 0; i < j["layers"].size(); ++i) {
    const json& l = j["layers"][i];
    const std::string w = "model.layers[" + std::to_string(i) + "]";
    std::string type;
    if (!l.is_object() || !l.contains("type")) throw ConfigError(w + ": missing type");
    get_to(l, "type", type, w);
    if (type == "dense") {
      reject_unknown(l, {"type", "in", "out"}, w);
      Dense d;
      get_to(l, "in", d.in, w);
      get_to(l, "out", d.out, w);
      spec.layers.emplace_back(d);
    } else if (type == "conv2d") {
      reject_unknown(l, {"type", "in_channels", "out_channels", "kernel", "stride", "pad"}, w);
      Conv2d c;
      get_to(l, "in_channels", c.in_channels, w);
      get_to(l, "out_channels", c.out_channels, w);
      get_to(l, "kernel", c.kernel, w);
      get_to(l, "stride", c.stride, w);
      get_to(l, "pad", c.pad, w);
      spec.layers.emplace_back(c);
    } else if (type == "relu") {
      reject_unknown(l, {"type"}, w);
      spec.layers.emplace_back(ReLU{});
    } else if (type == "flatten") {
      reject_unknown(l, {"type"}, w);
      spec.layers.emplace_back(Flatten{});
    } else {
      throw ConfigError(w + ": unknown layer type '" + type + "'");
    }
  }
  activation_shapes(spec);
  return spec;
}

inline json model_spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const Layer& layer : spec.layers) {
    if (const auto* d = std::get_if<Dense>(&layer))
      layers.push_back({{"type", "dense"}, {"in", d->in}, {"out", d->out}});
    else if (const auto* c = std::get_if<Conv2d>(&layer))
      layers.push_back({{"type", "conv2d"},
                        {"in_channels", c->in_channels},
                        {"out_channels", c->out_channels},
                        {"kernel", c->kernel},
                        {"stride", c->stride},
                        {"pad", c->pad}});
    else
      layers.push_back({{"type", std::holds_alternative<ReLU>(layer) ? "relu" : "flatten"}});
  }
  return {{"input_shape", spec.input_shape}, {"n_classes", spec.n_classes}, {"layers", layers}};
}

// ---- data -------------------------------------------------------------------

inline LabeledBatch load_data(const json& j, std::uint64_t seed) {
  if (!j.is_object() || !j.contains("source")) throw ConfigError("data: missing source");
  std::string source;
  get_to(j, "source", source, "data");
  std::size_t limit = 0;
  LabeledBatch data;
  if (source == "gaussian") {
    reject_unknown(j, {"source", "n_classes", "shape", "sigma", "n_per_class", "means", "mean_spread", "seed", "limit"},
                   "data");
    SyntheticSpec s;
    s.seed = seed;
    get_to(j, "n_classes", s.n_classes, "data");
    get_to(j, "shape", s.dims, "data");
    get_to(j, "sigma", s.sigma, "data");
    get_to(j, "n_per_class", s.n_per_class, "data");
    get_to(j, "seed", s.seed, "data");
    get_to(j, "limit", limit, "data");
    if (j.contains("means")) {
      get_to(j, "means", s.means, "data");
    } else {
      double spread = 1.0;
      get_to(j, "mean_spread", spread, "data");
      Rng rng(s.seed, "means");
      s.means.assign(s.n_classes, std::vector<double>(shape_size(s.dims)));
      for (auto& m : s.means)
        for (double& v : m) v = rng.uniform(0.0, spread);
    }
    data = gen_gaussian_blobs(s);
  } else if (source == "cifar10") {
    reject_unknown(j, {"source", "paths", "limit"}, "data");
    std::vector<std::string> paths;
    get_to(j, "paths", paths, "data");
    get_to(j, "limit", limit, "data");
    data = load_cifar10_bin(paths);
  } else if (source == "idx") {
    reject_unknown(j, {"source", "images", "labels", "n_classes", "limit"}, "data");
    std::string images, labels;
    std::size_t n_classes = 10;
    get_to(j, "images", images, "data");
    get_to(j, "labels", labels, "data");
    get_to(j, "n_classes", n_classes, "data");
    get_to(j, "limit", limit, "data");
    data = load_idx(images, labels, n_classes);
  } else {
    throw ConfigError("data.source: unknown value '" + source + "'");
  }
  if (limit > 0 && limit < data.size()) {
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    data = gather(data, idx);
  }
  return data;
}

/// Views each example with the model's input shape when the element counts agree.
inline LabeledBatch fit_to_model(LabeledBatch data, const ModelSpec& spec) {
  if (data.images.row_shape() == spec.input_shape) return data;
  if (data.images.row_size() != shape_size(spec.input_shape))
    throw ConfigError("data examples " + shape_string(data.images.row_shape()) + " do not fit model input " +
                      shape_string(spec.input_shape));
  Shape s{data.size()};
  s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
  data.images = std::move(data.images).reshaped(s);
  return data;
}

// ---- resolved config ----------------------------------------------------------

struct Resolved {
  json config;  // normalized; embedded in every log header
  std::uint64_t seed = 0;
  ModelSpec model;
  bool has_model = false;
};

inline Resolved resolve(const json& j) {
  reject_unknown(j, {"version", "seed", "data", "model", "train", "attack", "surface", "sweep", "output"}, "config");
  int version = kConfigVersion;
  get_to(j, "version", version, "config");
  if (version != kConfigVersion) throw ConfigError("config: unsupported version " + std::to_string(version));
  Resolved r;
  r.config = j;
  r.config["version"] = kConfigVersion;
  get_to(j, "seed", r.seed, "config");
  r.config["seed"] = r.seed;
  if (j.contains("model")) {
    r.model = model_spec_from_json(j["model"]);
    r.config["model"] = model_spec_to_json(r.model);
    r.has_model = true;
  }
  if (j.contains("train")) {
    TrainConfig t = train_config_from_json(j["train"]);
    if (j["train"].contains("eps_schedule_log")) {
      std::string path;
      get_to(j["train"], "eps_schedule_log", path, "train");
      t.eps_schedule = eps_schedule_from_log(read_run_log(path));
    }
    t.seed = r.seed;
    r.config["train"] = to_json(t);
  }
  return r;
}

inline std::string output_dir(const Resolved& r, const std::string& flag) {
  if (!flag.empty()) return flag;
  std::string dir = "dlab-out";
  if (r.config.contains("output")) {
    reject_unknown(r.config["output"], {"dir"}, "output");
    get_to(r.config["output"], "dir", dir, "output");
  }
  return dir;
}

inline const json& section(const Resolved& r, const char* name) {
  if (!r.config.contains(name)) throw ConfigError(std::string("config: missing section '") + name + "'");
  return r.config[name];
}

inline Network require_model(const Resolved& r, const std::string& model_path) {
  if (!model_path.empty()) {
    Network net = load_model(model_path);
    if (r.has_model && net.spec() != r.model) throw ConfigError("model file does not match config.model");
    return net;
  }
  if (!r.has_model) throw ConfigError("config: missing section 'model'");
  return Network::initialized(r.model, stream_seed(r.seed, "model"));
}

// ---- subcommands --------------------------------------------------------------

inline void cmd_train(const Resolved& r, const std::string& out_flag, std::ostream& out) {
  const TrainConfig cfg = train_config_from_json(section(r, "train"));
  if (!r.has_model) throw ConfigError("config: missing section 'model'");
  const LabeledBatch data = fit_to_model(load_data(section(r, "data"), r.seed), r.model);
  const std::string dir = output_dir(r, out_flag);
  make_dirs(dir);
  TrainResult result = train(cfg, data, Network::initialized(r.model, stream_seed(r.seed, "model")));
  result.log.config = r.config;
  write_run_log(result.log, dir + "/run.jsonl");
  save_model(result.model, dir + "/model.dlab");
  out << "train: " << result.log.records.size() << " records -> " << dir << "/run.jsonl\n";
}

struct AttackSection {
  double epsilon = 8.0 / 255.0;
  std::size_t pgd_steps = 50;
  std::size_t pgd_restarts = 10;
  double pgd_alpha = -1.0;  // default epsilon / 4
  bool restrict_to_correct = false;
  std::size_t distortion_samples = 100;
};

inline AttackSection attack_section(const Resolved& r) {
  AttackSection a;
  if (!r.config.contains("attack")) return a;
  const json& j = r.config["attack"];
  reject_unknown(j, {"epsilon", "pgd_steps", "pgd_restarts", "pgd_alpha", "restrict_to_correct", "distortion_samples"},
                 "attack");
  get_to(j, "epsilon", a.epsilon, "attack");
  get_to(j, "pgd_steps", a.pgd_steps, "attack");
  get_to(j, "pgd_restarts", a.pgd_restarts, "attack");
  get_to(j, "pgd_alpha", a.pgd_alpha, "attack");
  get_to(j, "restrict_to_correct", a.restrict_to_correct, "attack");
  get_to(j, "distortion_samples", a.distortion_samples, "attack");
  if (a.pgd_alpha < 0.0) a.pgd_alpha = a.epsilon / 4.0;
  return a;
}

inline void write_report(const Resolved& r, const BatchRecord& rec, const std::string& path) {
  if (path.empty()) return;
  RunLog log;
  log.config = r.config;
  log.seed = r.seed;
  log.records.push_back(rec);
  write_run_log(log, path);
}

inline void cmd_eval(const Resolved& r, const std::string& model_path, const std::string& report, std::ostream& out) {
  const Network net = require_model(r, model_path);
  const LabeledBatch data = fit_to_model(load_data(section(r, "data"), r.seed), net.spec());
  data.validate(net.n_classes());
  const AttackSection a = attack_section(r);
  Rng rng(r.seed, "eval");

  const auto ratio = [](const RobustAccuracy& ra) { return ra.ratio.value_or(0.0); };
  RobustAccuracy clean;
  {
    const auto pred = predictions(net.forward(data.images));
    for (std::size_t i = 0; i < data.size(); ++i) clean.correct += pred[i] == data.labels[i];
    clean.total = data.size();
    if (clean.total) clean.ratio = static_cast<double>(clean.correct) / static_cast<double>(clean.total);
  }
  const RobustAccuracy f = robust_accuracy(net, data, {AttackKind::Fgsm, a.epsilon}, a.restrict_to_correct, rng);
  const RobustAccuracy p = robust_accuracy(
      net, data, {AttackKind::Pgd, a.epsilon, a.pgd_alpha, a.pgd_steps, a.pgd_restarts}, a.restrict_to_correct, rng);

  const std::string pgd_name = "pgd" + std::to_string(a.pgd_steps) + "x" + std::to_string(a.pgd_restarts);
  out << std::left << std::setw(14) << "attack" << std::setw(12) << "accuracy" << "n\n";
  out << std::fixed << std::setprecision(6);
  out << std::setw(14) << "clean" << std::setw(12) << ratio(clean) << clean.total << "\n";
  out << std::setw(14) << "fgsm" << std::setw(12) << ratio(f) << f.total << "\n";
  out << std::setw(14) << pgd_name << std::setw(12) << ratio(p) << p.total << "\n";

  BatchRecord rec;
  rec.epsilon_used = a.epsilon;
  rec.clean_acc = clean.ratio;
  rec.fgsm_acc = f.ratio;
  rec.pgd_acc = p.ratio;
  write_report(r, rec, report);
}

inline void cmd_distortion(const Resolved& r, const std::string& model_path, const std::string& report,
                           std::ostream& out) {
  const Network net = require_model(r, model_path);
  const LabeledBatch data = fit_to_model(load_data(section(r, "data"), r.seed), net.spec());
  data.validate(net.n_classes());
  const AttackSection a = attack_section(r);
  const DistortionEstimate d = estimate_distortion(net, data, a.epsilon, a.distortion_samples);
  out << "distortion: d=" << (d.d ? format_double(*d.d) : std::string("undefined")) << " s_n=" << d.n_s_n
      << " s_d_and_s_n=" << d.n_s_d_and_s_n << " samples=" << d.samples_per_example << "\n";
  BatchRecord rec;
  rec.epsilon_used = a.epsilon;
  rec.distortion_d = d.d;
  rec.distortion_n_s_n = d.n_s_n;
  write_report(r, rec, report);
}

inline void cmd_gamma(const Resolved& r, const std::string& model_path, const std::string& report, std::ostream& out) {
  const Network net = require_model(r, model_path);
  const LabeledBatch data = fit_to_model(load_data(section(r, "data"), r.seed), net.spec());
  data.validate(net.n_classes());
  const AttackSection a = attack_section(r);
  const GammaStats g = gamma(net, data, a.epsilon);
  out << "gamma: mean=" << format_double(g.mean_gamma) << " fraction_negative=" << format_double(g.fraction_negative)
      << " n=" << g.per_example_gamma.size() << "\n";
  BatchRecord rec;
  rec.epsilon_used = a.epsilon;
  rec.mean_gamma = g.mean_gamma;
  rec.gamma_fraction_negative = g.fraction_negative;
  write_report(r, rec, report);
}

inline void cmd_surface(const Resolved& r, const std::string& model_path, const std::string& csv, std::ostream& out) {
  const Network net = require_model(r, model_path);
  const LabeledBatch data = fit_to_model(load_data(section(r, "data"), r.seed), net.spec());
  data.validate(net.n_classes());
  SurfaceOptions opt;
  std::size_t index = 0;
  std::string source = "fgsm";
  std::vector<double> a_range{0.0, 1.0}, b_range{0.0, 1.0};
  if (r.config.contains("surface")) {
    const json& j = r.config["surface"];
    reject_unknown(j, {"index", "source", "epsilon", "alpha", "a_range", "b_range", "resolution"}, "surface");
    get_to(j, "index", index, "surface");
    get_to(j, "source", source, "surface");
    get_to(j, "epsilon", opt.epsilon, "surface");
    opt.alpha = 1.25 * opt.epsilon;
    get_to(j, "alpha", opt.alpha, "surface");
    get_to(j, "a_range", a_range, "surface");
    get_to(j, "b_range", b_range, "surface");
    get_to(j, "resolution", opt.resolution, "surface");
  }
  if (a_range.size() != 2 || b_range.size() != 2) throw ConfigError("surface: ranges must be [lo, hi]");
  opt.a_lo = a_range[0];
  opt.a_hi = a_range[1];
  opt.b_lo = b_range[0];
  opt.b_hi = b_range[1];
  const DirectionSource src = source == "fgsm"   ? DirectionSource::Fgsm
                              : source == "fast" ? DirectionSource::Fast
                                                 : throw ConfigError("surface.source: expected fgsm or fast");
  Rng rng(r.seed, "surface");
  const SurfaceGrid grid = sample_surface(net, data, index, src, rng, opt);
  const std::string path = csv.empty() ? output_dir(r, "") + "/surface.csv" : csv;
  if (csv.empty()) make_dirs(output_dir(r, ""));
  export_grid(grid, path);
  out << "surface: " << grid.cells.size() << " cells -> " << path << "\n";
}

inline void cmd_eps_schedule(const std::string& log_path, const std::string& out_path, std::ostream& out) {
  const auto schedule = eps_schedule_from_log(read_run_log(log_path));
  nlohmann::ordered_json j;
  j["eps_schedule"] = schedule;
  if (out_path.empty())
    out << j.dump() << "\n";
  else {
    write_text(out_path, j.dump() + "\n");
    out << "eps-schedule: " << schedule.size() << " epochs -> " << out_path << "\n";
  }
}

inline void cmd_sweep(const Resolved& r, const std::string& out_flag, std::ostream& out) {
  const json& s = section(r, "sweep");
  reject_unknown(s, {"checkpoints", "epsilons"}, "sweep");
  std::vector<std::size_t> cs;
  std::vector<double> epsilons;
  get_to(s, "checkpoints", cs, "sweep");
  get_to(s, "epsilons", epsilons, "sweep");
  if (cs.empty()) throw ConfigError("sweep: checkpoints must be non-empty");
  TrainConfig base = train_config_from_json(section(r, "train"));
  if (epsilons.empty()) epsilons.push_back(base.epsilon);
  const std::string dir = output_dir(r, out_flag);
  make_dirs(dir);
  for (std::size_t c : cs) {
    for (std::size_t e = 0; e < epsilons.size(); ++e) {
      json child = r.config;
      child.erase("sweep");
      child["train"]["method"] = "proposed";
      child["train"]["checkpoints"] = c;
      child["train"]["epsilon"] = epsilons[e];
      const std::string child_dir = dir + "/c" + std::to_string(c) + "_eps" + std::to_string(e);
      child.erase("output");  // keeps run logs independent of where they are written
      make_dirs(child_dir);
      write_text(child_dir + "/config.json", child.dump(2) + "\n");
      cmd_train(resolve(child), child_dir, out);
    }
  }
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Input:
      return kBadConfig;
    case ErrorKind::Format:
    case ErrorKind::Io:
      return kIoError;
  }
  return kFailure;
}

inline const char* kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Input: return "input";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
  }
  return "internal";
}

inline void report_error(std::ostream& err, int code, const char* kind, std::string message) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  err << "error code=" << code << " kind=" << kind << " message=" << json(message).dump() << "\n";
}

}  // namespace detail

/// Entry point. args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"dlab: adversarial-training laboratory"};
  app.require_subcommand(1);
  std::string config, model, out_path, log_path;

  const auto with_config = [&](CLI::App* sub) { sub->add_option("--config", config, "JSON config file or run log")->required(); };
  auto* train = app.add_subcommand("train", "train a model; writes run.jsonl and model.dlab");
  with_config(train);
  train->add_option("--out", out_path, "output directory (overrides output.dir)");
  auto* eval = app.add_subcommand("eval", "robust accuracy table (clean / FGSM / PGD)");
  auto* distortion = app.add_subcommand("distortion", "decision-boundary distortion estimate");
  auto* gamma_cmd = app.add_subcommand("gamma", "loss nonlinearity statistics");
  for (auto* sub : {eval, distortion, gamma_cmd}) {
    with_config(sub);
    sub->add_option("--model", model, "model container (.dlab)");
    sub->add_option("--out", out_path, "write a one-record run log here");
  }
  auto* surface = app.add_subcommand("surface", "loss-surface grid as CSV");
  with_config(surface);
  surface->add_option("--model", model, "model container (.dlab)");
  surface->add_option("--out", out_path, "CSV path");
  auto* eps = app.add_subcommand("eps-schedule", "per-epoch epsilon from a run log");
  eps->add_option("--log", log_path, "source run log")->required();
  eps->add_option("--out", out_path, "JSON output path (stdout if omitted)");
  auto* sweep = app.add_subcommand("sweep", "train over the checkpoint x epsilon grid");
  with_config(sweep);
  sweep->add_option("--out", out_path, "parent output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    detail::report_error(err, kBadConfig, "usage", e.what());
    return kBadConfig;
  }

  try {
    if (eps->parsed()) {
      detail::cmd_eps_schedule(log_path, out_path, out);
      return kOk;
    }
    const detail::Resolved r = detail::resolve(detail::read_json_file(config));
    if (train->parsed()) detail::cmd_train(r, out_path, out);
    else if (eval->parsed()) detail::cmd_eval(r, model, out_path, out);
    else if (distortion->parsed()) detail::cmd_distortion(r, model, out_path, out);
    else if (gamma_cmd->parsed()) detail::cmd_gamma(r, model, out_path, out);
    else if (surface->parsed()) detail::cmd_surface(r, model, out_path, out);
    else if (sweep->parsed()) detail::cmd_sweep(r, out_path, out);
  } catch (const Error& e) {
    const int code = detail::exit_code(e.kind());
    detail::report_error(err, code, detail::kind_name(e.kind()), e.what());
    return code;
  } catch (const nlohmann::json::exception& e) {
    detail::report_error(err, kBadConfig, "config", e.what());
    return kBadConfig;
  } catch (const std::exception& e) {
    detail::report_error(err, kFailure, "internal", e.what());
    return kFailure;
  }
  return kOk;
}

}  // namespace dlab::cli
