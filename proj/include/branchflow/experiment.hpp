#pragma once

// Experiment orchestration behind the command line: config parsing, the eight
// modes, and every artifact they read or write.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "branchflow/deqgan.hpp"
#include "branchflow/dynamics.hpp"
#include "branchflow/error.hpp"
#include "branchflow/model.hpp"
#include "branchflow/potential.hpp"
#include "branchflow/svg.hpp"
#include "branchflow/training.hpp"

namespace branchflow {

namespace fs = std::filesystem;
using Json = nlohmann::json;

enum class ExitCode : int { ok = 0, usage = 2, divergence = 3 };

enum class Mode { train_base, transfer_ic, transfer_potential, classical, oracle, eval, plot, bench };

inline Mode mode_from_string(const std::string& s) {
  if (s == "train-base") return Mode::train_base;
  if (s == "transfer-ic") return Mode::transfer_ic;
  if (s == "transfer-potential") return Mode::transfer_potential;
  if (s == "classical") return Mode::classical;
  if (s == "oracle") return Mode::oracle;
  if (s == "eval") return Mode::eval;
  if (s == "plot") return Mode::plot;
  if (s == "bench") return Mode::bench;
  throw ConfigError("unknown mode: " + s);
}

// --- file helpers -------------------------------------------------------------

inline Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline void write_json_file(const fs::path& path, const Json& j, int indent = 2) {
  write_text_file(path, j.dump(indent) + "\n");
}

inline std::string indexed(const std::string& stem, std::size_t i, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03zu", i);
  return stem + buf + ext;
}

// Sorted regular files in `dir` with the given prefix and extension.
inline std::vector<fs::path> list_files(const fs::path& dir, const std::string& prefix, const std::string& ext) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with(prefix) && e.path().extension() == ext) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// --- experiment spec ----------------------------------------------------------

struct PotentialSource {
  std::optional<std::string> file;
  std::uint64_t seed = 0;
  PotentialParams params{};
};

struct PlotSpec {
  std::optional<std::string> potential;
  std::optional<std::string> base_trajectories;
  std::optional<std::string> transfer_trajectories;
  std::vector<std::pair<std::string, std::string>> reports;  // (label, path)
  Rect window{};
  int samples = 120;
};

struct BenchSpec {
  double min_seconds = 30.0;
  int min_epochs = 200;
  int chunk = 50;
};

struct ExperimentSpec {
  PotentialSource potential;
  ModelConfig model;
  TrainingConfig training;           // base and classical runs
  TrainingConfig transfer_training;  // one transfer head
  DeqganConfig deqgan;
  bool gan = false;
  std::vector<InitialCondition> base_ics = evenly_spaced_ics(11, 0.0, 1.0);
  std::vector<InitialCondition> transfer_ics = evenly_spaced_ics(100, 0.0, 1.0);
  std::vector<InitialCondition> classical_ics{{0.55}};
  std::optional<std::vector<InitialCondition>> oracle_ics;  // defaults to base_ics
  HeadInit transfer_init = HeadInit::copy_nearest();
  int transfer_workers = 1;
  std::optional<std::uint64_t> transfer_potential_seed;  // defaults to potential seed + 1
  double oracle_dt = 1e-3;
  int eval_points = 200;
  std::optional<double> eval_t_end;  // defaults to the checkpoint's training t_end
  PlotSpec plot;
  BenchSpec bench;
  std::string out_dir = "out";
  std::optional<std::string> potential_path;   // --potential
  std::optional<std::string> checkpoint_path;  // --checkpoint

  void validate(Mode mode) const {
    model.validate();
    training.validate();
    transfer_training.validate();
    deqgan.validate();
    if (!(oracle_dt > 0.0)) throw ConfigError("oracle.dt must be > 0");
    if (eval_points < 2) throw ConfigError("eval.points must be >= 2");
    if (eval_t_end && !(*eval_t_end > 0.0)) throw ConfigError("eval.t_end must be > 0");
    if (transfer_workers < 1) throw ConfigError("transfer.workers must be >= 1");
    if (bench.min_seconds < 0.0 || bench.min_epochs < 1 || bench.chunk < 1) throw ConfigError("bench: invalid budget");
    if (plot.samples < 2) throw ConfigError("plot.samples must be >= 2");
    if (plot.window.degenerate()) throw ConfigError("plot.window is degenerate");
    switch (mode) {
      case Mode::train_base:
        if (base_ics.empty()) throw ConfigError("base_ics must be non-empty");
        break;
      case Mode::transfer_ic:
      case Mode::transfer_potential:
        if (transfer_ics.empty()) throw ConfigError("transfer_ics must be non-empty");
        break;
      case Mode::classical:
      case Mode::bench:
        if (classical_ics.empty()) throw ConfigError("classical_ics must be non-empty");
        break;
      case Mode::oracle:
        if (oracle_ics ? oracle_ics->empty() : base_ics.empty()) throw ConfigError("oracle ICs must be non-empty");
        break;
      default:
        break;
    }
    if (potential.file && !fs::exists(*potential.file))
      throw ConfigError("potential file does not exist: " + *potential.file);
  }

  fs::path out() const { return fs::path(out_dir); }
  fs::path default_potential() const { return potential_path ? fs::path(*potential_path) : out() / "potential.json"; }
  fs::path default_checkpoint() const {
    return checkpoint_path ? fs::path(*checkpoint_path) : out() / "checkpoint.json";
  }
};

namespace detail {

inline std::vector<InitialCondition> ics_from_json(const Json& j, const char* what) {
  if (j.is_array()) {
    std::vector<InitialCondition> ics;
    for (const auto& v : j) ics.push_back({v.get<double>()});
    return ics;
  }
  if (j.is_object()) {
    const auto range = j.value("range", std::vector<double>{0.0, 1.0});
    if (range.size() != 2) throw ConfigError(std::string(what) + ".range needs [lo, hi]");
    return evenly_spaced_ics(j.at("count").get<int>(), range[0], range[1]);
  }
  throw ConfigError(std::string(what) + " must be a list of y0 or {count, range}");
}

inline Rect rect_from_json(const Json& j, const char* what) {
  if (!j.is_array() || j.size() != 4) throw ConfigError(std::string(what) + " needs [x_min, y_min, x_max, y_max]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace detail

// Missing keys keep their defaults; the defaults reproduce the 11-head, K=10 setup.
inline ExperimentSpec spec_from_json(const Json& j) {
  ExperimentSpec s;
  try {
    if (j.contains("potential")) {
      const auto& p = j.at("potential");
      if (p.contains("file") && !p.at("file").is_null()) s.potential.file = p.at("file").get<std::string>();
      s.potential.seed = p.value("seed", s.potential.seed);
      s.potential.params.count = p.value("K", s.potential.params.count);
      s.potential.params.amplitude = p.value("A", s.potential.params.amplitude);
      s.potential.params.sigma = p.value("sigma", s.potential.params.sigma);
      if (p.contains("sampling_rect")) s.potential.params.sampling_rect = detail::rect_from_json(p.at("sampling_rect"), "potential.sampling_rect");
      s.potential.params.conventional_exponent = p.value("conventional_exponent", false);
    }
    if (j.contains("model")) s.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("training")) s.training = TrainingConfig::from_json(j.at("training"));
    s.transfer_training = s.training;
    if (j.contains("transfer")) {
      const auto& t = j.at("transfer");
      if (t.contains("training")) s.transfer_training = TrainingConfig::from_json(t.at("training"), s.training);
      const auto init = t.value("init", std::string("copy_nearest"));
      if (init == "copy_nearest") s.transfer_init = HeadInit::copy_nearest(t.value("init_seed", std::uint64_t{0}));
      else if (init == "random") s.transfer_init = HeadInit::random(t.value("init_seed", std::uint64_t{0}));
      else throw ConfigError("transfer.init must be copy_nearest or random");
      s.transfer_workers = t.value("workers", s.transfer_workers);
      if (t.contains("potential_seed")) s.transfer_potential_seed = t.at("potential_seed").get<std::uint64_t>();
    }
    if (j.contains("deqgan")) s.deqgan = DeqganConfig::from_json(j.at("deqgan"));
    s.gan = j.value("gan", false);
    if (j.contains("base_ics")) s.base_ics = detail::ics_from_json(j.at("base_ics"), "base_ics");
    if (j.contains("transfer_ics")) s.transfer_ics = detail::ics_from_json(j.at("transfer_ics"), "transfer_ics");
    if (j.contains("classical_ics")) s.classical_ics = detail::ics_from_json(j.at("classical_ics"), "classical_ics");
    if (j.contains("oracle")) {
      const auto& o = j.at("oracle");
      s.oracle_dt = o.value("dt", s.oracle_dt);
      if (o.contains("ics")) s.oracle_ics = detail::ics_from_json(o.at("ics"), "oracle.ics");
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      s.eval_points = e.value("points", s.eval_points);
      if (e.contains("t_end") && !e.at("t_end").is_null()) s.eval_t_end = e.at("t_end").get<double>();
    }
    if (j.contains("plot")) {
      const auto& p = j.at("plot");
      if (p.contains("potential")) s.plot.potential = p.at("potential").get<std::string>();
      if (p.contains("base_trajectories")) s.plot.base_trajectories = p.at("base_trajectories").get<std::string>();
      if (p.contains("transfer_trajectories"))
        s.plot.transfer_trajectories = p.at("transfer_trajectories").get<std::string>();
      if (p.contains("reports"))
        for (const auto& r : p.at("reports")) s.plot.reports.emplace_back(r.at("label").get<std::string>(), r.at("path").get<std::string>());
      if (p.contains("window")) s.plot.window = detail::rect_from_json(p.at("window"), "plot.window");
      s.plot.samples = p.value("samples", s.plot.samples);
    }
    if (j.contains("bench")) {
      const auto& b = j.at("bench");
      s.bench.min_seconds = b.value("min_seconds", s.bench.min_seconds);
      s.bench.min_epochs = b.value("min_epochs", s.bench.min_epochs);
      s.bench.chunk = b.value("chunk", s.bench.chunk);
    }
    if (j.contains("out")) s.out_dir = j.at("out").get<std::string>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return s;
}

struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::string> out;
  bool gan = false;
  std::optional<std::string> potential;
  std::optional<std::string> checkpoint;
};

// --seed drives network init, collocation sampling and the discriminator; the
// potential keeps its configured seed so runs over seeds share one landscape.
inline void apply_overrides(ExperimentSpec& s, const CliOverrides& o) {
  if (o.seed) {
    s.model.init_seed = *o.seed;
    s.training.sampling_seed = *o.seed;
    s.transfer_training.sampling_seed = *o.seed;
    s.transfer_init.seed = *o.seed;
    s.deqgan.seed = *o.seed;
  }
  if (o.epochs) {
    if (*o.epochs < 0) throw ConfigError("--epochs must be >= 0");
    s.training.epochs = *o.epochs;
    s.transfer_training.epochs = *o.epochs;
  }
  if (o.out) s.out_dir = *o.out;
  if (o.gan) s.gan = true;
  if (o.potential) s.potential_path = *o.potential;
  if (o.checkpoint) s.checkpoint_path = *o.checkpoint;
}

// --- persistence --------------------------------------------------------------

inline RandomPotential load_potential(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("potential file not found: " + path.string());
  try {
    return RandomPotential::from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw ConfigError("potential file " + path.string() + ": " + e.what());
  }
}

// Training potential: --potential, then potential.file, then sampled.
inline RandomPotential resolve_training_potential(const ExperimentSpec& s) {
  if (s.potential_path) return load_potential(*s.potential_path);
  if (s.potential.file) return load_potential(*s.potential.file);
  return sample_potential(s.potential.seed, s.potential.params);
}

struct Checkpoint {
  MultiHeadNetwork net;
  std::string potential_hash;
  double t_end = 1.0;
  std::vector<std::size_t> evaluate_heads;  // heads trained on the stored potential
};

inline Json checkpoint_json(const MultiHeadNetwork& net, const RandomPotential& p, double t_end,
                            std::optional<std::vector<std::size_t>> evaluate_heads = std::nullopt) {
  Json j = net.to_checkpoint();
  j["potential_hash"] = p.content_hash();
  j["t_end"] = t_end;
  if (evaluate_heads) j["evaluate_heads"] = *evaluate_heads;
  return j;
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  try {
    const Json j = read_json_file(path);
    Checkpoint c{MultiHeadNetwork::from_checkpoint(j), j.at("potential_hash").get<std::string>(),
                 j.value("t_end", 1.0), {}};
    if (j.contains("evaluate_heads")) {
      c.evaluate_heads = j.at("evaluate_heads").get<std::vector<std::size_t>>();
      for (auto h : c.evaluate_heads) c.net.check_head(h);
    } else {
      for (std::size_t i = 0; i < c.net.head_count(); ++i) c.evaluate_heads.push_back(i);
    }
    return c;
  } catch (const Json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + ": " + e.what());
  }
}

inline Json report_json(const TrainingReport& r, const std::string& mode, const ExperimentSpec& s,
                        const TrainingConfig& cfg, const RandomPotential& p, const std::vector<double>& y0s) {
  Json config{{"mode", mode},
              {"architecture", s.gan ? "DEQGAN" : "FFNN"},
              {"training", cfg.to_json()},
              {"model", s.model.to_json()},
              {"potential_hash", p.content_hash()},
              {"initial_conditions", y0s}};
  if (s.gan) config["deqgan"] = s.deqgan.to_json();
  return r.to_json(config);
}

// --- training -----------------------------------------------------------------

inline TrainingReport train_selected(const ExperimentSpec& s, MultiHeadNetwork& net, std::span<const std::size_t> heads,
                                     const RandomPotential& p, const TrainingConfig& cfg, std::uint64_t stream = 0) {
  return s.gan ? deqgan_train_heads(net, heads, p, s.deqgan, cfg, stream) : train_heads(net, heads, p, cfg, stream);
}

inline std::vector<std::size_t> all_heads(const MultiHeadNetwork& net) {
  std::vector<std::size_t> h(net.head_count());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = i;
  return h;
}

inline std::vector<double> y0s_of(std::span<const InitialCondition> ics) {
  std::vector<double> v;
  for (const auto& ic : ics) v.push_back(ic.y0);
  return v;
}

inline void write_network_trajectories(const MultiHeadNetwork& net, std::span<const std::size_t> heads,
                                       const Vector& times, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < heads.size(); ++k)
    write_trajectory_csv(network_trajectory(net, heads[k], times), (dir / indexed(stem, k, ".csv")).string());
}

struct CommandResult {
  ExitCode code = ExitCode::ok;
  std::vector<fs::path> written;
};

inline CommandResult cmd_train_base(const ExperimentSpec& s) {
  s.validate(Mode::train_base);
  const auto p = resolve_training_potential(s);
  auto net = init_model(s.model, s.base_ics);
  const auto heads = all_heads(net);
  CommandResult res;
  const auto out = s.out();
  fs::create_directories(out);
  write_json_file(out / "potential.json", p.to_json());
  res.written.push_back(out / "potential.json");

  TrainingReport report;
  try {
    report = train_selected(s, net, heads, p, s.training);
  } catch (const TrainingDiverged& e) {
    write_json_file(out / "report_base.json", report_json(e.report(), "train-base", s, s.training, p, y0s_of(s.base_ics)));
    res.written.push_back(out / "report_base.json");
    res.code = ExitCode::divergence;
    return res;
  }
  write_json_file(out / "checkpoint.json", checkpoint_json(net, p, s.training.t_end), 1);
  write_json_file(out / "report_base.json", report_json(report, "train-base", s, s.training, p, y0s_of(s.base_ics)));
  write_network_trajectories(net, heads, linspace(0.0, s.training.t_end, s.eval_points), out / "trajectories", "base");
  res.written.insert(res.written.end(), {out / "checkpoint.json", out / "report_base.json", out / "trajectories"});
  return res;
}

inline CommandResult cmd_classical(const ExperimentSpec& s) {
  s.validate(Mode::classical);
  const auto p = resolve_training_potential(s);
  const auto dir = s.out() / "classical";
  fs::create_directories(dir);
  CommandResult res;
  for (std::size_t k = 0; k < s.classical_ics.size(); ++k) {
    const InitialCondition ic = s.classical_ics[k];
    auto net = init_model(s.model, std::span<const InitialCondition>(&ic, 1));
    const std::size_t head = 0;
    TrainingReport report;
    try {
      report = train_selected(s, net, std::span<const std::size_t>(&head, 1), p, s.training);
    } catch (const TrainingDiverged& e) {
      report = e.report();
      res.code = ExitCode::divergence;
    }
    write_json_file(dir / indexed("report", k, ".json"), report_json(report, "classical", s, s.training, p, {ic.y0}));
    if (report.diverged) continue;
    write_json_file(dir / indexed("checkpoint", k, ".json"), checkpoint_json(net, p, s.training.t_end), 1);
    write_trajectory_csv(network_trajectory(net, 0, linspace(0.0, s.training.t_end, s.eval_points)),
                         (dir / indexed("trajectory", k, ".csv")).string());
  }
  res.written.push_back(dir);
  return res;
}

// transfer-ic keeps the checkpoint's potential; transfer-potential resamples
// the K means with the same A and sigma under a new seed.
inline CommandResult cmd_transfer(const ExperimentSpec& s, bool new_potential) {
  s.validate(new_potential ? Mode::transfer_potential : Mode::transfer_ic);
  auto ck = load_checkpoint(s.default_checkpoint());
  const auto base_potential = load_potential(s.default_potential());
  if (base_potential.content_hash() != ck.potential_hash)
    throw ConfigError("potential file does not match the checkpoint's potential hash");

  std::optional<RandomPotential> resampled;
  if (new_potential) {
    PotentialParams params{base_potential.count(), base_potential.amplitude(), base_potential.sigma(),
                           base_potential.sampling_rect(), base_potential.conventional_exponent()};
    const std::uint64_t seed = s.transfer_potential_seed.value_or(base_potential.seed() + 1);
    resampled = sample_potential(seed, params);
    if (resampled->content_hash() == base_potential.content_hash())
      throw ConfigError("transfer-potential: resampled potential equals the training potential");
  }
  const RandomPotential& p = resampled ? *resampled : base_potential;

  auto& net = ck.net;
  net.freeze_base();
  const auto checksum = net.base_checksum();
  TransferOptions opts{s.transfer_init, s.transfer_workers};
  auto result = transfer_train(net, s.transfer_ics, p, s.transfer_training, opts);
  if (net.base_checksum() != checksum) throw ContractError("transfer: base checksum changed");

  const auto dir = s.out() / (new_potential ? "transfer_potential" : "transfer_ic");
  fs::create_directories(dir / "reports");
  CommandResult res;
  if (resampled) write_json_file(dir / "potential.json", resampled->to_json());
  for (std::size_t k = 0; k < result.heads.size(); ++k) {
    write_json_file(dir / "reports" / indexed("transfer", k, ".json"),
                    report_json(result.reports[k], new_potential ? "transfer-potential" : "transfer-ic", s,
                                s.transfer_training, p, {s.transfer_ics[k].y0}));
    if (result.reports[k].diverged) res.code = ExitCode::divergence;
  }
  write_network_trajectories(net, result.heads, linspace(0.0, s.transfer_training.t_end, s.eval_points),
                             dir / "trajectories", "transfer");
  std::optional<std::vector<std::size_t>> eval_heads;
  if (new_potential) eval_heads = result.heads;
  write_json_file(dir / "checkpoint.json", checkpoint_json(net, p, s.transfer_training.t_end, eval_heads), 1);
  write_json_file(dir / "base_checksum.json", {{"before", checksum}, {"after", net.base_checksum()}});
  res.written.push_back(dir);
  return res;
}

inline CommandResult cmd_oracle(const ExperimentSpec& s) {
  s.validate(Mode::oracle);
  fs::path file = s.default_potential();
  if (!s.potential_path && s.potential.file) file = *s.potential.file;
  const auto p = load_potential(file);
  const auto& ics = s.oracle_ics ? *s.oracle_ics : s.base_ics;
  const auto dir = s.out() / "oracle";
  fs::create_directories(dir);
  for (std::size_t k = 0; k < ics.size(); ++k)
    write_trajectory_csv(rk4_integrate(ics[k], p, s.training.t_end, s.oracle_dt),
                         (dir / indexed("oracle", k, ".csv")).string());
  return {ExitCode::ok, {dir}};
}

// --- evaluation ---------------------------------------------------------------

struct HeadEval {
  double y0 = 0.0;
  std::array<double, 4> max_abs_error{};  // x, y, px, py
  double residual = 0.0;                  // mean squared residual on the grid
  double energy_drift = 0.0;              // max |H(t) - H(0)| / max(|H(0)|, 1e-12)

  double max_error() const { return *std::max_element(max_abs_error.begin(), max_abs_error.end()); }
};

struct EvalSummary {
  std::vector<HeadEval> heads;
  double t_end = 1.0;
  double training_t_end = 1.0;
  int grid_points = 0;
  int points_outside_training_domain = 0;
  std::string potential_hash;

  Json to_json() const {
    Json hs = Json::array();
    for (const auto& h : heads)
      hs.push_back({{"y0", h.y0},
                    {"max_abs_error",
                     {{"x", h.max_abs_error[0]}, {"y", h.max_abs_error[1]}, {"px", h.max_abs_error[2]}, {"py", h.max_abs_error[3]}}},
                    {"max_error", h.max_error()},
                    {"residual", h.residual},
                    {"energy_drift", h.energy_drift}});
    return {{"heads", hs},
            {"t_end", t_end},
            {"training_t_end", training_t_end},
            {"grid_points", grid_points},
            {"points_outside_training_domain", points_outside_training_domain},
            {"extrapolated", points_outside_training_domain > 0},
            {"potential_hash", potential_hash}};
  }
};

inline std::array<double, 4> max_abs_errors(const Trajectory& candidate, const Trajectory& reference) {
  if (candidate.size() != reference.size()) throw ConfigError("eval: trajectories have different lengths");
  std::array<double, 4> err{};
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    const auto a = candidate.states[i].as_array();
    const auto b = reference.states[i].as_array();
    for (int c = 0; c < 4; ++c) {
      const double d = std::abs(a[c] - b[c]);
      err[c] = std::isnan(d) ? std::numeric_limits<double>::infinity() : std::max(err[c], d);
    }
  }
  return err;
}

inline double relative_energy_drift(const Trajectory& tr, const RandomPotential& p) {
  if (tr.states.empty()) return 0.0;
  const double h0 = hamiltonian_energy(tr.states.front(), p);
  double drift = 0.0;
  for (const auto& s : tr.states) drift = std::max(drift, std::abs(hamiltonian_energy(s, p) - h0));
  return drift / std::max(std::abs(h0), 1e-12);
}

// Compares one candidate trajectory (on grid `times`) with a fresh oracle run.
inline HeadEval evaluate_trajectory(const Trajectory& candidate, const InitialCondition& ic, const RandomPotential& p,
                                    double oracle_dt, double residual) {
  std::vector<double> times = candidate.times;
  const auto oracle = rk4_sample(ic, p, times, oracle_dt);
  HeadEval e;
  e.y0 = ic.y0;
  e.max_abs_error = max_abs_errors(candidate, oracle);
  e.residual = residual;
  e.energy_drift = relative_energy_drift(candidate, p);
  return e;
}

inline EvalSummary evaluate_network(const MultiHeadNetwork& net, std::span<const std::size_t> heads,
                                    const RandomPotential& p, double t_end, double training_t_end, int points,
                                    double oracle_dt) {
  EvalSummary sum;
  sum.t_end = t_end;
  sum.training_t_end = training_t_end;
  sum.grid_points = points;
  sum.potential_hash = p.content_hash();
  const Vector times = linspace(0.0, t_end, points);
  for (Eigen::Index i = 0; i < times.size(); ++i)
    if (times[i] > training_t_end * (1.0 + 1e-12)) ++sum.points_outside_training_domain;
  for (auto h : heads) {
    const auto sb = reparametrized_forward(net, h, times);
    const double r = mean_square_residual(residuals(sb.state, sb.derivative, p));
    sum.heads.push_back(evaluate_trajectory(network_trajectory(net, h, times), net.head(h).ic, p, oracle_dt, r));
  }
  return sum;
}

inline CommandResult cmd_eval(const ExperimentSpec& s) {
  s.validate(Mode::eval);
  const auto ck = load_checkpoint(s.default_checkpoint());
  const auto p = load_potential(s.default_potential());
  if (p.content_hash() != ck.potential_hash)
    throw ConfigError("eval: potential hash " + p.content_hash() + " does not match checkpoint hash " +
                      ck.potential_hash);
  const double t_end = s.eval_t_end.value_or(ck.t_end);
  const auto sum = evaluate_network(ck.net, ck.evaluate_heads, p, t_end, ck.t_end, s.eval_points, s.oracle_dt);
  const auto path = s.out() / "eval.json";
  write_json_file(path, sum.to_json());
  if (sum.points_outside_training_domain > 0)
    std::cerr << "warning: " << sum.points_outside_training_domain
              << " evaluation points lie beyond the training interval [0, " << ck.t_end << "]\n";
  return {ExitCode::ok, {path}};
}

// --- plots --------------------------------------------------------------------

inline std::vector<Trajectory> read_trajectories(const std::vector<fs::path>& files) {
  std::vector<Trajectory> out;
  for (const auto& f : files) out.push_back(read_trajectory_csv(f.string()));
  return out;
}

inline CommandResult cmd_plot(const ExperimentSpec& s) {
  s.validate(Mode::plot);
  const auto out = s.out();
  const fs::path potential = s.plot.potential ? fs::path(*s.plot.potential) : s.default_potential();
  const auto p = load_potential(potential);

  const fs::path base_dir = s.plot.base_trajectories ? fs::path(*s.plot.base_trajectories) : out / "trajectories";
  if (!fs::is_directory(base_dir)) throw ConfigError("plot: base trajectory directory not found: " + base_dir.string());
  fs::path transfer_dir = out / "transfer_ic" / "trajectories";
  if (s.plot.transfer_trajectories) {
    transfer_dir = *s.plot.transfer_trajectories;
    if (!fs::is_directory(transfer_dir))
      throw ConfigError("plot: transfer trajectory directory not found: " + transfer_dir.string());
  }
  const auto base = read_trajectories(list_files(base_dir, "", ".csv"));
  const auto transfer = read_trajectories(list_files(transfer_dir, "", ".csv"));

  CommandResult res;
  write_text_file(out / "trajectories.svg", svg::trajectory_plot(p, base, transfer, {s.plot.window, s.plot.samples}));
  res.written.push_back(out / "trajectories.svg");

  std::vector<std::pair<std::string, fs::path>> reports;
  if (!s.plot.reports.empty()) {
    for (const auto& [label, path] : s.plot.reports) {
      if (!fs::exists(path)) throw ConfigError("plot: report not found: " + path);
      reports.emplace_back(label, path);
    }
  } else {
    for (const auto& [label, path] : std::vector<std::pair<std::string, fs::path>>{
             {"classical", out / "classical" / "report_000.json"},
             {"base (multi-head)", out / "report_base.json"},
             {"transfer", out / "transfer_ic" / "reports" / "transfer_000.json"}})
      if (fs::exists(path)) reports.emplace_back(label, path);
  }
  if (!reports.empty()) {
    std::vector<svg::Series> series;
    for (const auto& [label, path] : reports) {
      try {
        series.push_back({label, TrainingReport::from_json(read_json_file(path)).loss_curve});
      } catch (const Json::exception& e) {
        throw ConfigError("plot: report " + path.string() + ": " + e.what());
      }
    }
    write_text_file(out / "loss.svg", svg::loss_plot(series));
    res.written.push_back(out / "loss.svg");
  }
  return res;
}

// --- benchmark ----------------------------------------------------------------

struct BenchCell {
  double epochs_per_second = 0.0;
  long epochs = 0;
  double seconds = 0.0;
};

struct BenchTable {
  // rows FFNN, DEQGAN; columns classical, base, transfer
  std::array<std::array<BenchCell, 3>, 2> cells{};

  Json to_json(const BenchSpec& b) const {
    static constexpr std::array<const char*, 2> rows{"FFNN", "DEQGAN"};
    static constexpr std::array<const char*, 3> cols{"classical", "base", "transfer"};
    Json table = Json::array();
    for (std::size_t r = 0; r < 2; ++r) {
      Json row{{"architecture", rows[r]}};
      for (std::size_t c = 0; c < 3; ++c)
        row[cols[c]] = {{"epochs_per_second", cells[r][c].epochs_per_second},
                        {"epochs", cells[r][c].epochs},
                        {"seconds", cells[r][c].seconds}};
      table.push_back(row);
    }
    return {{"unit", "epochs per second"},
            {"threads", 1},
            {"min_seconds", b.min_seconds},
            {"min_epochs", b.min_epochs},
            {"rows", table}};
  }
};

// Repeats short training chunks until both budgets are met. Only epoch work is
// timed (see TrainingReport::wall_clock_seconds).
template <class ChunkFn>
BenchCell bench_cell(const BenchSpec& b, ChunkFn&& run_chunk) {
  BenchCell cell;
  for (std::uint64_t chunk = 0; cell.epochs < b.min_epochs || cell.seconds < b.min_seconds; ++chunk) {
    const TrainingReport r = run_chunk(chunk);
    cell.epochs += r.stopped_epoch;
    cell.seconds += r.wall_clock_seconds;
    if (r.stopped_epoch == 0) throw ConfigError("bench: training chunk ran no epochs");
  }
  cell.epochs_per_second = cell.seconds > 0.0 ? static_cast<double>(cell.epochs) / cell.seconds : 0.0;
  return cell;
}

inline BenchTable run_bench(const ExperimentSpec& s, const MultiHeadNetwork& trained, const RandomPotential& p) {
  BenchTable table;
  TrainingConfig cfg = s.training;
  cfg.epochs = s.bench.chunk;
  cfg.loss_threshold.reset();
  cfg.eval_points = 2;  // evaluation is outside the timed region; keep it cheap
  const InitialCondition ic = s.classical_ics.front();

  for (int arch = 0; arch < 2; ++arch) {
    ExperimentSpec as = s;
    as.gan = arch == 1;
    auto chunk_cfg = [&](std::uint64_t chunk) {
      TrainingConfig c = cfg;
      c.sampling_seed = cfg.sampling_seed + chunk;
      return c;
    };

    auto classical = init_model(s.model, std::span<const InitialCondition>(&ic, 1));
    const std::size_t h0 = 0;
    table.cells[arch][0] = bench_cell(s.bench, [&](std::uint64_t k) {
      return train_selected(as, classical, std::span<const std::size_t>(&h0, 1), p, chunk_cfg(k));
    });

    auto base = init_model(s.model, s.base_ics);
    const auto heads = all_heads(base);
    table.cells[arch][1] = bench_cell(s.bench, [&](std::uint64_t k) {
      return train_selected(as, base, heads, p, chunk_cfg(k));
    });

    MultiHeadNetwork transfer = trained;
    transfer.freeze_base();
    const std::size_t th = transfer.attach_head(ic, s.transfer_init);
    table.cells[arch][2] = bench_cell(s.bench, [&](std::uint64_t k) {
      return train_selected(as, transfer, std::span<const std::size_t>(&th, 1), p, chunk_cfg(k));
    });
  }
  return table;
}

inline CommandResult cmd_bench(const ExperimentSpec& s) {
  s.validate(Mode::bench);
  const auto ck = load_checkpoint(s.default_checkpoint());
  const auto p = load_potential(s.default_potential());
  if (p.content_hash() != ck.potential_hash) throw ConfigError("bench: potential does not match the checkpoint");
  Eigen::setNbThreads(1);
  const auto table = run_bench(s, ck.net, p);
  const auto path = s.out() / "bench.json";
  write_json_file(path, table.to_json(s.bench));
  return {ExitCode::ok, {path}};
}

// --- dispatch -----------------------------------------------------------------

inline CommandResult run_mode(Mode mode, const ExperimentSpec& s) {
  switch (mode) {
    case Mode::train_base: return cmd_train_base(s);
    case Mode::transfer_ic: return cmd_transfer(s, false);
    case Mode::transfer_potential: return cmd_transfer(s, true);
    case Mode::classical: return cmd_classical(s);
    case Mode::oracle: return cmd_oracle(s);
    case Mode::eval: return cmd_eval(s);
    case Mode::plot: return cmd_plot(s);
    case Mode::bench: return cmd_bench(s);
  }
  throw ConfigError("unhandled mode");
}

// Runs one mode and maps failures onto exit codes, reporting on `err`.
inline int run_command(const std::string& mode_name, const fs::path& config, const CliOverrides& o,
                       std::ostream& err = std::cerr) {
  try {
    const Mode mode = mode_from_string(mode_name);
    ExperimentSpec s = spec_from_json(read_json_file(config));
    apply_overrides(s, o);
    const auto res = run_mode(mode, s);
    if (res.code == ExitCode::divergence) err << "error: training diverged; partial reports written\n";
    return static_cast<int>(res.code);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::usage);
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::usage);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::usage);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::divergence);
  }
}

}  // namespace branchflow
