#pragma once

// Residual loss for Hamilton's equations and the FFNN training schemes:
// multi-head base training, classical single-head training, and transfer of
// new heads onto a frozen base.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "branchflow/adam.hpp"
#include "branchflow/autodiff.hpp"
#include "branchflow/dynamics.hpp"
#include "branchflow/model.hpp"
#include "branchflow/potential.hpp"

namespace branchflow {

enum class Sampling { fixed_grid, uniform_resample };

struct TrainingConfig {
  int epochs = 5000;
  int collocation_count = 100;  // M
  double t_end = 1.0;
  double learning_rate = 1e-3;
  AdamConfig adam{};
  Sampling sampling = Sampling::uniform_resample;
  std::uint64_t sampling_seed = 0;
  std::optional<double> loss_threshold;
  int eval_points = 200;

  void validate() const {
    if (epochs < 0) throw ConfigError("training: epochs must be >= 0");
    if (collocation_count < 1) throw ConfigError("training: collocation_count must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("training: learning_rate must be > 0");
    if (!(t_end > 0.0)) throw ConfigError("training: t_end must be > 0");
    if (eval_points < 2) throw ConfigError("training: eval_points must be >= 2");
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"epochs", epochs},
                     {"collocation_count", collocation_count},
                     {"t_end", t_end},
                     {"learning_rate", learning_rate},
                     {"adam", adam.to_json()},
                     {"sampling", sampling == Sampling::fixed_grid ? "fixed_grid" : "uniform_resample"},
                     {"sampling_seed", sampling_seed},
                     {"eval_points", eval_points}};
    j["loss_threshold"] = loss_threshold ? nlohmann::json(*loss_threshold) : nlohmann::json(nullptr);
    return j;
  }

  static TrainingConfig from_json(const nlohmann::json& j) { return from_json(j, TrainingConfig{}); }
  static TrainingConfig from_json(const nlohmann::json& j, TrainingConfig c) {
    c.epochs = j.value("epochs", c.epochs);
    c.collocation_count = j.value("collocation_count", c.collocation_count);
    c.t_end = j.value("t_end", c.t_end);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("adam")) c.adam = AdamConfig::from_json(j.at("adam"));
    if (j.contains("sampling")) {
      const auto s = j.at("sampling").get<std::string>();
      if (s == "fixed_grid") c.sampling = Sampling::fixed_grid;
      else if (s == "uniform_resample") c.sampling = Sampling::uniform_resample;
      else throw ConfigError("training: unknown sampling policy " + s);
    }
    c.sampling_seed = j.value("sampling_seed", c.sampling_seed);
    if (j.contains("loss_threshold") && !j.at("loss_threshold").is_null())
      c.loss_threshold = j.at("loss_threshold").get<double>();
    c.eval_points = j.value("eval_points", c.eval_points);
    c.validate();
    return c;
  }
};

struct TrainingReport {
  std::vector<double> loss_curve;  // mean squared residual on the evaluation grid, after each epoch
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  double wall_clock_seconds = 0.0;  // time spent in epochs (sample, forward, backward, step)
  double epochs_per_second = 0.0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  int stopped_epoch = 0;
  bool diverged = false;
  std::string error;
  std::vector<double> discriminator_accuracy;  // DEQGAN only

  void finish() {
    stopped_epoch = static_cast<int>(loss_curve.size());
    final_loss = loss_curve.empty() ? initial_loss : loss_curve.back();
    epochs_per_second = wall_clock_seconds > 0.0 ? stopped_epoch / wall_clock_seconds : 0.0;
  }

  // First epoch (1-based) whose loss is <= tau; 0 if the starting point already
  // is; nullopt if never reached.
  std::optional<int> epochs_to(double tau) const {
    if (initial_loss <= tau) return 0;
    for (std::size_t i = 0; i < loss_curve.size(); ++i)
      if (loss_curve[i] <= tau) return static_cast<int>(i + 1);
    return std::nullopt;
  }

  nlohmann::json to_json(const nlohmann::json& config) const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json j{{"config", config},
                     {"loss_curve", loss_curve},
                     {"wall_clock_seconds", wall_clock_seconds},
                     {"epochs_per_second", epochs_per_second},
                     {"final_loss", num(final_loss)},
                     {"stopped_epoch", stopped_epoch},
                     {"initial_loss", num(initial_loss)},
                     {"diverged", diverged}};
    if (!error.empty()) j["error"] = error;
    if (!discriminator_accuracy.empty()) j["discriminator_accuracy"] = discriminator_accuracy;
    return j;
  }

  static TrainingReport from_json(const nlohmann::json& j) {
    auto num = [](const nlohmann::json& v) {
      return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    TrainingReport r;
    r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
    r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    r.epochs_per_second = j.value("epochs_per_second", 0.0);
    r.final_loss = num(j.value("final_loss", nlohmann::json(nullptr)));
    r.stopped_epoch = j.value("stopped_epoch", static_cast<int>(r.loss_curve.size()));
    r.initial_loss = num(j.value("initial_loss", nlohmann::json(nullptr)));
    r.diverged = j.value("diverged", false);
    r.error = j.value("error", std::string());
    if (j.contains("discriminator_accuracy"))
      r.discriminator_accuracy = j.at("discriminator_accuracy").get<std::vector<double>>();
    return r;
  }
};

// Training stopped on a non-finite loss. Carries everything recorded so far.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, int epoch, TrainingReport partial)
      : DivergenceError(what, epoch), report_(std::move(partial)) {}
  const TrainingReport& report() const { return report_; }

 private:
  TrainingReport report_;
};

// --- residuals ---------------------------------------------------------------

// Rows of (r1, r2, r3, r4) = (dx/dt - px, dy/dt - py, dpx/dt + Vx, dpy/dt + Vy).
inline Matrix residuals(const Matrix& state, const Matrix& derivative, const RandomPotential& p) {
  if (state.cols() != kStateDim || derivative.cols() != kStateDim || state.rows() != derivative.rows())
    throw ConfigError("residuals: expected matching N x 4 inputs");
  Matrix r(state.rows(), kStateDim);
  for (Eigen::Index i = 0; i < state.rows(); ++i) {
    const Vec2 g = p.gradient({state(i, 0), state(i, 1)});
    r(i, 0) = derivative(i, 0) - state(i, 2);
    r(i, 1) = derivative(i, 1) - state(i, 3);
    r(i, 2) = derivative(i, 2) + g[0];
    r(i, 3) = derivative(i, 3) + g[1];
  }
  return r;
}

// Right-hand side (px, py, -Vx, -Vy) of each state row, recorded on the tape.
inline Var hamiltonian_rhs(Tape& tape, Var state, const RandomPotential& p) {
  const Matrix& s = tape.value(state);
  if (s.cols() != kStateDim) throw ConfigError("hamiltonian_rhs: expected N x 4 states");
  const Eigen::Index n = s.rows();
  Matrix f(n, kStateDim);
  Matrix hess(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec2 x{s(i, 0), s(i, 1)};
    const Vec2 g = p.gradient(x);
    f(i, 0) = s(i, 2);
    f(i, 1) = s(i, 3);
    f(i, 2) = -g[0];
    f(i, 3) = -g[1];
    if (tape.requires_grad(state)) {
      const auto h = p.hessian(x);
      hess(i, 0) = h[0];
      hess(i, 1) = h[1];
      hess(i, 2) = h[2];
    }
  }
  return tape.record(std::move(f), tape.requires_grad(state), [state, hess](Tape& tp, const Matrix& g) {
    Matrix gs(g.rows(), kStateDim);
    gs.col(0) = -(hess.col(0).cwiseProduct(g.col(2)) + hess.col(1).cwiseProduct(g.col(3)));
    gs.col(1) = -(hess.col(1).cwiseProduct(g.col(2)) + hess.col(2).cwiseProduct(g.col(3)));
    gs.col(2) = g.col(0);
    gs.col(3) = g.col(1);
    tp.accumulate(state, gs);
  });
}

inline Var residual_var(Tape& tape, const Reparametrized& sol, const RandomPotential& p) {
  return ad::sub(tape, sol.derivative, hamiltonian_rhs(tape, sol.state, p));
}

inline void check_finite_output(const Matrix& m) {
  if (!m.allFinite()) throw DivergenceError("non-finite network output", std::numeric_limits<double>::quiet_NaN());
}

// Residual rows for one head at the given times.
inline Matrix residual_batch(const MultiHeadNetwork& net, std::size_t head, const RandomPotential& p,
                             const Vector& times) {
  const auto sb = reparametrized_forward(net, head, times);
  check_finite_output(sb.state);
  check_finite_output(sb.derivative);
  return residuals(sb.state, sb.derivative, p);
}

// Mean over heads of the mean squared residual (all four components).
inline double mean_square_residual(const Matrix& r) { return r.squaredNorm() / static_cast<double>(r.size()); }

inline double pinn_loss(const MultiHeadNetwork& net, std::span<const std::size_t> heads, const RandomPotential& p,
                        const Vector& times) {
  if (heads.empty()) throw ConfigError("pinn_loss: head set is empty");
  const auto features = net.base_values(times);
  double total = 0.0;
  for (auto h : heads) {
    const auto sb = reparametrize(net.head(h).ic, net.head_values(h, features), times);
    total += mean_square_residual(residuals(sb.state, sb.derivative, p));
  }
  return total / static_cast<double>(heads.size());
}

// Tape version; `features` is the shared base output for `times`.
inline Var pinn_loss(Tape& tape, const MultiHeadNetwork& net, std::span<const std::size_t> heads,
                     const RandomPotential& p, const DualBatch& features, const Vector& times) {
  if (heads.empty()) throw ConfigError("pinn_loss: head set is empty");
  std::optional<Var> total;
  for (auto h : heads) {
    const auto sol = reparametrize(tape, net.head(h).ic, net.head_forward(tape, h, features), times);
    Var l = ad::mean_square(tape, residual_var(tape, sol, p));
    total = total ? ad::add(tape, *total, l) : l;
  }
  return ad::scale(tape, *total, 1.0 / static_cast<double>(heads.size()));
}

inline Var pinn_loss(Tape& tape, const MultiHeadNetwork& net, std::span<const std::size_t> heads,
                     const RandomPotential& p, const Vector& times) {
  return pinn_loss(tape, net, heads, p, net.base_forward(tape, times), times);
}

// --- shared training machinery --------------------------------------------------

class CollocationSampler {
 public:
  CollocationSampler(const TrainingConfig& cfg, std::uint64_t stream)
      : cfg_(cfg), rng_(Rng::derive(cfg.sampling_seed, stream)) {}

  Vector next() {
    if (cfg_.sampling == Sampling::fixed_grid) return linspace(0.0, cfg_.t_end, cfg_.collocation_count);
    Vector t(cfg_.collocation_count);
    for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = rng_.uniform(0.0, cfg_.t_end);
    return t;
  }

 private:
  TrainingConfig cfg_;
  Rng rng_;
};

// Shared base features as a tape input: on the tape when the base trains,
// a constant when it is frozen.
inline DualBatch features_for(Tape& tape, const MultiHeadNetwork& net, const Vector& times) {
  if (!net.frozen_base()) return net.base_forward(tape, times);
  auto f = net.base_values(times);
  return {tape.constant(std::move(f.values)), tape.constant(std::move(f.tangents))};
}

// Loss on the fixed evaluation grid; caches base features while the base is frozen.
class GridEvaluator {
 public:
  GridEvaluator(const MultiHeadNetwork& net, const RandomPotential& p, const TrainingConfig& cfg)
      : net_(net), p_(p), times_(linspace(0.0, cfg.t_end, cfg.eval_points)) {
    if (net.frozen_base()) cached_ = net.base_values(times_);
  }

  double operator()(std::span<const std::size_t> heads) const {
    if (!cached_) return pinn_loss(net_, heads, p_, times_);
    double total = 0.0;
    for (auto h : heads) {
      const auto sb = reparametrize(net_.head(h).ic, net_.head_values(h, *cached_), times_);
      total += mean_square_residual(residuals(sb.state, sb.derivative, p_));
    }
    return total / static_cast<double>(heads.size());
  }

  const Vector& times() const { return times_; }

 private:
  const MultiHeadNetwork& net_;
  const RandomPotential& p_;
  Vector times_;
  std::optional<DualValues> cached_;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs `epoch_fn(epoch)` (one full optimization step) until the epoch budget
// or the loss threshold is hit, recording the evaluation loss after each.
template <class EpochFn, class EvalFn>
TrainingReport run_epochs(const TrainingConfig& cfg, EpochFn&& epoch_fn, EvalFn&& eval_fn) {
  TrainingReport report;
  report.initial_loss = eval_fn();
  auto reached = [&](double loss) { return cfg.loss_threshold && loss <= *cfg.loss_threshold; };
  if (!reached(report.initial_loss)) {
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const auto t0 = Clock::now();
      const double train_loss = epoch_fn(epoch);
      report.wall_clock_seconds += seconds_since(t0);
      const double loss = eval_fn();
      if (!std::isfinite(train_loss) || !std::isfinite(loss)) {
        report.diverged = true;
        report.error = "training diverged at epoch " + std::to_string(epoch);
        report.finish();
        throw TrainingDiverged(report.error, epoch, report);
      }
      report.loss_curve.push_back(loss);
      if (reached(loss)) break;
    }
  }
  report.finish();
  return report;
}

}  // namespace detail

// Optimizes the given heads (and the base unless frozen) on the residual loss.
inline TrainingReport train_heads(MultiHeadNetwork& net, std::span<const std::size_t> heads, const RandomPotential& p,
                                  const TrainingConfig& cfg, std::uint64_t sampler_stream = 0) {
  cfg.validate();
  if (heads.empty()) throw ConfigError("train: no heads selected");
  std::vector<std::size_t> head_ids(heads.begin(), heads.end());
  AdamState state(net.parameters(), net.trainable_tensors(head_ids));
  CollocationSampler sampler(cfg, sampler_stream);
  GridEvaluator eval(net, p, cfg);

  return detail::run_epochs(
      cfg,
      [&](int) {
        const Vector times = sampler.next();
        Tape tape;
        Var loss = pinn_loss(tape, net, head_ids, p, features_for(tape, net, times), times);
        const double value = tape.value(loss)(0, 0);
        const auto grads = ad::backward(tape, loss);
        adam_step(net.parameters(), grads, state, cfg.learning_rate, cfg.adam);
        return value;
      },
      [&] { return eval(head_ids); });
}

// All heads, base included.
inline TrainingReport train_base(MultiHeadNetwork& net, const RandomPotential& p, const TrainingConfig& cfg) {
  if (net.frozen_base()) throw ContractError("train_base: base is frozen");
  std::vector<std::size_t> heads(net.head_count());
  for (std::size_t i = 0; i < heads.size(); ++i) heads[i] = i;
  return train_heads(net, heads, p, cfg);
}

// Single-head network trained from scratch.
inline TrainingReport train_classical(MultiHeadNetwork& net, const RandomPotential& p, const TrainingConfig& cfg) {
  if (net.head_count() != 1) throw ConfigError("classical training expects exactly one head");
  return train_base(net, p, cfg);
}

struct TransferOptions {
  HeadInit init = HeadInit::copy_nearest();
  int workers = 1;
};

struct TransferResult {
  std::vector<std::size_t> heads;
  std::vector<TrainingReport> reports;
};

// Attaches one head per new initial condition and fits each head alone on the
// frozen base. A head that diverges keeps its partial report; the rest continue.
inline TransferResult transfer_train(MultiHeadNetwork& net, std::span<const InitialCondition> new_ics,
                                     const RandomPotential& p, const TrainingConfig& cfg,
                                     const TransferOptions& opts = {}) {
  if (!net.frozen_base()) throw ContractError("transfer_train: base must be frozen first");
  cfg.validate();
  const auto checksum = net.base_checksum();
  HeadInit init = opts.init;
  init.candidates = std::min(init.candidates, net.head_count());

  TransferResult result;
  for (const auto& ic : new_ics) result.heads.push_back(net.attach_head(ic, init));
  result.reports.resize(result.heads.size());

  auto run_one = [&](std::size_t k) {
    const std::size_t head = result.heads[k];
    try {
      result.reports[k] = train_heads(net, std::span<const std::size_t>(&head, 1), p, cfg, k);
    } catch (const TrainingDiverged& e) {
      result.reports[k] = e.report();
    } catch (const DivergenceError& e) {
      result.reports[k].diverged = true;
      result.reports[k].error = e.what();
    }
  };

  const int workers = std::max(1, std::min<int>(opts.workers, static_cast<int>(result.heads.size())));
  if (workers == 1) {
    for (std::size_t k = 0; k < result.heads.size(); ++k) run_one(k);
  } else {
    // Each worker owns a disjoint set of heads; the frozen base is read-shared.
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t k = static_cast<std::size_t>(w); k < result.heads.size(); k += static_cast<std::size_t>(workers))
          run_one(k);
      });
  }

  if (net.base_checksum() != checksum) throw ContractError("transfer_train: frozen base was modified");
  return result;
}

}  // namespace branchflow
