#pragma once

// Hamilton's equations for H = |p|^2 / 2 + V(x), and the fixed-step RK4
// integrator used as ground truth for network solutions.

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "branchflow/error.hpp"
#include "branchflow/potential.hpp"

namespace branchflow {

struct PhaseState {
  double x = 0.0;
  double y = 0.0;
  double px = 0.0;
  double py = 0.0;

  std::array<double, 4> as_array() const { return {x, y, px, py}; }
  static PhaseState from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(px) && std::isfinite(py);
  }
  friend bool operator==(const PhaseState&, const PhaseState&) = default;
};

using StateDerivative = std::array<double, 4>;

// Plane-wave launch: (0, y0, 1, 0).
struct InitialCondition {
  double y0 = 0.0;

  PhaseState state() const { return {0.0, y0, 1.0, 0.0}; }
  friend bool operator==(const InitialCondition&, const InitialCondition&) = default;
};

// n evenly spaced y0 values over [lo, hi], endpoints included (n == 1 gives lo).
inline std::vector<InitialCondition> evenly_spaced_ics(int n, double lo, double hi) {
  if (n < 1) throw ConfigError("need at least one initial condition");
  std::vector<InitialCondition> ics;
  ics.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    ics.push_back({n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / (n - 1)});
  return ics;
}

struct Trajectory {
  std::vector<double> times;
  std::vector<PhaseState> states;

  std::size_t size() const { return times.size(); }

  void validate() const {
    if (times.size() != states.size()) throw ConfigError("trajectory: length mismatch");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (!(times[i] > times[i - 1])) throw ConfigError("trajectory: times must be strictly increasing");
  }
};

inline StateDerivative rhs(const PhaseState& s, const RandomPotential& p) {
  const Vec2 g = p.gradient({s.x, s.y});
  return {s.px, s.py, -g[0], -g[1]};
}

inline double hamiltonian_energy(const PhaseState& s, const RandomPotential& p) {
  return 0.5 * (s.px * s.px + s.py * s.py) + p.value({s.x, s.y});
}

namespace detail {

inline PhaseState axpy(const PhaseState& s, double h, const StateDerivative& k) {
  return {s.x + h * k[0], s.y + h * k[1], s.px + h * k[2], s.py + h * k[3]};
}

inline PhaseState rk4_step(const PhaseState& s, double h, const RandomPotential& p) {
  const auto k1 = rhs(s, p);
  const auto k2 = rhs(axpy(s, 0.5 * h, k1), p);
  const auto k3 = rhs(axpy(s, 0.5 * h, k2), p);
  const auto k4 = rhs(axpy(s, h, k3), p);
  StateDerivative k;
  for (int i = 0; i < 4; ++i) k[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
  return axpy(s, h, k);
}

inline void check_finite(const PhaseState& s, double t) {
  if (!s.finite())
    throw DivergenceError("integration diverged at t=" + std::to_string(t), t);
}

}  // namespace detail

// Classical RK4 from t=0 with fixed step dt; the last step is shortened to
// land exactly on t_end. Every step is saved.
inline Trajectory rk4_integrate(const PhaseState& start, const RandomPotential& p, double t_end, double dt) {
  if (!(t_end > 0.0) || !(dt > 0.0) || dt > t_end)
    throw ConfigError("rk4_integrate: need t_end > 0 and 0 < dt <= t_end");
  auto full = static_cast<long long>(std::floor(t_end / dt * (1.0 + 1e-12)));
  if (static_cast<double>(full) * dt > t_end) --full;
  const double rest = t_end - static_cast<double>(full) * dt;
  const bool tail = rest > 1e-12 * t_end;

  Trajectory tr;
  tr.times.reserve(static_cast<std::size_t>(full) + 2);
  tr.states.reserve(static_cast<std::size_t>(full) + 2);
  PhaseState s = start;
  detail::check_finite(s, 0.0);
  tr.times.push_back(0.0);
  tr.states.push_back(s);
  for (long long k = 1; k <= full; ++k) {
    s = detail::rk4_step(s, dt, p);
    const double t = (k == full && !tail) ? t_end : static_cast<double>(k) * dt;
    detail::check_finite(s, t);
    tr.times.push_back(t);
    tr.states.push_back(s);
  }
  if (tail) {
    s = detail::rk4_step(s, t_end - tr.times.back(), p);
    detail::check_finite(s, t_end);
    tr.times.push_back(t_end);
    tr.states.push_back(s);
  }
  return tr;
}

inline Trajectory rk4_integrate(const InitialCondition& ic, const RandomPotential& p, double t_end, double dt) {
  return rk4_integrate(ic.state(), p, t_end, dt);
}

// RK4 solution sampled at the requested (increasing, >= 0) times. Each gap is
// split into equal substeps no longer than dt.
inline Trajectory rk4_sample(const InitialCondition& ic, const RandomPotential& p,
                             const std::vector<double>& times, double dt) {
  if (!(dt > 0.0)) throw ConfigError("rk4_sample: dt must be > 0");
  Trajectory tr;
  PhaseState s = ic.state();
  double t = 0.0;
  for (double target : times) {
    if (target < t) throw ConfigError("rk4_sample: times must be non-decreasing and >= 0");
    const double gap = target - t;
    if (gap > 0.0) {
      const auto n = static_cast<long long>(std::ceil(gap / dt * (1.0 - 1e-12)));
      const double h = gap / static_cast<double>(std::max(1LL, n));
      for (long long k = 0; k < std::max(1LL, n); ++k) s = detail::rk4_step(s, h, p);
      detail::check_finite(s, target);
    }
    t = target;
    tr.times.push_back(target);
    tr.states.push_back(s);
  }
  return tr;
}

// CSV with header t,x,y,px,py and 17 significant digits.
inline void write_trajectory_csv(const Trajectory& tr, std::ostream& os) {
  os << "t,x,y,px,py\n";
  char buf[160];
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const auto& s = tr.states[i];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", tr.times[i], s.x, s.y, s.px, s.py);
    os << buf;
  }
}

inline void write_trajectory_csv(const Trajectory& tr, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  write_trajectory_csv(tr, os);
}

inline Trajectory read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("t,x,y,px,py", 0) != 0)
    throw ConfigError("trajectory CSV: missing header t,x,y,px,py");
  Trajectory tr;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<double, 5> v{};
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i < 5; ++i) {
      if (!std::getline(ss, cell, ',')) throw ConfigError("trajectory CSV: short row");
      try {
        v[i] = std::stod(cell);
      } catch (const std::logic_error&) {
        throw ConfigError("trajectory CSV: bad number '" + cell + "'");
      }
    }
    tr.times.push_back(v[0]);
    tr.states.push_back({v[1], v[2], v[3], v[4]});
  }
  return tr;
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  return read_trajectory_csv(is);
}

}  // namespace branchflow
