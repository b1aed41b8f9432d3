#pragma once

// Random Gaussian potential
//
//   V(x) = -A / (2 pi sigma^2) * sum_i exp(-|x - mu_i|^2 / w),
//
// with w = 2 pi sigma^2 by default. Setting `conventional_exponent` switches
// the exponent width to the usual w = 2 sigma^2; the prefactor is unchanged.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "branchflow/error.hpp"
#include "branchflow/rng.hpp"

namespace branchflow {

using Vec2 = std::array<double, 2>;

struct Rect {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 1.0;
  double y_max = 1.0;

  bool degenerate() const {
    return !(x_max > x_min) || !(y_max > y_min) || !std::isfinite(x_min) || !std::isfinite(y_min) ||
           !std::isfinite(x_max) || !std::isfinite(y_max);
  }
  bool contains(const Vec2& p) const {
    return p[0] >= x_min && p[0] <= x_max && p[1] >= y_min && p[1] <= y_max;
  }
};

struct PotentialParams {
  int count = 10;  // K
  double amplitude = 0.1;  // A
  double sigma = 0.1;
  Rect sampling_rect{};
  bool conventional_exponent = false;
};

class RandomPotential {
 public:
  RandomPotential(std::vector<Vec2> means, double amplitude, double sigma, std::uint64_t seed,
                  Rect sampling_rect, bool conventional_exponent = false)
      : means_(std::move(means)),
        amplitude_(amplitude),
        sigma_(sigma),
        seed_(seed),
        rect_(sampling_rect),
        conventional_(conventional_exponent) {
    if (!(sigma_ > 0.0) || !std::isfinite(sigma_)) throw ConfigError("potential: sigma must be > 0");
    if (!(amplitude_ >= 0.0) || !std::isfinite(amplitude_))
      throw ConfigError("potential: amplitude must be >= 0");
    prefactor_ = amplitude_ / (2.0 * std::numbers::pi * sigma_ * sigma_);
    width_ = conventional_ ? 2.0 * sigma_ * sigma_ : 2.0 * std::numbers::pi * sigma_ * sigma_;
    if (!std::isfinite(prefactor_)) throw ConfigError("potential: A / (2 pi sigma^2) overflows");
  }

  const std::vector<Vec2>& means() const { return means_; }
  int count() const { return static_cast<int>(means_.size()); }
  double amplitude() const { return amplitude_; }
  double sigma() const { return sigma_; }
  std::uint64_t seed() const { return seed_; }
  const Rect& sampling_rect() const { return rect_; }
  bool conventional_exponent() const { return conventional_; }

  // A / (2 pi sigma^2): depth of a single isolated bump.
  double prefactor() const { return prefactor_; }
  // Denominator inside the exponent.
  double exponent_width() const { return width_; }

  double value(const Vec2& x) const {
    double s = 0.0;
    for (const auto& mu : means_) {
      const double dx = x[0] - mu[0], dy = x[1] - mu[1];
      s += std::exp(-(dx * dx + dy * dy) / width_);
    }
    return -prefactor_ * s;
  }

  Vec2 gradient(const Vec2& x) const {
    Vec2 g{0.0, 0.0};
    const double c = 2.0 * prefactor_ / width_;
    for (const auto& mu : means_) {
      const double dx = x[0] - mu[0], dy = x[1] - mu[1];
      const double e = std::exp(-(dx * dx + dy * dy) / width_);
      g[0] += c * e * dx;
      g[1] += c * e * dy;
    }
    return g;
  }

  // Second derivatives (Vxx, Vxy, Vyy).
  std::array<double, 3> hessian(const Vec2& x) const {
    std::array<double, 3> h{0.0, 0.0, 0.0};
    const double c = 2.0 * prefactor_ / width_;
    const double k = 2.0 / width_;
    for (const auto& mu : means_) {
      const double dx = x[0] - mu[0], dy = x[1] - mu[1];
      const double e = c * std::exp(-(dx * dx + dy * dy) / width_);
      h[0] += e * (1.0 - k * dx * dx);
      h[1] += e * (-k * dx * dy);
      h[2] += e * (1.0 - k * dy * dy);
    }
    return h;
  }

  // Identity of the potential as used in computation: means, A, sigma and the
  // exponent form. The seed and sampling rect are provenance only.
  std::string content_hash() const {
    Fnv1a h;
    h.update(static_cast<std::uint64_t>(means_.size()));
    h.update(amplitude_);
    h.update(sigma_);
    h.update(static_cast<std::uint64_t>(conventional_ ? 1 : 0));
    for (const auto& mu : means_) {
      h.update(mu[0]);
      h.update(mu[1]);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.digest()));
    return buf;
  }

  nlohmann::json to_json() const {
    nlohmann::json means = nlohmann::json::array();
    for (const auto& mu : means_) means.push_back({mu[0], mu[1]});
    return {{"seed", seed_},
            {"K", means_.size()},
            {"A", amplitude_},
            {"sigma", sigma_},
            {"sampling_rect", {rect_.x_min, rect_.y_min, rect_.x_max, rect_.y_max}},
            {"means", std::move(means)},
            {"conventional_exponent", conventional_}};
  }

  // Stored means are used verbatim; the seed is kept for provenance.
  static RandomPotential from_json(const nlohmann::json& j) {
    std::vector<Vec2> means;
    for (const auto& m : j.at("means")) {
      if (m.size() != 2) throw ConfigError("potential: each mean needs two coordinates");
      means.push_back({m[0].get<double>(), m[1].get<double>()});
    }
    if (j.contains("K") && j.at("K").get<std::size_t>() != means.size())
      throw ConfigError("potential: K does not match the number of means");
    Rect rect{};
    if (j.contains("sampling_rect")) {
      const auto& r = j.at("sampling_rect");
      if (r.size() != 4) throw ConfigError("potential: sampling_rect needs [x_min, y_min, x_max, y_max]");
      rect = {r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>()};
    }
    return RandomPotential(std::move(means), j.at("A").get<double>(), j.at("sigma").get<double>(),
                           j.value("seed", std::uint64_t{0}), rect,
                           j.value("conventional_exponent", false));
  }

 private:
  std::vector<Vec2> means_;
  double amplitude_;
  double sigma_;
  std::uint64_t seed_;
  Rect rect_;
  bool conventional_;
  double prefactor_;
  double width_;
};

// K means drawn i.i.d. uniform over the rect; x then y for each mean.
inline RandomPotential sample_potential(std::uint64_t seed, const PotentialParams& params) {
  if (params.count < 0) throw ConfigError("potential: K must be >= 0");
  if (!(params.sigma > 0.0)) throw ConfigError("potential: sigma must be > 0");
  if (params.sampling_rect.degenerate()) throw ConfigError("potential: degenerate sampling rect");
  Rng rng(seed);
  const auto& r = params.sampling_rect;
  std::vector<Vec2> means;
  means.reserve(static_cast<std::size_t>(params.count));
  for (int i = 0; i < params.count; ++i) {
    const double x = rng.uniform(r.x_min, r.x_max);
    const double y = rng.uniform(r.y_min, r.y_max);
    means.push_back({x, y});
  }
  return RandomPotential(std::move(means), params.amplitude, params.sigma, seed, r,
                         params.conventional_exponent);
}

inline double eval_potential(const RandomPotential& p, const Vec2& x) { return p.value(x); }
inline Vec2 grad_potential(const RandomPotential& p, const Vec2& x) { return p.gradient(x); }

}  // namespace branchflow
