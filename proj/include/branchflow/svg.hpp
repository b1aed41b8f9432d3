#pragma once

// Static SVG output: ray trajectories over the potential, and loss curves.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "branchflow/dynamics.hpp"
#include "branchflow/potential.hpp"

namespace branchflow::svg {

// Viridis, sampled at 9 stops and interpolated linearly.
inline std::string viridis(double v) {
  static constexpr std::array<std::array<double, 3>, 9> stops{{{68, 1, 84},
                                                               {71, 44, 122},
                                                               {59, 81, 139},
                                                               {44, 113, 142},
                                                               {33, 144, 141},
                                                               {39, 173, 129},
                                                               {92, 200, 99},
                                                               {170, 220, 50},
                                                               {253, 231, 37}}};
  v = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0) * (stops.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(v), stops.size() - 2);
  const double f = v - static_cast<double>(i);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))),
                static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))),
                static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))));
  return buf;
}

struct TrajectoryPlotOptions {
  Rect window{};
  int samples = 120;  // background samples per axis
  double size = 600.0;
};

// Potential as a sampled color grid, base rays in black, transfer rays in blue.
inline std::string trajectory_plot(const RandomPotential& p, const std::vector<Trajectory>& base,
                                   const std::vector<Trajectory>& transfer, const TrajectoryPlotOptions& opt = {}) {
  const auto& w = opt.window;
  const double sx = opt.size / (w.x_max - w.x_min);
  const double sy = opt.size / (w.y_max - w.y_min);
  auto px = [&](double x) { return (x - w.x_min) * sx; };
  auto py = [&](double y) { return opt.size - (y - w.y_min) * sy; };

  const int n = opt.samples;
  std::vector<double> v(static_cast<std::size_t>(n * n));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const double x = w.x_min + (i + 0.5) * (w.x_max - w.x_min) / n;
      const double y = w.y_min + (j + 0.5) * (w.y_max - w.y_min) / n;
      const double val = p.value({x, y});
      v[static_cast<std::size_t>(j * n + i)] = val;
      lo = std::min(lo, val);
      hi = std::max(hi, val);
    }
  const double span = hi > lo ? hi - lo : 1.0;

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.size << "\" height=\"" << opt.size
     << "\" viewBox=\"0 0 " << opt.size << ' ' << opt.size << "\">\n";
  os << "<defs><clipPath id=\"window\"><rect x=\"0\" y=\"0\" width=\"" << opt.size << "\" height=\"" << opt.size
     << "\"/></clipPath></defs>\n<g id=\"potential\" shape-rendering=\"crispEdges\">\n";
  const double cw = opt.size / n;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i)
      os << "<rect x=\"" << i * cw << "\" y=\"" << opt.size - (j + 1) * cw << "\" width=\"" << cw + 0.05
         << "\" height=\"" << cw + 0.05 << "\" fill=\"" << viridis((v[static_cast<std::size_t>(j * n + i)] - lo) / span)
         << "\"/>\n";
  os << "</g>\n";

  auto rays = [&](const std::vector<Trajectory>& trs, const char* id, const char* color, double width) {
    os << "<g id=\"" << id << "\" clip-path=\"url(#window)\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"" << width << "\">\n";
    for (const auto& tr : trs) {
      os << "<polyline points=\"";
      for (const auto& s : tr.states) os << px(s.x) << ',' << py(s.y) << ' ';
      os << "\"/>\n";
    }
    os << "</g>\n";
  };
  rays(transfer, "transfer", "#1f4fd8", 0.8);
  rays(base, "base", "#000000", 1.6);
  os << "</svg>\n";
  return os.str();
}

struct Series {
  std::string label;
  std::vector<double> values;
};

// Log-scale loss against epoch, one labelled polyline per series.
inline std::string loss_plot(const std::vector<Series>& series, double width = 720.0, double height = 440.0) {
  static constexpr std::array<const char*, 6> colors{"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const double left = 70, right = 160, top = 20, bottom = 50;
  std::size_t max_len = 1;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : series) {
    max_len = std::max(max_len, s.values.size());
    for (double v : s.values)
      if (v > 0.0 && std::isfinite(v)) {
        lo = std::min(lo, std::log10(v));
        hi = std::max(hi, std::log10(v));
      }
  }
  if (!std::isfinite(lo)) lo = -1.0, hi = 0.0;
  lo = std::floor(lo);
  hi = std::max(std::ceil(hi), lo + 1.0);
  const double pw = width - left - right, ph = height - top - bottom;
  auto X = [&](double e) { return left + pw * (max_len > 1 ? (e - 1.0) / static_cast<double>(max_len - 1) : 0.0); };
  auto Y = [&](double lg) { return top + ph * (hi - lg) / (hi - lo); };

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  os << "<g id=\"axes\" stroke=\"#444\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\"/>\n";
  for (double d = lo; d <= hi + 1e-9; d += 1.0)
    os << "<text x=\"" << left - 8 << "\" y=\"" << Y(d) + 4 << "\" text-anchor=\"end\" stroke=\"none\">1e"
       << static_cast<int>(d) << "</text>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\" stroke=\"none\">epoch (1.."
     << max_len << ")</text>\n";
  os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2
     << ")\" text-anchor=\"middle\" stroke=\"none\">mean squared residual</text>\n</g>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = colors[k % colors.size()];
    os << "<g class=\"series\"><polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < s.values.size(); ++i)
      if (s.values[i] > 0.0 && std::isfinite(s.values[i]))
        os << X(static_cast<double>(i + 1)) << ',' << Y(std::log10(s.values[i])) << ' ';
    os << "\"/>\n<text x=\"" << left + pw + 12 << "\" y=\"" << top + 16 + 18.0 * k << "\" fill=\"" << color
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.label << "</text></g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace branchflow::svg
