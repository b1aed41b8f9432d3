#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <json.hpp>

#include "branchflow/autodiff.hpp"
#include "branchflow/error.hpp"

namespace branchflow {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  nlohmann::json to_json() const { return {{"beta1", beta1}, {"beta2", beta2}, {"epsilon", epsilon}}; }
  static AdamConfig from_json(const nlohmann::json& j) {
    AdamConfig c;
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    return c;
  }
};

// First and second moments for a fixed list of tensors of one store.
struct AdamState {
  std::vector<std::size_t> tensors;
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  long step = 0;

  AdamState() = default;
  AdamState(const ad::ParameterStore& store, std::vector<std::size_t> which) : tensors(std::move(which)) {
    for (auto i : tensors) {
      m.push_back(ad::Matrix::Zero(store[i].rows(), store[i].cols()));
      v.push_back(ad::Matrix::Zero(store[i].rows(), store[i].cols()));
    }
  }
};

// One bias-corrected Adam update. Frozen tensors are skipped; tensors absent
// from `grads` are treated as having zero gradient.
inline void adam_step(ad::ParameterStore& store, const ad::GradientMap& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (state.m.size() != state.tensors.size() || state.v.size() != state.tensors.size())
    throw ConfigError("adam_step: state does not match its tensor list");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < state.tensors.size(); ++k) {
    auto& t = store[state.tensors[k]];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.rows() != t.rows() || m.cols() != t.cols() || v.rows() != t.rows() || v.cols() != t.cols())
      throw ConfigError("adam_step: moment shape mismatch for " + t.name());
    if (t.frozen()) continue;
    const ad::Matrix* g = grads.find(store, state.tensors[k]);
    if (g && (g->rows() != t.rows() || g->cols() != t.cols()))
      throw ConfigError("adam_step: gradient shape mismatch for " + t.name());
    if (g) {
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * *g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g->cwiseProduct(*g);
    } else {
      m *= cfg.beta1;
      v *= cfg.beta2;
    }
    auto p = t.mutable_value();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  }
}

}  // namespace branchflow
