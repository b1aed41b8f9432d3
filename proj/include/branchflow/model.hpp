#pragma once

// Shared-base, multi-head network. The base maps t through `hidden_layers`
// dense layers of width `hidden_width`; each head is a linear map from the
// last hidden activation to four outputs (x, y, px, py channels) and is bound
// to one initial condition z(0) = (0, y0, 1, 0). Outputs are reparametrized as
//
//   u~(t)  = z(0) + (1 - e^-t) u(t)
//   du~/dt = e^-t u(t) + (1 - e^-t) du/dt
//
// so u~(0) = z(0) for any parameters.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "branchflow/autodiff.hpp"
#include "branchflow/dynamics.hpp"
#include "branchflow/error.hpp"
#include "branchflow/rng.hpp"

namespace branchflow {

using ad::Activation;
using ad::DualBatch;
using ad::Matrix;
using ad::Tape;
using ad::Var;
using ad::Vector;

inline constexpr int kStateDim = 4;

struct ModelConfig {
  int hidden_layers = 5;
  int hidden_width = 40;
  Activation activation = Activation::tanh;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (hidden_layers < 1) throw ConfigError("model: hidden_layers must be >= 1");
    if (hidden_width < 1) throw ConfigError("model: hidden_width must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"hidden_layers", hidden_layers},
            {"hidden_width", hidden_width},
            {"activation", ad::to_string(activation)},
            {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.activation = ad::activation_from_string(j.value("activation", std::string("tanh")));
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
  }
};

struct Head {
  InitialCondition ic;
  std::size_t weight;
  std::size_t bias;
};

struct HeadInit {
  enum class Kind { random, copy_nearest };

  Kind kind = Kind::copy_nearest;
  std::uint64_t seed = 0;  // used by `random`, and by `copy_nearest` when no candidates exist
  // copy_nearest looks only at heads [0, candidates); default is every head.
  std::size_t candidates = std::numeric_limits<std::size_t>::max();

  static HeadInit random(std::uint64_t s) { return {Kind::random, s}; }
  static HeadInit copy_nearest(std::uint64_t fallback_seed = 0,
                               std::size_t candidates = std::numeric_limits<std::size_t>::max()) {
    return {Kind::copy_nearest, fallback_seed, candidates};
  }
};

// Output of a tape-free forward pass: values and d/dt, one row per time.
struct DualValues {
  Matrix values;
  Matrix tangents;
};

class MultiHeadNetwork {
 public:
  static MultiHeadNetwork init(const ModelConfig& config, std::span<const InitialCondition> ics) {
    config.validate();
    if (ics.empty()) throw ConfigError("init_model: at least one initial condition required");
    MultiHeadNetwork net;
    net.config_ = config;
    Rng rng = Rng::derive(config.init_seed, 0);
    int fan_in = 1;
    for (int l = 0; l < config.hidden_layers; ++l) {
      // Weights uniform with variance 1/fan_in; biases uniform in +-1/sqrt(fan_in).
      const double wb = std::sqrt(3.0 / fan_in);
      const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Matrix w(fan_in, config.hidden_width);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-wb, wb);
      Matrix b(1, config.hidden_width);
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.uniform(-bb, bb);
      net.base_.push_back(net.store_.add("base." + std::to_string(l) + ".weight", std::move(w)));
      net.base_.push_back(net.store_.add("base." + std::to_string(l) + ".bias", std::move(b)));
      fan_in = config.hidden_width;
    }
    for (std::size_t i = 0; i < ics.size(); ++i)
      net.add_head(ics[i], random_head(config.hidden_width, Rng::derive(config.init_seed, 1 + i)));
    return net;
  }

  static MultiHeadNetwork from_checkpoint(const nlohmann::json& j) {
    MultiHeadNetwork net;
    net.config_ = ModelConfig::from_json(j.at("config"));
    net.store_ = ad::ParameterStore::from_json(j);
    for (int l = 0; l < net.config_.hidden_layers; ++l) {
      const auto w = net.store_.index_of("base." + std::to_string(l) + ".weight");
      const auto b = net.store_.index_of("base." + std::to_string(l) + ".bias");
      const int fan_in = l == 0 ? 1 : net.config_.hidden_width;
      if (net.store_[w].rows() != fan_in || net.store_[w].cols() != net.config_.hidden_width ||
          net.store_[b].rows() != 1 || net.store_[b].cols() != net.config_.hidden_width)
        throw ConfigError("checkpoint: base layer " + std::to_string(l) + " has the wrong shape");
      net.base_.push_back(w);
      net.base_.push_back(b);
    }
    for (const auto& h : j.at("heads")) {
      Head head{{h.at("y0").get<double>()},
                net.store_.index_of(h.at("weight").get<std::string>()),
                net.store_.index_of(h.at("bias").get<std::string>())};
      if (net.store_[head.weight].rows() != net.config_.hidden_width ||
          net.store_[head.weight].cols() != kStateDim || net.store_[head.bias].rows() != 1 ||
          net.store_[head.bias].cols() != kStateDim)
        throw ConfigError("checkpoint: head has the wrong shape");
      net.heads_.push_back(head);
    }
    net.frozen_ = j.value("frozen_base", false);
    if (net.frozen_) net.freeze_base();
    return net;
  }

  // ParameterStore JSON plus {"config", "heads": [{"y0", "weight", "bias"}], "frozen_base"}.
  nlohmann::json to_checkpoint() const {
    nlohmann::json j = store_.to_json();
    j["config"] = config_.to_json();
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : heads_)
      heads.push_back({{"y0", h.ic.y0}, {"weight", store_[h.weight].name()}, {"bias", store_[h.bias].name()}});
    j["heads"] = std::move(heads);
    j["frozen_base"] = frozen_;
    return j;
  }

  const ModelConfig& config() const { return config_; }
  std::size_t head_count() const { return heads_.size(); }
  const Head& head(std::size_t i) const {
    check_head(i);
    return heads_[i];
  }
  std::span<const Head> heads() const { return heads_; }
  std::span<const std::size_t> base_tensors() const { return base_; }

  ad::ParameterStore& parameters() { return store_; }
  const ad::ParameterStore& parameters() const { return store_; }

  bool frozen_base() const { return frozen_; }

  // Idempotent; heads stay trainable.
  void freeze_base() {
    frozen_ = true;
    for (auto i : base_) store_[i].set_frozen(true);
  }

  std::size_t attach_head(const InitialCondition& ic, const HeadInit& init) {
    if (init.kind == HeadInit::Kind::copy_nearest) {
      if (auto src = nearest_head(ic.y0, init.candidates)) {
        HeadWeights w{store_[heads_[*src].weight].value(), store_[heads_[*src].bias].value()};
        return add_head(ic, std::move(w));
      }
    }
    return add_head(ic, random_head(config_.hidden_width, Rng::derive(init.seed, 0x4845414400ULL + heads_.size())));
  }

  // Head whose y0 is closest to `y0` among the first `limit` heads. Distances
  // within 1e-9 count as ties and go to the lower y0.
  std::optional<std::size_t> nearest_head(double y0, std::size_t limit = std::numeric_limits<std::size_t>::max()) const {
    const std::size_t n = std::min(limit, heads_.size());
    std::optional<std::size_t> best;
    double best_d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = std::abs(heads_[i].ic.y0 - y0);
      if (!best || d < best_d - 1e-9 ||
          (std::abs(d - best_d) <= 1e-9 && heads_[i].ic.y0 < heads_[*best].ic.y0)) {
        best = i;
        best_d = d;
      }
    }
    return best;
  }

  // Tensors optimized when training the given heads: the base unless frozen,
  // plus each head's weight and bias unless frozen.
  std::vector<std::size_t> trainable_tensors(std::span<const std::size_t> head_ids) const {
    std::vector<std::size_t> out;
    for (auto i : base_)
      if (!store_[i].frozen()) out.push_back(i);
    for (auto h : head_ids) {
      check_head(h);
      for (auto i : {heads_[h].weight, heads_[h].bias})
        if (!store_[i].frozen()) out.push_back(i);
    }
    return out;
  }

  // Checksum of the base tensors' raw bytes.
  std::uint64_t base_checksum() const {
    Fnv1a h;
    for (auto i : base_) {
      const auto& v = store_[i].value();
      h.update(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
    }
    return h.digest();
  }

  // --- tape forward ---------------------------------------------------------

  // Last hidden activation with d/dt; shared by every head.
  DualBatch base_forward(Tape& tape, const Vector& times) const {
    check_times(times);
    DualBatch h = ad::input_batch(tape, times);
    for (std::size_t l = 0; l < base_.size(); l += 2) {
      h = ad::affine_forward(tape, h, tape.parameter(store_, base_[l]), tape.parameter(store_, base_[l + 1]));
      h = ad::activation_forward(tape, h, config_.activation);
    }
    return h;
  }

  DualBatch head_forward(Tape& tape, std::size_t head_index, const DualBatch& features) const {
    check_head(head_index);
    const auto& h = heads_[head_index];
    return ad::affine_forward(tape, features, tape.parameter(store_, h.weight), tape.parameter(store_, h.bias));
  }

  // --- tape-free forward ----------------------------------------------------

  DualValues base_values(const Vector& times) const {
    check_times(times);
    DualValues h{times, Matrix::Ones(times.size(), 1)};
    for (std::size_t l = 0; l < base_.size(); l += 2) {
      const auto& w = store_[base_[l]].value();
      const auto& b = store_[base_[l + 1]].value();
      Matrix v = (h.values * w).rowwise() + b.row(0);
      Matrix t = h.tangents * w;
      ad::apply_activation(config_.activation, v, t);
      h = {std::move(v), std::move(t)};
    }
    return h;
  }

  DualValues head_values(std::size_t head_index, const DualValues& features) const {
    check_head(head_index);
    const auto& h = heads_[head_index];
    const auto& w = store_[h.weight].value();
    return {(features.values * w).rowwise() + store_[h.bias].value().row(0), features.tangents * w};
  }

  void check_head(std::size_t i) const {
    if (i >= heads_.size())
      throw ConfigError("head index " + std::to_string(i) + " out of range (L=" +
                        std::to_string(heads_.size()) + ")");
  }

 private:
  struct HeadWeights {
    Matrix weight;
    Matrix bias;
  };

  static HeadWeights random_head(int width, Rng rng) {
    const double bound = 0.1 / std::sqrt(static_cast<double>(width));
    HeadWeights w{Matrix(width, kStateDim), Matrix(1, kStateDim)};
    for (Eigen::Index i = 0; i < w.weight.size(); ++i) w.weight.data()[i] = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < w.bias.size(); ++i) w.bias.data()[i] = rng.uniform(-bound, bound);
    return w;
  }

  std::size_t add_head(const InitialCondition& ic, HeadWeights w) {
    // Names stay unique even if heads were loaded from a checkpoint.
    std::size_t n = heads_.size();
    while (store_.find("head." + std::to_string(n) + ".weight")) ++n;
    const auto wi = store_.add("head." + std::to_string(n) + ".weight", std::move(w.weight));
    const auto bi = store_.add("head." + std::to_string(n) + ".bias", std::move(w.bias));
    heads_.push_back({ic, wi, bi});
    return heads_.size() - 1;
  }

  static void check_times(const Vector& times) {
    if (!times.allFinite()) throw ConfigError("forward: times must be finite");
  }

  ModelConfig config_;
  ad::ParameterStore store_;
  std::vector<std::size_t> base_;
  std::vector<Head> heads_;
  bool frozen_ = false;
};

inline MultiHeadNetwork init_model(const ModelConfig& config, std::span<const InitialCondition> ics) {
  return MultiHeadNetwork::init(config, ics);
}

// --- raw and reparametrized outputs -------------------------------------------

inline DualBatch raw_forward(Tape& tape, const MultiHeadNetwork& net, std::size_t head, const Vector& times) {
  net.check_head(head);
  return net.head_forward(tape, head, net.base_forward(tape, times));
}

inline DualValues raw_forward(const MultiHeadNetwork& net, std::size_t head, const Vector& times) {
  net.check_head(head);
  return net.head_values(head, net.base_values(times));
}

// Reparametrized solution and its time derivative for one head.
struct Reparametrized {
  Var state;       // N x 4
  Var derivative;  // N x 4
};

inline Reparametrized reparametrize(Tape& tape, const InitialCondition& ic, const DualBatch& raw, const Vector& times) {
  const Vector decay = (-times.array()).exp().matrix();
  const Vector ramp = (1.0 - decay.array()).matrix();
  const auto z = ic.state().as_array();
  Matrix z_row(1, kStateDim);
  z_row << z[0], z[1], z[2], z[3];
  Var state = ad::add_row(tape, ad::scale_rows(tape, raw.values, ramp), tape.constant(z_row));
  Var derivative = ad::add(tape, ad::scale_rows(tape, raw.values, decay), ad::scale_rows(tape, raw.tangents, ramp));
  return {state, derivative};
}

inline Reparametrized reparametrized_forward(Tape& tape, const MultiHeadNetwork& net, std::size_t head,
                                             const Vector& times) {
  return reparametrize(tape, net.head(head).ic, raw_forward(tape, net, head, times), times);
}

struct StateBatch {
  Matrix state;       // N x 4 rows of (x, y, px, py)
  Matrix derivative;  // N x 4
};

inline StateBatch reparametrize(const InitialCondition& ic, const DualValues& raw, const Vector& times) {
  const Vector decay = (-times.array()).exp().matrix();
  const Vector ramp = (1.0 - decay.array()).matrix();
  const auto z = ic.state().as_array();
  StateBatch out{ramp.asDiagonal() * raw.values, decay.asDiagonal() * raw.values + ramp.asDiagonal() * raw.tangents};
  for (int c = 0; c < kStateDim; ++c) out.state.col(c).array() += z[static_cast<std::size_t>(c)];
  return out;
}

inline StateBatch reparametrized_forward(const MultiHeadNetwork& net, std::size_t head, const Vector& times) {
  return reparametrize(net.head(head).ic, raw_forward(net, head, times), times);
}

// Network solution for one head as a trajectory on the given (increasing) times.
inline Trajectory network_trajectory(const MultiHeadNetwork& net, std::size_t head, const Vector& times) {
  const auto sb = reparametrized_forward(net, head, times);
  Trajectory tr;
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    tr.times.push_back(times[i]);
    tr.states.push_back({sb.state(i, 0), sb.state(i, 1), sb.state(i, 2), sb.state(i, 3)});
  }
  return tr;
}

inline Vector linspace(double lo, double hi, Eigen::Index n) {
  if (n == 1) return Vector::Constant(1, lo);
  return Vector::LinSpaced(n, lo, hi);
}

}  // namespace branchflow
