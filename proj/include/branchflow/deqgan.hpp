#pragma once

// Adversarial training of the network solution. Each residual row (r1..r4 at
// one time, one head) is a "fake" sample; zero-centred Gaussian noise rows are
// "real". The discriminator learns to tell them apart and the generator (the
// multi-head network) is updated to make its residuals pass as noise.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "branchflow/adam.hpp"
#include "branchflow/autodiff.hpp"
#include "branchflow/model.hpp"
#include "branchflow/training.hpp"

namespace branchflow {

struct DeqganConfig {
  double noise_std = 0.1;
  double noise_decay = 0.5;
  int noise_decay_every = 4000;  // epochs; 0 disables decay
  std::vector<int> discriminator_layers{32, 32, 32};
  double leaky_slope = 0.2;
  double generator_lr = 1e-3;
  double discriminator_lr = 1e-3;
  // Add fresh N(0, noise_std^2) to the fake rows as well, so a zero residual
  // is distributed exactly like the real samples.
  bool instance_noise = true;
  // Divide discriminator inputs by the current noise std.
  bool standardize_input = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(noise_std > 0.0)) throw ConfigError("deqgan: noise_std must be > 0");
    if (!(noise_decay > 0.0)) throw ConfigError("deqgan: noise_decay must be > 0");
    if (noise_decay_every < 0) throw ConfigError("deqgan: noise_decay_every must be >= 0");
    if (!(generator_lr > 0.0) || !(discriminator_lr > 0.0)) throw ConfigError("deqgan: learning rates must be > 0");
    for (int w : discriminator_layers)
      if (w < 1) throw ConfigError("deqgan: discriminator layer widths must be >= 1");
  }

  double noise_at(int epoch) const {
    if (noise_decay_every <= 0) return noise_std;
    return noise_std * std::pow(noise_decay, static_cast<double>((epoch - 1) / noise_decay_every));
  }

  nlohmann::json to_json() const {
    return {{"noise_std", noise_std},
            {"noise_decay", noise_decay},
            {"noise_decay_every", noise_decay_every},
            {"discriminator_layers", discriminator_layers},
            {"leaky_slope", leaky_slope},
            {"generator_lr", generator_lr},
            {"discriminator_lr", discriminator_lr},
            {"instance_noise", instance_noise},
            {"standardize_input", standardize_input},
            {"seed", seed}};
  }

  static DeqganConfig from_json(const nlohmann::json& j) {
    DeqganConfig c;
    c.noise_std = j.value("noise_std", c.noise_std);
    c.noise_decay = j.value("noise_decay", c.noise_decay);
    c.noise_decay_every = j.value("noise_decay_every", c.noise_decay_every);
    c.discriminator_layers = j.value("discriminator_layers", c.discriminator_layers);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.generator_lr = j.value("generator_lr", c.generator_lr);
    c.discriminator_lr = j.value("discriminator_lr", c.discriminator_lr);
    c.instance_noise = j.value("instance_noise", c.instance_noise);
    c.standardize_input = j.value("standardize_input", c.standardize_input);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

// Dense leaky-ReLU classifier on single 4-component residual rows; one logit
// per row, positive meaning "real".
class Discriminator {
 public:
  Discriminator(const std::vector<int>& hidden, double leaky_slope, std::uint64_t seed) : slope_(leaky_slope) {
    Rng rng = Rng::derive(seed, 0x44495343ULL);
    int fan_in = kStateDim;
    std::vector<int> widths = hidden;
    widths.push_back(1);
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const double bound = std::sqrt(6.0 / (fan_in + widths[l]));
      Matrix w(fan_in, widths[l]);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
      layers_.push_back(store_.add("disc." + std::to_string(l) + ".weight", std::move(w)));
      layers_.push_back(store_.add("disc." + std::to_string(l) + ".bias", Matrix::Zero(1, widths[l])));
      fan_in = widths[l];
    }
  }

  explicit Discriminator(const DeqganConfig& c) : Discriminator(c.discriminator_layers, c.leaky_slope, c.seed) {}

  // With `trainable` false the weights enter the tape as constants, so the
  // generator pass does not compute discriminator gradients.
  Var logits(Tape& tape, Var rows, bool trainable) const {
    Var h = rows;
    for (std::size_t l = 0; l < layers_.size(); l += 2) {
      Var w = trainable ? tape.parameter(store_, layers_[l]) : tape.constant(store_[layers_[l]].value());
      Var b = trainable ? tape.parameter(store_, layers_[l + 1]) : tape.constant(store_[layers_[l + 1]].value());
      h = ad::affine(tape, h, w, b);
      if (l + 2 < layers_.size()) h = ad::leaky_relu(tape, h, slope_);
    }
    return h;
  }

  Vector logits(const Matrix& rows) const {
    Matrix h = rows;
    for (std::size_t l = 0; l < layers_.size(); l += 2) {
      h = (h * store_[layers_[l]].value()).rowwise() + store_[layers_[l + 1]].value().row(0);
      if (l + 2 < layers_.size()) h = h.unaryExpr([s = slope_](double x) { return x > 0.0 ? x : s * x; });
    }
    return h.col(0);
  }

  ad::ParameterStore& parameters() { return store_; }
  const ad::ParameterStore& parameters() const { return store_; }
  std::vector<std::size_t> tensors() const { return layers_; }

 private:
  ad::ParameterStore store_;
  std::vector<std::size_t> layers_;
  double slope_;
};

// Fraction of rows classified correctly (logit > 0 means "real").
inline double discriminator_accuracy(const Discriminator& d, const Matrix& real, const Matrix& fake) {
  const Vector lr = d.logits(real);
  const Vector lf = d.logits(fake);
  const auto correct = (lr.array() > 0.0).count() + (lf.array() <= 0.0).count();
  return static_cast<double>(correct) / static_cast<double>(lr.size() + lf.size());
}

// Binary cross-entropy of the discriminator: real rows labelled 1, fake 0.
inline Var discriminator_loss(Tape& tape, const Discriminator& d, const Matrix& real, const Matrix& fake) {
  Var lr = d.logits(tape, tape.constant(real), true);
  Var lf = d.logits(tape, tape.constant(fake), true);
  return ad::add(tape, ad::mean(tape, ad::softplus(tape, ad::scale(tape, lr, -1.0))),
                 ad::mean(tape, ad::softplus(tape, lf)));
}

// Non-saturating generator loss: -log sigmoid(D(fake)).
inline Var generator_loss(Tape& tape, const Discriminator& d, Var fake_rows) {
  return ad::mean(tape, ad::softplus(tape, ad::scale(tape, d.logits(tape, fake_rows, false), -1.0)));
}

// Discriminator side of the game with its own optimizer and noise stream.
// Rows reach the discriminator as (residual [+ instance noise]) / noise_std
// when `standardize_input` is set, so real rows are always N(0, I).
class DiscriminatorTrainer {
 public:
  DiscriminatorTrainer(Discriminator& d, const DeqganConfig& cfg, const AdamConfig& adam = {})
      : d_(d), cfg_(cfg), adam_(adam), state_(d.parameters(), d.tensors()), noise_(Rng::derive(cfg.seed, 0x4e4f495345ULL)) {}

  Matrix sample_noise(Eigen::Index rows, double std) {
    Matrix m(rows, kStateDim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = noise_.normal(0.0, std);
    return m;
  }

  double input_scale(double noise_std) const { return cfg_.standardize_input ? 1.0 / noise_std : 1.0; }

  // Residual rows as the discriminator sees them.
  Matrix fake_input(const Matrix& residual, double noise_std) {
    Matrix f = cfg_.instance_noise ? Matrix(residual + sample_noise(residual.rows(), noise_std)) : residual;
    return input_scale(noise_std) * f;
  }

  // Tape version for the generator pass.
  Var fake_input(Tape& tape, Var residual, double noise_std) {
    Var f = residual;
    if (cfg_.instance_noise) f = ad::add(tape, f, tape.constant(sample_noise(tape.value(residual).rows(), noise_std)));
    return cfg_.standardize_input ? ad::scale(tape, f, input_scale(noise_std)) : f;
  }

  // One update against the residual rows; returns the accuracy on this batch
  // after the step.
  double step(const Matrix& residual, double noise_std) {
    const Matrix real = input_scale(noise_std) * sample_noise(residual.rows(), noise_std);
    const Matrix fake = fake_input(residual, noise_std);
    Tape tape;
    Var loss = discriminator_loss(tape, d_, real, fake);
    const auto grads = ad::backward(tape, loss);
    adam_step(d_.parameters(), grads, state_, cfg_.discriminator_lr, adam_);
    return discriminator_accuracy(d_, real, fake);
  }

 private:
  Discriminator& d_;
  DeqganConfig cfg_;
  AdamConfig adam_;
  AdamState state_;
  Rng noise_;
};

// Adversarial training of the given heads (and the base unless frozen). The
// report's loss curve is the mean squared residual on the evaluation grid, so
// it is directly comparable with train_heads.
inline TrainingReport deqgan_train_heads(MultiHeadNetwork& net, std::span<const std::size_t> heads,
                                         const RandomPotential& p, const DeqganConfig& dcfg,
                                         const TrainingConfig& cfg, std::uint64_t sampler_stream = 0) {
  dcfg.validate();
  cfg.validate();
  if (heads.empty()) throw ConfigError("deqgan: no heads selected");
  std::vector<std::size_t> head_ids(heads.begin(), heads.end());
  Discriminator disc(dcfg);
  DiscriminatorTrainer disc_trainer(disc, dcfg, cfg.adam);
  AdamState gen_state(net.parameters(), net.trainable_tensors(head_ids));
  CollocationSampler sampler(cfg, sampler_stream);
  GridEvaluator eval(net, p, cfg);
  std::vector<double> accuracy;

  auto report = detail::run_epochs(
      cfg,
      [&](int epoch) {
        const Vector times = sampler.next();
        Tape tape;
        const DualBatch features = features_for(tape, net, times);
        std::vector<Var> rows;
        rows.reserve(head_ids.size());
        for (auto h : head_ids) {
          const auto sol = reparametrize(tape, net.head(h).ic, net.head_forward(tape, h, features), times);
          rows.push_back(residual_var(tape, sol, p));
        }
        Var fake = rows.size() == 1 ? rows[0] : ad::vconcat(tape, rows);
        const Matrix fake_values = tape.value(fake);
        if (!fake_values.allFinite()) return std::numeric_limits<double>::quiet_NaN();

        const double noise = dcfg.noise_at(epoch);
        accuracy.push_back(disc_trainer.step(fake_values, noise));
        Var loss = generator_loss(tape, disc, disc_trainer.fake_input(tape, fake, noise));
        const double value = tape.value(loss)(0, 0);
        const auto grads = ad::backward(tape, loss);
        adam_step(net.parameters(), grads, gen_state, dcfg.generator_lr, cfg.adam);
        return value;
      },
      [&] { return eval(head_ids); });
  report.discriminator_accuracy = std::move(accuracy);
  return report;
}

inline TrainingReport deqgan_train(MultiHeadNetwork& net, const RandomPotential& p, const DeqganConfig& dcfg,
                                   const TrainingConfig& cfg) {
  if (net.frozen_base()) throw ContractError("deqgan_train: base is frozen");
  std::vector<std::size_t> heads(net.head_count());
  for (std::size_t i = 0; i < heads.size(); ++i) heads[i] = i;
  return deqgan_train_heads(net, heads, p, dcfg, cfg);
}

}  // namespace branchflow
