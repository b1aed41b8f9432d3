#include <gtest/gtest.h>

#include <functional>

#include "branchflow/autodiff.hpp"
#include "branchflow/rng.hpp"
#include "support.hpp"

using namespace branchflow;
using namespace branchflow::ad;
using testing_support::rel_diff;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares reverse-mode gradients of every store tensor with central differences.
void check_gradients(ParameterStore& store, const Graph& f, double tol = 1e-6) {
  Tape tape;
  std::vector<Var> params;
  for (std::size_t i = 0; i < store.size(); ++i) params.push_back(tape.parameter(store, i));
  const auto grads = backward(tape, f(tape, params));

  auto eval = [&] {
    Tape t;
    std::vector<Var> ps;
    for (std::size_t i = 0; i < store.size(); ++i) ps.push_back(t.parameter(store, i));
    return t.value(f(t, ps))(0, 0);
  };
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Matrix* g = grads.find(store, i);
    ASSERT_NE(g, nullptr) << store[i].name();
    for (Eigen::Index k = 0; k < store[i].size(); ++k) {
      auto v = store[i].mutable_value();
      const double x0 = v.data()[k];
      const double h = 1e-6;
      v.data()[k] = x0 + h;
      const double up = eval();
      v.data()[k] = x0 - h;
      const double down = eval();
      v.data()[k] = x0;
      const double fd = (up - down) / (2 * h);
      EXPECT_LT(rel_diff(g->data()[k], fd, 1e-4), tol) << store[i].name() << "[" << k << "] " << g->data()[k] << " vs " << fd;
    }
  }
}

}  // namespace

TEST(Autodiff, ElementwiseAndReductionOps) {
  Rng rng(3);
  ParameterStore s;
  s.add("a", random_matrix(rng, 3, 4));
  s.add("b", random_matrix(rng, 3, 4));
  check_gradients(s, [](Tape& t, const std::vector<Var>& p) {
    Var x = add(t, cwise_mul(t, p[0], p[1]), scale(t, sub(t, p[0], p[1]), 0.7));
    return add(t, mean_square(t, x), add(t, sum(t, softplus(t, x)), mean(t, leaky_relu(t, x, 0.2))));
  });
}

TEST(Autodiff, MatmulBiasAndShapes) {
  Rng rng(4);
  ParameterStore s;
  s.add("x", random_matrix(rng, 5, 3));
  s.add("w", random_matrix(rng, 3, 2));
  s.add("b", random_matrix(rng, 1, 2));
  check_gradients(s, [](Tape& t, const std::vector<Var>& p) {
    Var y = affine(t, p[0], p[1], p[2]);
    Var z = hconcat(t, {columns(t, y, 1, 1), columns(t, y, 0, 1), y});
    Var w = vconcat(t, {z, scale(t, z, -2.0)});
    Vector rows = Vector::LinSpaced(10, 0.5, 1.5);
    return mean_square(t, scale_rows(t, w, rows));
  });
}

TEST(Autodiff, DualPropagationTracksTimeDerivative) {
  for (auto kind : {Activation::tanh, Activation::sin}) {
    Rng rng(5);
    const Matrix w1 = random_matrix(rng, 1, 6), b1 = random_matrix(rng, 1, 6);
    const Matrix w2 = random_matrix(rng, 6, 3), b2 = random_matrix(rng, 1, 3);
    auto forward = [&](const Vector& times) {
      Tape t;
      auto h = activation_forward(t, affine_forward(t, input_batch(t, times), t.constant(w1), t.constant(b1)), kind);
      auto o = affine_forward(t, h, t.constant(w2), t.constant(b2));
      return std::pair<Matrix, Matrix>{t.value(o.values), t.value(o.tangents)};
    };
    const Vector times = Vector::LinSpaced(7, 0.0, 1.0);
    const auto [vals, tans] = forward(times);
    const double h = 1e-6;
    const auto up = forward(times.array() + h).first;
    const auto down = forward(times.array() - h).first;
    const Matrix fd = (up - down) / (2 * h);
    for (Eigen::Index i = 0; i < fd.size(); ++i) EXPECT_LT(rel_diff(tans.data()[i], fd.data()[i], 1e-4), 1e-7);
    (void)vals;
  }
}

TEST(Autodiff, GradientFlowsThroughTangents) {
  // A loss on d/dt needs the second derivative of the activation.
  for (auto kind : {Activation::tanh, Activation::sin}) {
    Rng rng(6);
    ParameterStore s;
    s.add("w1", random_matrix(rng, 1, 5));
    s.add("b1", random_matrix(rng, 1, 5));
    s.add("w2", random_matrix(rng, 5, 2));
    s.add("b2", random_matrix(rng, 1, 2));
    const Vector times = Vector::LinSpaced(9, 0.0, 2.0);
    check_gradients(s, [&](Tape& t, const std::vector<Var>& p) {
      auto h = activation_forward(t, affine_forward(t, input_batch(t, times), p[0], p[1]), kind);
      h = activation_forward(t, h, kind);
      auto o = affine_forward(t, h, p[2], p[3]);
      return add(t, mean_square(t, o.tangents), mean_square(t, cwise_mul(t, o.values, o.tangents)));
    });
  }
}

TEST(Autodiff, BackwardRequiresScalarLoss) {
  ParameterStore s;
  s.add("a", Matrix::Ones(2, 2));
  Tape t;
  Var a = t.parameter(s, 0);
  EXPECT_THROW(backward(t, a), ContractError);
}

TEST(Autodiff, TapeIsSingleUse) {
  ParameterStore s;
  s.add("a", Matrix::Ones(2, 2));
  Tape t;
  Var l = sum(t, t.parameter(s, 0));
  backward(t, l);
  EXPECT_THROW(backward(t, l), ContractError);
}

TEST(Autodiff, VarsFromOtherTapesAreRejected) {
  Tape t1, t2;
  Var a = t1.constant(Matrix::Ones(1, 1));
  EXPECT_THROW(t2.value(a), ContractError);
}

TEST(Autodiff, FrozenTensorsGetNoGradient) {
  ParameterStore s;
  s.add("a", Matrix::Ones(2, 2));
  s.add("b", Matrix::Ones(2, 2), true);
  Tape t;
  Var l = sum(t, cwise_mul(t, t.parameter(s, 0), t.parameter(s, 1)));
  const auto g = backward(t, l);
  EXPECT_NE(g.find(s, 0), nullptr);
  EXPECT_EQ(g.find(s, 1), nullptr);
}

TEST(Autodiff, ShapeMismatchIsAnError) {
  Tape t;
  Var a = t.constant(Matrix::Ones(2, 3));
  Var b = t.constant(Matrix::Ones(2, 2));
  EXPECT_ANY_THROW(add(t, a, b));
  EXPECT_ANY_THROW(matmul(t, a, a));
  EXPECT_THROW(affine_forward(t, {a, a}, b, t.constant(Matrix::Ones(1, 2))), ConfigError);
}

TEST(Autodiff, SoftplusIsStableForLargeInputs) {
  Tape t;
  Matrix x(1, 3);
  x << -800.0, 0.0, 800.0;
  const Matrix y = t.value(softplus(t, t.constant(x)));
  EXPECT_NEAR(y(0, 0), 0.0, 1e-300);
  EXPECT_NEAR(y(0, 1), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(y(0, 2), 800.0);
}

TEST(ParameterStore, JsonRoundTripIsExact) {
  Rng rng(9);
  ParameterStore s;
  s.add("w", random_matrix(rng, 3, 5));
  s.add("f", random_matrix(rng, 1, 5), true);
  const auto back = ParameterStore::from_json(s.to_json());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].value(), s[0].value());
  EXPECT_TRUE(back[1].frozen());
  EXPECT_EQ(back.to_json().dump(), s.to_json().dump());
}

TEST(ParameterStore, DuplicateNamesRejected) {
  ParameterStore s;
  s.add("w", Matrix::Zero(1, 1));
  EXPECT_ANY_THROW(s.add("w", Matrix::Zero(1, 1)));
  EXPECT_ANY_THROW(s.index_of("missing"));
}
