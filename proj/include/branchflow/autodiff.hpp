#pragma once

// Matrix-level automatic differentiation.
//
// Networks here take a single scalar input t. Derivatives with respect to t
// are carried forward alongside values (a DualBatch holds value and d/dt for
// every activation), and the combined value+tangent computation is recorded
// on a GradientTape so a scalar loss built from both can be differentiated in
// reverse with respect to every parameter tensor.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "branchflow/error.hpp"

namespace branchflow::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Json = nlohmann::json;

inline std::string shape_string(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

// A named parameter tensor. Shape is fixed at construction; values can be
// mutated through a fixed-size view only.
class Tensor {
 public:
  Tensor(std::string name, Matrix value, bool frozen = false)
      : name_(std::move(name)), value_(std::move(value)), frozen_(frozen) {}

  const std::string& name() const { return name_; }
  Eigen::Index rows() const { return value_.rows(); }
  Eigen::Index cols() const { return value_.cols(); }
  Eigen::Index size() const { return value_.size(); }

  const Matrix& value() const { return value_; }
  Eigen::Map<Matrix> mutable_value() { return {value_.data(), value_.rows(), value_.cols()}; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }

 private:
  std::string name_;
  Matrix value_;
  bool frozen_;
};

class ParameterStore {
 public:
  std::size_t add(std::string name, Matrix value, bool frozen = false) {
    if (find(name)) throw ConfigError("duplicate tensor name: " + name);
    tensors_.emplace_back(std::move(name), std::move(value), frozen);
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  Tensor& operator[](std::size_t i) { return tensors_.at(i); }
  const Tensor& operator[](std::size_t i) const { return tensors_.at(i); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].name() == name) return i;
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    auto i = find(name);
    if (!i) throw ConfigError("unknown tensor: " + std::string(name));
    return *i;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  // {"tensors": [{"name", "shape": [r, c], "frozen", "data": row-major}]}
  Json to_json() const {
    Json arr = Json::array();
    for (const auto& t : tensors_) {
      Json data = Json::array();
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) data.push_back(t.value()(r, c));
      arr.push_back({{"name", t.name()},
                     {"shape", {t.rows(), t.cols()}},
                     {"frozen", t.frozen()},
                     {"data", std::move(data)}});
    }
    return Json{{"tensors", std::move(arr)}};
  }

  static ParameterStore from_json(const Json& j) {
    ParameterStore store;
    for (const auto& t : j.at("tensors")) {
      const auto& shape = t.at("shape");
      if (shape.size() != 2) throw ConfigError("tensor shape must have two entries");
      const auto rows = shape[0].get<Eigen::Index>();
      const auto cols = shape[1].get<Eigen::Index>();
      const auto& data = t.at("data");
      if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw ConfigError("tensor data length does not match shape for " +
                          t.at("name").get<std::string>());
      Matrix m(rows, cols);
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
      store.add(t.at("name").get<std::string>(), std::move(m), t.value("frozen", false));
    }
    return store;
  }

 private:
  std::vector<Tensor> tensors_;
};

// Handle to a node on a specific tape.
struct Var {
  std::uint64_t tape = 0;
  std::size_t id = 0;
};

class GradientMap {
 public:
  struct Entry {
    const ParameterStore* store;
    std::size_t index;
    Matrix grad;
  };

  const Matrix* find(const ParameterStore& store, std::size_t index) const {
    for (const auto& e : entries_)
      if (e.store == &store && e.index == index) return &e.grad;
    return nullptr;
  }

  void accumulate(const ParameterStore& store, std::size_t index, const Matrix& g) {
    for (auto& e : entries_)
      if (e.store == &store && e.index == index) {
        e.grad += g;
        return;
      }
    entries_.push_back({&store, index, g});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
};

class Tape;
GradientMap backward(Tape& tape, Var loss);

// Records primitive operations for one training step.
class Tape {
 public:
  // Receives the upstream adjoint of the node; must push adjoints into the
  // node's parents through Tape::accumulate.
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() : serial_(next_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var record(Matrix value, bool requires_grad, Backward backward_fn) {
    ensure_open();
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return {serial_, nodes_.size() - 1};
  }

  Var constant(Matrix value) { return record(std::move(value), false, nullptr); }

  Var parameter(const ParameterStore& store, std::size_t index) {
    const Tensor& t = store[index];
    Var v = record(t.value(), !t.frozen(), nullptr);
    auto& n = nodes_[v.id];
    n.store = &store;
    n.param_index = index;
    return v;
  }

  const Matrix& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool requires_any(std::initializer_list<Var> vs) const {
    return std::any_of(vs.begin(), vs.end(), [&](Var v) { return requires_grad(v); });
  }

  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t serial() const { return serial_; }

  void check(Var v) const {
    if (v.tape != serial_ || v.id >= nodes_.size())
      throw ContractError("variable is not recorded on this tape");
  }

 private:
  friend GradientMap backward(Tape&, Var);

  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    const ParameterStore* store = nullptr;
    std::size_t param_index = 0;
  };

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  void ensure_open() const {
    if (consumed_) throw ContractError("tape already consumed by backward()");
  }

  Node& node(Var v) {
    check(v);
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    check(v);
    return nodes_[v.id];
  }

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Reverse sweep from a scalar node. Returns d(loss)/d(p) for every non-frozen
// parameter that the loss depends on; repeated uses of a tensor accumulate.
// The tape is consumed.
inline GradientMap backward(Tape& tape, Var loss) {
  tape.check(loss);
  tape.ensure_open();
  auto& root = tape.nodes_[loss.id];
  if (root.value.rows() != 1 || root.value.cols() != 1)
    throw ContractError("backward() needs a scalar loss, got " +
                        shape_string(root.value.rows(), root.value.cols()));
  GradientMap grads;
  if (root.requires_grad) {
    root.grad = Matrix::Ones(1, 1);
    root.has_grad = true;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = tape.nodes_[i];
      if (!n.requires_grad || !n.has_grad) continue;
      if (n.backward) {
        // Hand over the adjoint; parents always have smaller ids.
        Matrix g = std::move(n.grad);
        n.has_grad = false;
        n.backward(tape, g);
      } else if (n.store) {
        grads.accumulate(*n.store, n.param_index, n.grad);
      }
    }
  }
  tape.consumed_ = true;
  return grads;
}

// ---------------------------------------------------------------------------
// Primitive operations

inline void require_same_shape(const Tape& t, Var a, Var b, const char* op) {
  const auto& x = t.value(a);
  const auto& y = t.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(x.rows(), x.cols()) +
                      " vs " + shape_string(y.rows(), y.cols()));
}

inline Var matmul(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows())
    throw ConfigError("matmul: shape mismatch " + shape_string(A.rows(), A.cols()) + " * " +
                      shape_string(B.rows(), B.cols()));
  return t.record(A * B, t.requires_any({a, b}), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

// a + row, with the 1xC row broadcast over every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  const auto& A = t.value(a);
  const auto& R = t.value(row);
  if (R.rows() != 1 || R.cols() != A.cols())
    throw ConfigError("add_row: expected row of width " + std::to_string(A.cols()) + ", got " +
                      shape_string(R.rows(), R.cols()));
  Matrix out = A.rowwise() + R.row(0);
  return t.record(std::move(out), t.requires_any({a, row}), [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

inline Var add(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "add");
  return t.record(t.value(a) + t.value(b), t.requires_any({a, b}),
                  [a, b](Tape& tp, const Matrix& g) {
                    tp.accumulate(a, g);
                    tp.accumulate(b, g);
                  });
}

inline Var sub(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "sub");
  return t.record(t.value(a) - t.value(b), t.requires_any({a, b}),
                  [a, b](Tape& tp, const Matrix& g) {
                    tp.accumulate(a, g);
                    if (tp.requires_grad(b)) tp.accumulate(b, -g);
                  });
}

inline Var cwise_mul(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "cwise_mul");
  Matrix out = t.value(a).cwiseProduct(t.value(b));
  return t.record(std::move(out), t.requires_any({a, b}), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

inline Var scale(Tape& t, Var a, double c) {
  return t.record(c * t.value(a), t.requires_grad(a),
                  [a, c](Tape& tp, const Matrix& g) { tp.accumulate(a, c * g); });
}

// Row i of a multiplied by the constant s[i].
inline Var scale_rows(Tape& t, Var a, const Vector& s) {
  const auto& A = t.value(a);
  if (s.size() != A.rows())
    throw ConfigError("scale_rows: " + std::to_string(s.size()) + " scales for " +
                      std::to_string(A.rows()) + " rows");
  Matrix out = s.asDiagonal() * A;
  return t.record(std::move(out), t.requires_grad(a), [a, s](Tape& tp, const Matrix& g) {
    tp.accumulate(a, s.asDiagonal() * g);
  });
}

inline Var columns(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const auto& A = t.value(a);
  if (start < 0 || count < 0 || start + count > A.cols())
    throw ConfigError("columns: range out of bounds");
  const Eigen::Index rows = A.rows(), cols = A.cols();
  return t.record(A.middleCols(start, count), t.requires_grad(a),
                  [a, start, count, rows, cols](Tape& tp, const Matrix& g) {
                    Matrix full = Matrix::Zero(rows, cols);
                    full.middleCols(start, count) = g;
                    tp.accumulate(a, full);
                  });
}

inline Var hconcat(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("hconcat: no inputs");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool req = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw ConfigError("hconcat: row count mismatch");
    cols += t.value(p).cols();
    req = req || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, t.value(p).cols()) = t.value(p);
    c += t.value(p).cols();
  }
  return t.record(std::move(out), req, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index c0 = 0;
    for (Var p : parts) {
      const auto w = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(c0, w));
      c0 += w;
    }
  });
}

// Stacks inputs with equal column counts on top of each other.
inline Var vconcat(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("vconcat: no inputs");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  bool req = false;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw ConfigError("vconcat: column count mismatch");
    rows += t.value(p).rows();
    req = req || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  return t.record(std::move(out), req, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index r0 = 0;
    for (Var p : parts) {
      const auto h = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(r0, h));
      r0 += h;
    }
  });
}

inline Var sum(Tape& t, Var a) {
  const auto& A = t.value(a);
  const Eigen::Index rows = A.rows(), cols = A.cols();
  return t.record(Matrix::Constant(1, 1, A.sum()), t.requires_grad(a),
                  [a, rows, cols](Tape& tp, const Matrix& g) {
                    tp.accumulate(a, Matrix::Constant(rows, cols, g(0, 0)));
                  });
}

inline Var mean(Tape& t, Var a) {
  const auto& A = t.value(a);
  if (A.size() == 0) throw ConfigError("mean: empty input");
  const Eigen::Index rows = A.rows(), cols = A.cols();
  const double n = static_cast<double>(A.size());
  return t.record(Matrix::Constant(1, 1, A.sum() / n), t.requires_grad(a),
                  [a, rows, cols, n](Tape& tp, const Matrix& g) {
                    tp.accumulate(a, Matrix::Constant(rows, cols, g(0, 0) / n));
                  });
}

// Mean of squared entries.
inline Var mean_square(Tape& t, Var a) {
  const auto& A = t.value(a);
  if (A.size() == 0) throw ConfigError("mean_square: empty input");
  const double n = static_cast<double>(A.size());
  return t.record(Matrix::Constant(1, 1, A.squaredNorm() / n), t.requires_grad(a),
                  [a, n](Tape& tp, const Matrix& g) {
                    tp.accumulate(a, (2.0 * g(0, 0) / n) * tp.value(a));
                  });
}

// log(1 + e^x), evaluated without overflow.
inline Var softplus(Tape& t, Var a) {
  const auto& A = t.value(a);
  Matrix out = A.unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
    Matrix sig = tp.value(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    tp.accumulate(a, g.cwiseProduct(sig));
  });
}

inline Var leaky_relu(Tape& t, Var a, double slope) {
  const auto& A = t.value(a);
  Matrix out = A.unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
  return t.record(std::move(out), t.requires_grad(a), [a, slope](Tape& tp, const Matrix& g) {
    Matrix d = tp.value(a).unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; });
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

// Plain dense layer x*W + b, no tangent.
inline Var affine(Tape& t, Var x, Var weight, Var bias) {
  return add_row(t, matmul(t, x, weight), bias);
}

// ---------------------------------------------------------------------------
// Dual (value + d/dt) propagation

struct DualBatch {
  Var values;
  Var tangents;
};

enum class Activation { tanh, sin };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::sin: return "sin";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "sin") return Activation::sin;
  throw ConfigError("unsupported activation: " + std::string(s));
}

// Input layer fed with t itself: tangent column is exactly 1.
inline DualBatch input_batch(Tape& t, const Vector& times) {
  return {t.constant(times), t.constant(Matrix::Ones(times.size(), 1))};
}

// values = X*W + b, tangents = T*W.
inline DualBatch affine_forward(Tape& t, const DualBatch& in, Var weight, Var bias) {
  const auto& X = t.value(in.values);
  const auto& W = t.value(weight);
  const auto& b = t.value(bias);
  if (X.cols() != W.rows())
    throw ConfigError("affine_forward: input width " + std::to_string(X.cols()) +
                      " does not match weight " + shape_string(W.rows(), W.cols()));
  if (b.rows() != 1 || b.cols() != W.cols())
    throw ConfigError("affine_forward: bias " + shape_string(b.rows(), b.cols()) +
                      " does not match weight " + shape_string(W.rows(), W.cols()));
  return {add_row(t, matmul(t, in.values, weight), bias), matmul(t, in.tangents, weight)};
}

// values = phi(X), tangents = phi'(X) .* T. The tangent node carries phi'' so
// the reverse sweep differentiates through d/dt as well.
inline DualBatch activation_forward(Tape& t, const DualBatch& in, Activation kind) {
  const auto& X = t.value(in.values);
  const auto& T = t.value(in.tangents);
  if (X.rows() != T.rows() || X.cols() != T.cols())
    throw ConfigError("activation_forward: value/tangent shape mismatch");
  Matrix y, d1, d2;
  switch (kind) {
    case Activation::tanh:
      y = X.array().tanh().matrix();
      d1 = (1.0 - y.array().square()).matrix();
      d2 = (-2.0 * y.array() * d1.array()).matrix();
      break;
    case Activation::sin:
      y = X.array().sin().matrix();
      d1 = X.array().cos().matrix();
      d2 = -y;
      break;
    default:
      throw ConfigError("activation_forward: unsupported activation");
  }
  const Var x = in.values;
  const Var tan = in.tangents;
  Matrix dt = d1.cwiseProduct(T);
  Var value = t.record(std::move(y), t.requires_grad(x), [x, d1](Tape& tp, const Matrix& g) {
    tp.accumulate(x, g.cwiseProduct(d1));
  });
  Var tangent = t.record(std::move(dt), t.requires_any({x, tan}),
                         [x, tan, d1, d2](Tape& tp, const Matrix& g) {
                           if (tp.requires_grad(tan)) tp.accumulate(tan, g.cwiseProduct(d1));
                           if (tp.requires_grad(x))
                             tp.accumulate(x, g.cwiseProduct(d2).cwiseProduct(tp.value(tan)));
                         });
  return {value, tangent};
}

inline DualBatch add(Tape& t, const DualBatch& a, const DualBatch& b) {
  return {add(t, a.values, b.values), add(t, a.tangents, b.tangents)};
}

// Plain (tape-free) evaluation helpers shared by fast inference paths.
inline void apply_activation(Activation kind, Matrix& values, Matrix& tangents) {
  switch (kind) {
    case Activation::tanh:
      values = values.array().tanh().matrix();
      tangents = tangents.cwiseProduct((1.0 - values.array().square()).matrix());
      return;
    case Activation::sin:
      tangents = tangents.cwiseProduct(values.array().cos().matrix());
      values = values.array().sin().matrix();
      return;
  }
  throw ConfigError("unsupported activation");
}

}  // namespace branchflow::ad
