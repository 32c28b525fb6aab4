#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hmil/matrix.hpp"

namespace hmil::ad {

namespace testing {
// Test-harness hook: when set, the tanh backward rule is deliberately
// corrupted so fault detection paths (gradcheck) can be exercised.
inline bool corrupt_tanh_backward = false;
}  // namespace testing

class Tape;

// Lightweight handle to a node on a tape.
class Value {
 public:
  Value() = default;
  const Matrix& value() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Value(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients of one backward pass, keyed by parameter node id.
class Gradients {
 public:
  const Matrix& at(std::size_t id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end())
      throw GraphError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  void set(std::size_t id, Matrix g) { by_id_[id] = std::move(g); }
  std::size_t size() const { return by_id_.size(); }

 private:
  std::map<std::size_t, Matrix> by_id_;
};

// Eagerly-evaluated tape: each op computes its value on creation and records
// a backward rule. Append-only, so parent ids always precede child ids and
// the graph is acyclic by construction. Rebuilt per bag/batch.
class Tape {
 public:
  using BackwardFn =
      std::function<void(const Tape&, const Matrix& grad, std::vector<Matrix>& parent_grads)>;

  struct Node {
    Matrix value;
    const char* op;
    std::vector<std::size_t> parents;
    BackwardFn backward;  // empty for leaves
  };

  Value leaf(Matrix m, const char* tag = "leaf") {
    nodes_.push_back(Node{std::move(m), tag, {}, nullptr});
    return Value(this, nodes_.size() - 1);
  }

  Value constant(Matrix m) { return leaf(std::move(m), "const"); }

  Value make(Matrix value, const char* op, std::vector<std::size_t> parents, BackwardFn fn) {
    if (!all_finite(value))
      throw NumericError(std::string(op) + " produced a non-finite value");
    nodes_.push_back(Node{std::move(value), op, std::move(parents), std::move(fn)});
    return Value(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar loss. Every requested parameter must be
  // an ancestor of the loss node.
  Gradients backward(const Value& loss, std::span<const std::size_t> params) const {
    const Matrix& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1)
      throw GraphError("backward: loss must be 1x1, got " + lv.shape_str());

    std::vector<Matrix> grads(nodes_.size());
    std::vector<char> present(nodes_.size(), 0);
    grads[loss.id()] = Matrix::full(1, 1, 1.0);
    present[loss.id()] = 1;

    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      const Node& n = nodes_[k];
      if (!present[k] || !n.backward) continue;
      std::vector<Matrix> pg(n.parents.size());
      n.backward(*this, grads[k], pg);
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        const std::size_t p = n.parents[i];
        if (!present[p]) {
          grads[p] = std::move(pg[i]);
          present[p] = 1;
        } else {
          grads[p] += pg[i];
        }
      }
    }

    Gradients out;
    for (std::size_t id : params) {
      if (id >= nodes_.size() || !present[id])
        throw GraphError("parameter node " + std::to_string(id) +
                         " is not reachable from the loss");
      out.set(id, grads[id]);
    }
    return out;
  }

 private:
  std::deque<Node> nodes_;  // deque: values stay addressable while the graph grows
};

inline const Matrix& Value::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b) {
  if (&a.tape() != &b.tape()) throw GraphError("operands live on different tapes");
  return a.tape();
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shapes disagree: " + a.shape_str() + " vs " +
                     b.shape_str());
}

template <typename Fwd, typename Bwd>
Value unary_elementwise(const Value& x, const char* op, Fwd fwd, Bwd dfdx_from_xy) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  const std::size_t idx = x.id();
  Matrix saved = out;
  return x.tape().make(
      std::move(out), op, {idx},
      [idx, saved = std::move(saved), dfdx_from_xy](const Tape& t, const Matrix& g,
                                                    std::vector<Matrix>& pg) {
        const Matrix& in = t.value(idx);
        Matrix d(in.rows(), in.cols());
        for (std::size_t i = 0; i < in.size(); ++i) d[i] = g[i] * dfdx_from_xy(in[i], saved[i]);
        pg[0] = std::move(d);
      });
}

}  // namespace detail

// ---- core ops -------------------------------------------------------------

inline Value matmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  Matrix out = multiply(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), "matmul", {ia, ib},
                [ia, ib](const Tape& tp, const Matrix& g, std::vector<Matrix>& pg) {
                  pg[0] = multiply_nt(g, tp.value(ib));
                  pg[1] = multiply_tn(tp.value(ia), g);
                });
}

inline Value transpose(const Value& x) {
  Matrix out = transposed(x.value());
  return x.tape().make(std::move(out), "transpose", {x.id()},
                       [](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                         pg[0] = transposed(g);
                       });
}

// Softmax along each row, max-subtracted for stability.
inline Value rowwise_softmax(const Value& x) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < in.cols(); ++c) m = std::max(m, in.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < in.cols(); ++c) {
      out.at(r, c) = std::exp(in.at(r, c) - m);
      z += out.at(r, c);
    }
    for (std::size_t c = 0; c < in.cols(); ++c) out.at(r, c) /= z;
  }
  Matrix saved = out;
  return x.tape().make(std::move(out), "rowwise_softmax", {x.id()},
                       [saved = std::move(saved)](const Tape&, const Matrix& g,
                                                  std::vector<Matrix>& pg) {
                         Matrix d(saved.rows(), saved.cols());
                         for (std::size_t r = 0; r < saved.rows(); ++r) {
                           double dot = 0.0;
                           for (std::size_t c = 0; c < saved.cols(); ++c)
                             dot += g.at(r, c) * saved.at(r, c);
                           for (std::size_t c = 0; c < saved.cols(); ++c)
                             d.at(r, c) = saved.at(r, c) * (g.at(r, c) - dot);
                         }
                         pg[0] = std::move(d);
                       });
}

// log(sum(exp(row))) per row -> [m x 1]; backward is the row softmax.
inline Value logsumexp_rows(const Value& x) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), 1);
  Matrix soft(in.rows(), in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < in.cols(); ++c) m = std::max(m, in.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < in.cols(); ++c) z += std::exp(in.at(r, c) - m);
    out.at(r, 0) = m + std::log(z);
    for (std::size_t c = 0; c < in.cols(); ++c)
      soft.at(r, c) = std::exp(in.at(r, c) - m) / z;
  }
  return x.tape().make(std::move(out), "logsumexp_rows", {x.id()},
                       [soft = std::move(soft)](const Tape&, const Matrix& g,
                                                std::vector<Matrix>& pg) {
                         Matrix d(soft.rows(), soft.cols());
                         for (std::size_t r = 0; r < soft.rows(); ++r)
                           for (std::size_t c = 0; c < soft.cols(); ++c)
                             d.at(r, c) = g.at(r, 0) * soft.at(r, c);
                         pg[0] = std::move(d);
                       });
}

inline Value tanh(const Value& x) {
  return detail::unary_elementwise(x, "tanh", [](double v) { return std::tanh(v); },
                                   [](double, double y) {
                                     double d = 1.0 - y * y;
                                     if (testing::corrupt_tanh_backward) d *= 1.01;
                                     return d;
                                   });
}

inline Value sigmoid(const Value& x) {
  return detail::unary_elementwise(
      x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                     : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Value exp(const Value& x) {
  return detail::unary_elementwise(x, "exp", [](double v) { return std::exp(v); },
                                   [](double, double y) { return y; });
}

inline Value log(const Value& x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return detail::unary_elementwise(x, "log", [](double v) { return std::log(v); },
                                   [](double v, double) { return 1.0 / v; });
}

inline Value sqrt(const Value& x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw DomainError("sqrt requires strictly positive input");
  return detail::unary_elementwise(x, "sqrt", [](double v) { return std::sqrt(v); },
                                   [](double, double y) { return 0.5 / y; });
}

inline Value hadamard(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "hadamard");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), "hadamard", {ia, ib},
                [ia, ib](const Tape& tp, const Matrix& g, std::vector<Matrix>& pg) {
                  const Matrix& A = tp.value(ia);
                  const Matrix& B = tp.value(ib);
                  Matrix da(A.rows(), A.cols()), db(A.rows(), A.cols());
                  for (std::size_t i = 0; i < A.size(); ++i) {
                    da[i] = g[i] * B[i];
                    db[i] = g[i] * A[i];
                  }
                  pg[0] = std::move(da);
                  pg[1] = std::move(db);
                });
}

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
  return t.make(std::move(out), "add", {a.id(), b.id()},
                [](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                  pg[0] = g;
                  pg[1] = g;
                });
}

inline Value sub(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "sub");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
  return t.make(std::move(out), "sub", {a.id(), b.id()},
                [](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                  pg[0] = g;
                  Matrix ng(g.rows(), g.cols());
                  for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                  pg[1] = std::move(ng);
                });
}

inline Value div(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "div");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  for (double v : B.data())
    if (v == 0.0) throw DomainError("division by zero");
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] / B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), "div", {ia, ib},
                [ia, ib](const Tape& tp, const Matrix& g, std::vector<Matrix>& pg) {
                  const Matrix& A = tp.value(ia);
                  const Matrix& B = tp.value(ib);
                  Matrix da(A.rows(), A.cols()), db(A.rows(), A.cols());
                  for (std::size_t i = 0; i < A.size(); ++i) {
                    da[i] = g[i] / B[i];
                    db[i] = -g[i] * A[i] / (B[i] * B[i]);
                  }
                  pg[0] = std::move(da);
                  pg[1] = std::move(db);
                });
}

inline Value scale(const Value& x, double s) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = s * in[i];
  return x.tape().make(std::move(out), "scale", {x.id()},
                       [s](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                         Matrix d(g.rows(), g.cols());
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] = s * g[i];
                         pg[0] = std::move(d);
                       });
}

inline Value add_const(const Value& x, double c) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + c;
  return x.tape().make(std::move(out), "add_const", {x.id()},
                       [](const Tape&, const Matrix& g, std::vector<Matrix>& pg) { pg[0] = g; });
}

// Clamp into [lo, hi]; zero gradient outside the open interval.
inline Value clamp(const Value& x, double lo, double hi) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::min(hi, std::max(lo, in[i]));
  const std::size_t idx = x.id();
  return x.tape().make(std::move(out), "clamp", {idx},
                       [idx, lo, hi](const Tape& tp, const Matrix& g, std::vector<Matrix>& pg) {
                         const Matrix& in = tp.value(idx);
                         Matrix d(in.rows(), in.cols());
                         for (std::size_t i = 0; i < in.size(); ++i)
                           d[i] = (in[i] > lo && in[i] < hi) ? g[i] : 0.0;
                         pg[0] = std::move(d);
                       });
}

inline Value clamp_min(const Value& x, double lo) {
  return clamp(x, lo, std::numeric_limits<double>::infinity());
}

// Unit-norm rows; a zero row has no direction and is rejected.
inline Value l2_normalize_rows(const Value& x) {
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  std::vector<double> norms(in.rows());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < in.cols(); ++c) s += in.at(r, c) * in.at(r, c);
    if (s == 0.0)
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(r) + " is zero");
    norms[r] = std::sqrt(s);
    for (std::size_t c = 0; c < in.cols(); ++c) out.at(r, c) = in.at(r, c) / norms[r];
  }
  Matrix saved = out;
  return x.tape().make(
      std::move(out), "l2_normalize_rows", {x.id()},
      [saved = std::move(saved), norms = std::move(norms)](const Tape&, const Matrix& g,
                                                           std::vector<Matrix>& pg) {
        Matrix d(saved.rows(), saved.cols());
        for (std::size_t r = 0; r < saved.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < saved.cols(); ++c) dot += g.at(r, c) * saved.at(r, c);
          for (std::size_t c = 0; c < saved.cols(); ++c)
            d.at(r, c) = (g.at(r, c) - dot * saved.at(r, c)) / norms[r];
        }
        pg[0] = std::move(d);
      });
}

// ---- reductions and broadcasts ---------------------------------------------

inline Value sum_rows(const Value& x) {  // [m x n] -> [m x 1]
  const Matrix& in = x.value();
  Matrix out(in.rows(), 1);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < in.cols(); ++c) s += in.at(r, c);
    out.at(r, 0) = s;
  }
  const std::size_t nc = in.cols();
  return x.tape().make(std::move(out), "sum_rows", {x.id()},
                       [nc](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                         Matrix d(g.rows(), nc);
                         for (std::size_t r = 0; r < g.rows(); ++r)
                           for (std::size_t c = 0; c < nc; ++c) d.at(r, c) = g.at(r, 0);
                         pg[0] = std::move(d);
                       });
}

inline Value sum_cols(const Value& x) {  // [m x n] -> [1 x n]
  const Matrix& in = x.value();
  Matrix out(1, in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r)
    for (std::size_t c = 0; c < in.cols(); ++c) out.at(0, c) += in.at(r, c);
  const std::size_t nr = in.rows();
  return x.tape().make(std::move(out), "sum_cols", {x.id()},
                       [nr](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                         Matrix d(nr, g.cols());
                         for (std::size_t r = 0; r < nr; ++r)
                           for (std::size_t c = 0; c < g.cols(); ++c) d.at(r, c) = g.at(0, c);
                         pg[0] = std::move(d);
                       });
}

inline Value sum_all(const Value& x) {  // -> [1 x 1]
  const Matrix& in = x.value();
  double s = 0.0;
  for (double v : in.data()) s += v;
  const std::size_t nr = in.rows(), nc = in.cols();
  return x.tape().make(Matrix::full(1, 1, s), "sum_all", {x.id()},
                       [nr, nc](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                         pg[0] = Matrix::full(nr, nc, g.at(0, 0));
                       });
}

inline Value add_rowvec(const Value& x, const Value& r) {  // [m x n] + [1 x n]
  Tape& t = detail::same_tape(x, r);
  const Matrix& X = x.value();
  const Matrix& R = r.value();
  if (R.rows() != 1 || R.cols() != X.cols())
    throw ShapeError("add_rowvec: " + X.shape_str() + " + " + R.shape_str());
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out.at(i, j) = X.at(i, j) + R.at(0, j);
  return t.make(std::move(out), "add_rowvec", {x.id(), r.id()},
                [](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                  pg[0] = g;
                  Matrix dr(1, g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) dr.at(0, j) += g.at(i, j);
                  pg[1] = std::move(dr);
                });
}

inline Value add_colvec(const Value& x, const Value& c) {  // [m x n] + [m x 1]
  Tape& t = detail::same_tape(x, c);
  const Matrix& X = x.value();
  const Matrix& C = c.value();
  if (C.cols() != 1 || C.rows() != X.rows())
    throw ShapeError("add_colvec: " + X.shape_str() + " + " + C.shape_str());
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out.at(i, j) = X.at(i, j) + C.at(i, 0);
  return t.make(std::move(out), "add_colvec", {x.id(), c.id()},
                [](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                  pg[0] = g;
                  Matrix dc(g.rows(), 1);
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) dc.at(i, 0) += g.at(i, j);
                  pg[1] = std::move(dc);
                });
}

inline Value concat_rows(std::span<const Value> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = parts[0].tape();
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> heights;
  for (const Value& p : parts) {
    if (&p.tape() != &t) throw GraphError("operands live on different tapes");
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts disagree");
    rows += p.value().rows();
    ids.push_back(p.id());
    heights.push_back(p.value().rows());
  }
  Matrix out(rows, cols);
  std::size_t r0 = 0;
  for (const Value& p : parts) {
    const Matrix& m = p.value();
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < cols; ++j) out.at(r0 + i, j) = m.at(i, j);
    r0 += m.rows();
  }
  return t.make(std::move(out), "concat_rows", ids,
                [heights = std::move(heights)](const Tape&, const Matrix& g,
                                               std::vector<Matrix>& pg) {
                  std::size_t r0 = 0;
                  for (std::size_t k = 0; k < heights.size(); ++k) {
                    Matrix d(heights[k], g.cols());
                    for (std::size_t i = 0; i < heights[k]; ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) d.at(i, j) = g.at(r0 + i, j);
                    pg[k] = std::move(d);
                    r0 += heights[k];
                  }
                });
}

inline Value reshape(const Value& x, std::size_t rows, std::size_t cols) {
  const Matrix& in = x.value();
  if (rows * cols != in.size())
    throw ShapeError("reshape: " + in.shape_str() + " -> " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  Matrix out(rows, cols, in.data());
  const std::size_t r0 = in.rows(), c0 = in.cols();
  return x.tape().make(std::move(out), "reshape", {x.id()},
                       [r0, c0](const Tape&, const Matrix& g, std::vector<Matrix>& pg) {
                         pg[0] = Matrix(r0, c0, g.data());
                       });
}

inline Value colwise_max(const Value& x) {  // [m x n] -> [1 x n]
  const Matrix& in = x.value();
  if (in.rows() == 0) throw ShapeError("colwise_max on empty matrix");
  Matrix out(1, in.cols());
  std::vector<std::size_t> argmax(in.cols(), 0);
  for (std::size_t c = 0; c < in.cols(); ++c) {
    double m = in.at(0, c);
    for (std::size_t r = 1; r < in.rows(); ++r)
      if (in.at(r, c) > m) {
        m = in.at(r, c);
        argmax[c] = r;
      }
    out.at(0, c) = m;
  }
  const std::size_t nr = in.rows();
  return x.tape().make(std::move(out), "colwise_max", {x.id()},
                       [nr, argmax = std::move(argmax)](const Tape&, const Matrix& g,
                                                        std::vector<Matrix>& pg) {
                         Matrix d(nr, g.cols());
                         for (std::size_t c = 0; c < g.cols(); ++c)
                           d.at(argmax[c], c) = g.at(0, c);
                         pg[0] = std::move(d);
                       });
}

// ---- gradient checking ------------------------------------------------------

// Central finite differences against the tape's analytic gradients.
// build(tape, leaves) must construct a scalar loss from the given parameter
// leaves, in order.
template <typename BuildFn>
double grad_check(BuildFn&& build, const std::vector<Matrix>& params, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("grad_check: epsilon must be > 0");

  auto eval = [&](const std::vector<Matrix>& ps) {
    Tape t;
    std::vector<Value> leaves;
    leaves.reserve(ps.size());
    for (const Matrix& p : ps) leaves.push_back(t.leaf(p, "param"));
    Value loss = build(t, leaves);
    const double v = loss.value().at(0, 0);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during probing");
    return v;
  };

  // Analytic pass.
  Tape t;
  std::vector<Value> leaves;
  std::vector<std::size_t> ids;
  for (const Matrix& p : params) {
    Value v = t.leaf(p, "param");
    ids.push_back(v.id());
    leaves.push_back(v);
  }
  Value loss = build(t, leaves);
  if (!std::isfinite(loss.value().at(0, 0)))
    throw NumericError("grad_check: non-finite loss");
  Gradients grads = t.backward(loss, ids);

  double max_rel = 0.0;
  std::vector<Matrix> probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix& analytic = grads.at(ids[k]);
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + epsilon;
      const double fp = eval(probe);
      probe[k][i] = orig - epsilon;
      const double fm = eval(probe);
      probe[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double rel =
          std::fabs(analytic[i] - numeric) / std::max(1e-8, std::fabs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace hmil::ad
