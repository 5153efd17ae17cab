#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pepo/tensor.hpp"

// Tensor-level reverse-mode differentiation. Every primitive appends one node
// holding its value and a closure that scatters the output gradient into its
// inputs. Nodes are appended after their inputs, so walking the node list
// backwards is a reverse topological order.
namespace pepo::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  /// A non-recording tape evaluates values only; no closures are kept and
  /// backward() is unavailable.
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var variable(Tensor value) { return push(std::move(value), recording_, {}); }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Records a derived node. requires_grad propagates from the inputs.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (recording_) {
      for (const Var& in : inputs) needs = needs || node(in).requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  /// Accumulates into an input's gradient buffer when that input needs one.
  bool wants_grad(Var v) const { return node(v).requires_grad; }
  Tensor& grad_buffer(Var v) {
    Node& n = node_mut(v);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Runs reverse accumulation from a 1x1 loss node. Gradients from a previous
  /// call are discarded.
  void backward(Var loss) {
    if (!recording_) throw std::logic_error("Tape::backward: tape was not recording");
    const Node& l = node(loss);
    if (l.value.size() != 1) throw std::invalid_argument("Tape::backward: loss must be a scalar");
    for (Node& n : nodes_) n.grad = Tensor();
    if (!l.requires_grad) return;
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
    differentiated_ = true;
  }

  /// Gradient of the last backward() loss with respect to v. Unreachable nodes
  /// get exact zeros; nodes that never required a gradient are an error.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (!n.requires_grad) {
      throw std::logic_error("Tape::grad: node " + std::to_string(v.id()) + " is detached");
    }
    if (!differentiated_) throw std::logic_error("Tape::grad: backward() has not run");
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(fn), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  const Node& node(Var v) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw std::logic_error("Tape: variable does not belong to this tape");
    }
    return nodes_[v.id()];
  }
  Node& node_mut(Var v) { return const_cast<Node&>(node(v)); }

  std::vector<Node> nodes_;
  bool recording_;
  bool differentiated_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + Tensor::shape_string(a.shape()) +
                                " vs " + Tensor::shape_string(b.shape()));
  }
}

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out[i * n + j] += s;
    }
  }
}

// out[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    const double* br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace detail

/// a[m x k] * b[k x n]
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) throw std::invalid_argument("matmul: inner dimensions differ");
  Tensor out = Tensor::matrix(m, n);
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.wants_grad(a)) {
      detail::gemm_nt(g.data().data(), b.value().data().data(), t.grad_buffer(a).data().data(), m, n, k);
    }
    if (t.wants_grad(b)) {
      detail::gemm_tn(a.value().data().data(), g.data().data(), t.grad_buffer(b).data().data(), m, k, n);
    }
  });
}

/// a[m x k] * b[n x k]^T
inline Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  Tensor out = Tensor::matrix(m, n);
  detail::gemm_nt(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.wants_grad(a)) {
      detail::gemm_nn(g.data().data(), b.value().data().data(), t.grad_buffer(a).data().data(), m, n, k);
    }
    if (t.wants_grad(b)) {
      detail::gemm_tn(g.data().data(), a.value().data().data(), t.grad_buffer(b).data().data(), m, n, k);
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!t.wants_grad(v)) continue;
      Tensor& gb = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      const auto bv = b.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      const auto av = a.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// a[m x n] + bias[1 x n] broadcast over rows.
inline Var add_row(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (bv.size() != n) throw std::invalid_argument("add_row: bias width mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
  }
  return a.tape().record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor& g) {
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
      }
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  return a.tape().record(std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v += c;
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  Tensor y = out;
  return a.tape().record(std::move(out), {a}, [a, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

/// tanh-approximated GELU.
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& x : out.data()) {
    x = 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
  }
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    const auto xv = a.value().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = xv[i];
      const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
      const double th = std::tanh(u);
      const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
      ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

/// Row-wise softmax of a square score matrix where row i sees columns 0..i.
/// Masked entries are exactly zero.
inline Var causal_softmax(Var a) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows();
  if (av.cols() != m) throw std::invalid_argument("causal_softmax: expected a square matrix");
  Tensor out = Tensor::matrix(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = av.at(i, 0);
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, av.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      out.at(i, j) = std::exp(av.at(i, j) - mx);
      s += out.at(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) out.at(i, j) /= s;
  }
  Tensor probs = out;
  return a.tape().record(std::move(out), {a}, [a, probs = std::move(probs), m](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      double dotp = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dotp += g.at(i, j) * probs.at(i, j);
      for (std::size_t j = 0; j <= i; ++j) ga.at(i, j) += probs.at(i, j) * (g.at(i, j) - dotp);
    }
  });
}

inline Var log_softmax_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = av.row(i);
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = r[j] - lse;
  }
  Tensor logp = out;
  return a.tape().record(std::move(out), {a}, [a, logp = std::move(logp), m, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g.at(i, j);
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(i, j) - std::exp(logp.at(i, j)) * gs;
    }
  });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t width) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (start + width > n) throw std::out_of_range("slice_cols: range exceeds width");
  Tensor out = Tensor::matrix(m, width);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < width; ++j) out.at(i, j) = av.at(i, start + j);
  }
  return a.tape().record(std::move(out), {a}, [a, start, width, m](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < width; ++j) ga.at(i, start + j) += g.at(i, j);
    }
  });
}

inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (start + count > m) throw std::out_of_range("slice_rows: range exceeds height");
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                           av.data().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return a.tape().record(Tensor::matrix(count, n, std::move(data)), {a},
                         [a, start, n](Tape& t, const Tensor& g) {
                           Tensor& ga = t.grad_buffer(a);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[start * n + i] += g[i];
                         });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& tape = parts.front().tape();
  const std::size_t m = parts.front().value().rows();
  std::size_t width = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != m) throw std::invalid_argument("concat_cols: row count mismatch");
    width += p.value().cols();
  }
  Tensor out = Tensor::matrix(m, width);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < pv.cols(); ++j) out.at(i, offset + j) = pv.at(i, j);
    }
    offset += pv.cols();
  }
  return tape.record(std::move(out), std::span<const Var>(parts), [parts, m](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.value().cols();
      if (t.wants_grad(p)) {
        Tensor& gp = t.grad_buffer(p);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < w; ++j) gp.at(i, j) += g.at(i, off + j);
        }
      }
      off += w;
    }
  });
}

inline Var concat_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) throw std::invalid_argument("concat_rows: column count mismatch");
  const std::size_t n = av.cols();
  std::vector<double> data(av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t split = av.size();
  return a.tape().record(Tensor::matrix(av.rows() + bv.rows(), n, std::move(data)), {a, b},
                         [a, b, split](Tape& t, const Tensor& g) {
                           if (t.wants_grad(a)) {
                             Tensor& ga = t.grad_buffer(a);
                             for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
                           }
                           if (t.wants_grad(b)) {
                             Tensor& gb = t.grad_buffer(b);
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
                           }
                         });
}

/// Rows of table selected by index (embedding lookup).
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const Tensor& tv = table.value();
  const std::size_t n = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) throw std::out_of_range("gather_rows: index out of range");
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = tv.at(ids[i], j);
  }
  return table.tape().record(std::move(out), {table}, [table, ids = std::move(ids), n](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) gt.at(ids[i], j) += g.at(i, j);
    }
  });
}

/// out[i] = a[i, cols[i]] as an m x 1 column.
inline Var pick(Var a, std::vector<std::size_t> cols) {
  const Tensor& av = a.value();
  if (cols.size() != av.rows()) throw std::invalid_argument("pick: one column index per row required");
  std::vector<double> data(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= av.cols()) throw std::out_of_range("pick: column out of range");
    data[i] = av.at(i, cols[i]);
  }
  return a.tape().record(Tensor::column(std::move(data)), {a}, [a, cols = std::move(cols)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < cols.size(); ++i) ga.at(i, cols[i]) += g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

/// sum_i w_i * a_i with constant weights.
inline Var weighted_sum(Var a, std::vector<double> weights) {
  if (weights.size() != a.value().size()) throw std::invalid_argument("weighted_sum: weight count mismatch");
  double s = 0.0;
  const auto av = a.value().data();
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * av[i];
  return a.tape().record(Tensor::scalar(s), {a}, [a, weights = std::move(weights)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < weights.size(); ++i) ga[i] += g[0] * weights[i];
  });
}

/// PPO surrogate per element: min(r A, clip(r, 1 - lo, 1 + hi) A) with
/// constant advantages. Where the clipped branch is strictly smaller the
/// gradient is zero.
inline Var clipped_surrogate(Var ratio, std::vector<double> adv, double clip_low, double clip_high) {
  const Tensor& rv = ratio.value();
  if (adv.size() != rv.size()) throw std::invalid_argument("clipped_surrogate: advantage count mismatch");
  std::vector<double> out(rv.size());
  std::vector<double> slope(rv.size());
  for (std::size_t i = 0; i < rv.size(); ++i) {
    const double r = rv[i];
    const double unclipped = r * adv[i];
    const double clipped = std::clamp(r, 1.0 - clip_low, 1.0 + clip_high) * adv[i];
    if (unclipped <= clipped) {
      out[i] = unclipped;
      slope[i] = adv[i];
    } else {
      out[i] = clipped;
      slope[i] = 0.0;
    }
  }
  return ratio.tape().record(Tensor(rv.shape(), std::move(out)), {ratio},
                             [ratio, slope = std::move(slope)](Tape& t, const Tensor& g) {
                               Tensor& gr = t.grad_buffer(ratio);
                               for (std::size_t i = 0; i < slope.size(); ++i) gr[i] += g[i] * slope[i];
                             });
}

}  // namespace pepo::ad
