#pragma once

// Reverse-mode differentiation on a Wengert tape, with exactly the operator
// set the acoustic models need. The tape is templated on the scalar type:
// Tape<float> for training, Tape<double> for finite-difference checking.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "beamkd/defs.hpp"
#include "beamkd/rng.hpp"

namespace beamkd::ad {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

struct TensorRef {
  int id = -1;
  int rows = 0;
  int cols = 0;
  int size() const { return rows * cols; }
};

template <class S>
class Tape;

template <class S>
struct Node {
  int rows = 0, cols = 0;
  std::vector<S> val;    // owned storage; empty for leaf views
  const S* vptr = nullptr;
  std::vector<S> grad;   // allocated on demand during backward
  std::vector<S> aux;    // op workspace kept for the backward pass
  void (*bwd)(Tape<S>&, int) = nullptr;
  std::array<int, 4> in{-1, -1, -1, -1};
  std::array<int, 4> iaux{0, 0, 0, 0};
  S saux{};
  const char* op = "leaf";
  bool requires_grad = false;
};

template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf viewing external storage. The data must outlive the tape pass.
  TensorRef leaf(const S* data, int rows, int cols, bool requires_grad) {
    check_open();
    Node<S> n;
    n.rows = rows;
    n.cols = cols;
    n.vptr = data;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1, rows, cols};
  }

  TensorRef constant(std::vector<S> values, int rows, int cols) {
    check_open();
    Node<S> n;
    n.rows = rows;
    n.cols = cols;
    n.val = std::move(values);
    n.vptr = n.val.data();
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1, rows, cols};
  }

  std::span<const S> value(TensorRef t) const {
    const Node<S>& n = nodes_.at(t.id);
    return {n.vptr, static_cast<size_t>(n.rows) * n.cols};
  }

  // Gradient of a leaf (or any node) after backward(). Empty if untouched.
  std::span<const S> grad(TensorRef t) const {
    const Node<S>& n = nodes_.at(t.id);
    return {n.grad.data(), n.grad.size()};
  }

  // Populates gradients on every requires_grad node reachable from `loss`.
  // Accumulation is += in fixed reverse tape order, so shared uses sum
  // deterministically. The tape is consumed afterwards; reset() reopens it.
  void backward(TensorRef loss) {
    check_open();
    Node<S>& ln = nodes_.at(loss.id);
    if (ln.rows != 1 || ln.cols != 1)
      throw std::invalid_argument("backward: loss must be a scalar tensor");
    grad_buf(loss.id)[0] = S(1);
    for (int i = loss.id; i >= 0; --i) {
      Node<S>& n = nodes_[i];
      if (n.bwd != nullptr && n.requires_grad && !n.grad.empty()) n.bwd(*this, i);
    }
    consumed_ = true;
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  size_t size() const { return nodes_.size(); }

  // --- internals shared with the op implementations ---
  Node<S>& node(int id) { return nodes_[id]; }
  const Node<S>& node(int id) const { return nodes_[id]; }

  S* grad_buf(int id) {
    Node<S>& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.rows) * n.cols, S(0));
    return n.grad.data();
  }

  // Gradient sink for an op input: null when the input does not need one.
  S* grad_sink(int id) {
    if (id < 0) return nullptr;
    Node<S>& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    return grad_buf(id);
  }

  Node<S>& emit(int rows, int cols, const char* op, void (*bwd)(Tape<S>&, int),
                std::initializer_list<int> inputs) {
    check_open();
    Node<S> n;
    n.rows = rows;
    n.cols = cols;
    n.val.resize(static_cast<size_t>(rows) * cols);
    n.op = op;
    n.bwd = bwd;
    int k = 0;
    for (int i : inputs) {
      n.in[k++] = i;
      if (i >= 0 && nodes_[i].requires_grad) n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    Node<S>& out = nodes_.back();
    out.vptr = out.val.data();
    return out;
  }

  TensorRef finish(Node<S>& n) {
    for (const S& v : n.val) {
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error(std::string("op '") + n.op + "' produced a non-finite value");
    }
    return {static_cast<int>(nodes_.size()) - 1, n.rows, n.cols};
  }

 private:
  void check_open() const {
    if (consumed_)
      throw std::logic_error("tape already consumed by backward(); call reset()");
  }

  std::vector<Node<S>> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <class S>
void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <class S>
void add_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const size_t m = n.grad.size();
  if (S* ga = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < m; ++i) ga[i] += n.grad[i];
  if (S* gb = t.grad_sink(n.in[1]))
    for (size_t i = 0; i < m; ++i) gb[i] += n.grad[i];
}

template <class S>
TensorRef add(Tape<S>& t, TensorRef a, TensorRef b) {
  detail::require<S>(a.rows == b.rows && a.cols == b.cols, "add", "shape mismatch");
  const S* pa = t.node(a.id).vptr;
  const S* pb = t.node(b.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "add", &add_bwd<S>, {a.id, b.id});
  for (int i = 0; i < a.size(); ++i) out.val[i] = pa[i] + pb[i];
  return t.finish(out);
}

template <class S>
void sub_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const size_t m = n.grad.size();
  if (S* ga = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < m; ++i) ga[i] += n.grad[i];
  if (S* gb = t.grad_sink(n.in[1]))
    for (size_t i = 0; i < m; ++i) gb[i] -= n.grad[i];
}

template <class S>
TensorRef sub(Tape<S>& t, TensorRef a, TensorRef b) {
  detail::require<S>(a.rows == b.rows && a.cols == b.cols, "sub", "shape mismatch");
  const S* pa = t.node(a.id).vptr;
  const S* pb = t.node(b.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "sub", &sub_bwd<S>, {a.id, b.id});
  for (int i = 0; i < a.size(); ++i) out.val[i] = pa[i] - pb[i];
  return t.finish(out);
}

template <class S>
void mul_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* pa = t.node(n.in[0]).vptr;
  const S* pb = t.node(n.in[1]).vptr;
  const size_t m = n.grad.size();
  if (S* ga = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < m; ++i) ga[i] += n.grad[i] * pb[i];
  if (S* gb = t.grad_sink(n.in[1]))
    for (size_t i = 0; i < m; ++i) gb[i] += n.grad[i] * pa[i];
}

template <class S>
TensorRef mul(Tape<S>& t, TensorRef a, TensorRef b) {
  detail::require<S>(a.rows == b.rows && a.cols == b.cols, "mul", "shape mismatch");
  const S* pa = t.node(a.id).vptr;
  const S* pb = t.node(b.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "mul", &mul_bwd<S>, {a.id, b.id});
  for (int i = 0; i < a.size(); ++i) out.val[i] = pa[i] * pb[i];
  return t.finish(out);
}

template <class S>
void scale_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  if (S* ga = t.grad_sink(n.in[0])) {
    const S c = n.saux;
    for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += c * n.grad[i];
  }
}

template <class S>
TensorRef scale(Tape<S>& t, TensorRef a, S c) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "scale", &scale_bwd<S>, {a.id});
  out.saux = c;
  for (int i = 0; i < a.size(); ++i) out.val[i] = c * pa[i];
  return t.finish(out);
}

template <class S>
void relu_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* px = t.node(n.in[0]).vptr;
  if (S* gx = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (px[i] > S(0)) gx[i] += n.grad[i];
}

template <class S>
TensorRef relu(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "relu", &relu_bwd<S>, {a.id});
  for (int i = 0; i < a.size(); ++i) out.val[i] = pa[i] > S(0) ? pa[i] : S(0);
  return t.finish(out);
}

// log(max(x, 1e-10)); zero subgradient in the floored region.
template <class S>
void guarded_log_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* px = t.node(n.in[0]).vptr;
  const S floor = static_cast<S>(kLogFloor);
  if (S* gx = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (px[i] >= floor) gx[i] += n.grad[i] / px[i];
}

template <class S>
TensorRef guarded_log(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  const S floor = static_cast<S>(kLogFloor);
  Node<S>& out = t.emit(a.rows, a.cols, "guarded_log", &guarded_log_bwd<S>, {a.id});
  for (int i = 0; i < a.size(); ++i)
    out.val[i] = std::log(pa[i] > floor ? pa[i] : floor);
  return t.finish(out);
}

template <class S>
void sigmoid_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* py = n.vptr;
  if (S* gx = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < n.grad.size(); ++i)
      gx[i] += n.grad[i] * py[i] * (S(1) - py[i]);
}

template <class S>
inline S sigmoid_scalar(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
TensorRef sigmoid(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "sigmoid", &sigmoid_bwd<S>, {a.id});
  for (int i = 0; i < a.size(); ++i) out.val[i] = sigmoid_scalar(pa[i]);
  return t.finish(out);
}

template <class S>
void tanh_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* py = n.vptr;
  if (S* gx = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < n.grad.size(); ++i)
      gx[i] += n.grad[i] * (S(1) - py[i] * py[i]);
}

template <class S>
TensorRef tanh_op(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "tanh", &tanh_bwd<S>, {a.id});
  for (int i = 0; i < a.size(); ++i) out.val[i] = std::tanh(pa[i]);
  return t.finish(out);
}

// Elementwise |z|^2 over interleaved (re, im) pairs; halves the last dim.
template <class S>
void complex_power_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* px = t.node(n.in[0]).vptr;
  if (S* gx = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < n.grad.size(); ++i) {
      gx[2 * i] += S(2) * px[2 * i] * n.grad[i];
      gx[2 * i + 1] += S(2) * px[2 * i + 1] * n.grad[i];
    }
}

template <class S>
TensorRef complex_power(Tape<S>& t, TensorRef a) {
  detail::require<S>(a.cols % 2 == 0, "complex_power", "odd column count");
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols / 2, "complex_power", &complex_power_bwd<S>, {a.id});
  const int m = a.size() / 2;
  for (int i = 0; i < m; ++i)
    out.val[i] = pa[2 * i] * pa[2 * i] + pa[2 * i + 1] * pa[2 * i + 1];
  return t.finish(out);
}

template <class S>
void reduce_sum_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& x = t.node(n.in[0]);
  if (S* gx = t.grad_sink(n.in[0])) {
    const S g = n.grad[0];
    const size_t m = static_cast<size_t>(x.rows) * x.cols;
    for (size_t i = 0; i < m; ++i) gx[i] += g;
  }
}

template <class S>
TensorRef reduce_sum(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(1, 1, "reduce_sum", &reduce_sum_bwd<S>, {a.id});
  double acc = 0;
  for (int i = 0; i < a.size(); ++i) acc += pa[i];
  out.val[0] = static_cast<S>(acc);
  return t.finish(out);
}

template <class S>
void reduce_mean_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& x = t.node(n.in[0]);
  if (S* gx = t.grad_sink(n.in[0])) {
    const size_t m = static_cast<size_t>(x.rows) * x.cols;
    const S g = n.grad[0] / static_cast<S>(m);
    for (size_t i = 0; i < m; ++i) gx[i] += g;
  }
}

template <class S>
TensorRef reduce_mean(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(1, 1, "reduce_mean", &reduce_mean_bwd<S>, {a.id});
  double acc = 0;
  for (int i = 0; i < a.size(); ++i) acc += pa[i];
  out.val[0] = static_cast<S>(acc / a.size());
  return t.finish(out);
}

// Mean squared error over all elements.
template <class S>
void mse_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  const S* px = t.node(n.in[0]).vptr;
  const S* py = t.node(n.in[1]).vptr;
  const size_t m = static_cast<size_t>(t.node(n.in[0]).rows) * t.node(n.in[0]).cols;
  const S c = S(2) * n.grad[0] / static_cast<S>(m);
  if (S* gx = t.grad_sink(n.in[0]))
    for (size_t i = 0; i < m; ++i) gx[i] += c * (px[i] - py[i]);
  if (S* gy = t.grad_sink(n.in[1]))
    for (size_t i = 0; i < m; ++i) gy[i] -= c * (px[i] - py[i]);
}

template <class S>
TensorRef mse(Tape<S>& t, TensorRef x, TensorRef y) {
  detail::require<S>(x.rows == y.rows && x.cols == y.cols, "mse", "shape mismatch");
  const S* px = t.node(x.id).vptr;
  const S* py = t.node(y.id).vptr;
  Node<S>& out = t.emit(1, 1, "mse", &mse_bwd<S>, {x.id, y.id});
  double acc = 0;
  for (int i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(px[i]) - static_cast<double>(py[i]);
    acc += d * d;
  }
  out.val[0] = static_cast<S>(acc / x.size());
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Row-wise softmax family
// ---------------------------------------------------------------------------

template <class S>
void softmax_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  S* gx = t.grad_sink(n.in[0]);
  if (!gx) return;
  const S* py = n.vptr;
  for (int r = 0; r < n.rows; ++r) {
    const S* y = py + static_cast<size_t>(r) * n.cols;
    const S* g = n.grad.data() + static_cast<size_t>(r) * n.cols;
    S dot = S(0);
    for (int c = 0; c < n.cols; ++c) dot += g[c] * y[c];
    S* gr = gx + static_cast<size_t>(r) * n.cols;
    for (int c = 0; c < n.cols; ++c) gr[c] += y[c] * (g[c] - dot);
  }
}

template <class S>
TensorRef softmax(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "softmax", &softmax_bwd<S>, {a.id});
  for (int r = 0; r < a.rows; ++r) {
    const S* x = pa + static_cast<size_t>(r) * a.cols;
    S* y = out.val.data() + static_cast<size_t>(r) * a.cols;
    S mx = x[0];
    for (int c = 1; c < a.cols; ++c) mx = std::max(mx, x[c]);
    double Z = 0;
    for (int c = 0; c < a.cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      Z += y[c];
    }
    const S inv = static_cast<S>(1.0 / Z);
    for (int c = 0; c < a.cols; ++c) y[c] *= inv;
  }
  return t.finish(out);
}

template <class S>
void log_softmax_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  S* gx = t.grad_sink(n.in[0]);
  if (!gx) return;
  const S* py = n.vptr;
  for (int r = 0; r < n.rows; ++r) {
    const S* y = py + static_cast<size_t>(r) * n.cols;
    const S* g = n.grad.data() + static_cast<size_t>(r) * n.cols;
    S gsum = S(0);
    for (int c = 0; c < n.cols; ++c) gsum += g[c];
    S* gr = gx + static_cast<size_t>(r) * n.cols;
    for (int c = 0; c < n.cols; ++c) gr[c] += g[c] - std::exp(y[c]) * gsum;
  }
}

template <class S>
TensorRef log_softmax(Tape<S>& t, TensorRef a) {
  const S* pa = t.node(a.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols, "log_softmax", &log_softmax_bwd<S>, {a.id});
  for (int r = 0; r < a.rows; ++r) {
    const S* x = pa + static_cast<size_t>(r) * a.cols;
    S* y = out.val.data() + static_cast<size_t>(r) * a.cols;
    S mx = x[0];
    for (int c = 1; c < a.cols; ++c) mx = std::max(mx, x[c]);
    double Z = 0;
    for (int c = 0; c < a.cols; ++c) Z += std::exp(static_cast<double>(x[c] - mx));
    const S lz = static_cast<S>(std::log(Z)) + mx;
    for (int c = 0; c < a.cols; ++c) y[c] = x[c] - lz;
  }
  return t.finish(out);
}

// Soft cross-entropy: -(1/rows) * sum_ij targets_ij * log_probs_ij.
// Targets are treated as constants (no gradient flows into them).
template <class S>
void cross_entropy_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& lp = t.node(n.in[1]);
  if (S* gp = t.grad_sink(n.in[1])) {
    const S* q = t.node(n.in[0]).vptr;
    const S c = n.grad[0] / static_cast<S>(lp.rows);
    const size_t m = static_cast<size_t>(lp.rows) * lp.cols;
    for (size_t i = 0; i < m; ++i) gp[i] -= c * q[i];
  }
}

template <class S>
TensorRef cross_entropy(Tape<S>& t, TensorRef soft_targets, TensorRef log_probs) {
  detail::require<S>(soft_targets.rows == log_probs.rows && soft_targets.cols == log_probs.cols,
                     "cross_entropy", "shape mismatch");
  const S* q = t.node(soft_targets.id).vptr;
  const S* lp = t.node(log_probs.id).vptr;
  Node<S>& out = t.emit(1, 1, "cross_entropy", &cross_entropy_bwd<S>,
                        {soft_targets.id, log_probs.id});
  double acc = 0;
  const int m = log_probs.size();
  for (int i = 0; i < m; ++i) acc += static_cast<double>(q[i]) * lp[i];
  out.val[0] = static_cast<S>(-acc / log_probs.rows);
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Linear algebra ops (Eigen-backed)
// ---------------------------------------------------------------------------

template <class S>
void matmul_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& a = t.node(n.in[0]);
  Node<S>& b = t.node(n.in[1]);
  CMapMat<S> G(n.grad.data(), n.rows, n.cols);
  CMapMat<S> A(a.vptr, a.rows, a.cols);
  CMapMat<S> B(b.vptr, b.rows, b.cols);
  if (S* ga = t.grad_sink(n.in[0]))
    MapMat<S>(ga, a.rows, a.cols).noalias() += G * B.transpose();
  if (S* gb = t.grad_sink(n.in[1]))
    MapMat<S>(gb, b.rows, b.cols).noalias() += A.transpose() * G;
}

template <class S>
TensorRef matmul(Tape<S>& t, TensorRef a, TensorRef b) {
  detail::require<S>(a.cols == b.rows, "matmul", "inner dimensions differ");
  CMapMat<S> A(t.node(a.id).vptr, a.rows, a.cols);
  CMapMat<S> B(t.node(b.id).vptr, b.rows, b.cols);
  Node<S>& out = t.emit(a.rows, b.cols, "matmul", &matmul_bwd<S>, {a.id, b.id});
  MapMat<S>(out.val.data(), a.rows, b.cols).noalias() = A * B;
  return t.finish(out);
}

template <class S>
void affine_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& x = t.node(n.in[0]);
  Node<S>& w = t.node(n.in[1]);
  CMapMat<S> G(n.grad.data(), n.rows, n.cols);
  CMapMat<S> X(x.vptr, x.rows, x.cols);
  CMapMat<S> W(w.vptr, w.rows, w.cols);
  if (S* gx = t.grad_sink(n.in[0]))
    MapMat<S>(gx, x.rows, x.cols).noalias() += G * W.transpose();
  if (S* gw = t.grad_sink(n.in[1]))
    MapMat<S>(gw, w.rows, w.cols).noalias() += X.transpose() * G;
  if (S* gb = t.grad_sink(n.in[2]))
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb, n.cols).noalias() +=
        G.colwise().sum();
}

// x [R x K] * W [K x N] + b [1 x N] broadcast over rows.
template <class S>
TensorRef affine(Tape<S>& t, TensorRef x, TensorRef w, TensorRef b) {
  detail::require<S>(x.cols == w.rows, "affine", "inner dimensions differ");
  detail::require<S>(b.rows == 1 && b.cols == w.cols, "affine", "bias shape mismatch");
  CMapMat<S> X(t.node(x.id).vptr, x.rows, x.cols);
  CMapMat<S> W(t.node(w.id).vptr, w.rows, w.cols);
  Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> B(t.node(b.id).vptr, w.cols);
  Node<S>& out = t.emit(x.rows, w.cols, "affine", &affine_bwd<S>, {x.id, w.id, b.id});
  MapMat<S> O(out.val.data(), x.rows, w.cols);
  O.noalias() = X * W;
  O.rowwise() += B;
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
void concat_cols_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& a = t.node(n.in[0]);
  Node<S>& b = t.node(n.in[1]);
  S* ga = t.grad_sink(n.in[0]);
  S* gb = t.grad_sink(n.in[1]);
  for (int r = 0; r < n.rows; ++r) {
    const S* g = n.grad.data() + static_cast<size_t>(r) * n.cols;
    if (ga)
      for (int c = 0; c < a.cols; ++c) ga[static_cast<size_t>(r) * a.cols + c] += g[c];
    if (gb)
      for (int c = 0; c < b.cols; ++c)
        gb[static_cast<size_t>(r) * b.cols + c] += g[a.cols + c];
  }
}

template <class S>
TensorRef concat_cols(Tape<S>& t, TensorRef a, TensorRef b) {
  detail::require<S>(a.rows == b.rows, "concat", "row counts differ");
  const S* pa = t.node(a.id).vptr;
  const S* pb = t.node(b.id).vptr;
  Node<S>& out = t.emit(a.rows, a.cols + b.cols, "concat", &concat_cols_bwd<S>, {a.id, b.id});
  for (int r = 0; r < a.rows; ++r) {
    S* o = out.val.data() + static_cast<size_t>(r) * out.cols;
    std::copy(pa + static_cast<size_t>(r) * a.cols, pa + static_cast<size_t>(r + 1) * a.cols, o);
    std::copy(pb + static_cast<size_t>(r) * b.cols, pb + static_cast<size_t>(r + 1) * b.cols,
              o + a.cols);
  }
  return t.finish(out);
}

template <class S>
void slice_cols_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& x = t.node(n.in[0]);
  if (S* gx = t.grad_sink(n.in[0])) {
    const int c0 = n.iaux[0];
    for (int r = 0; r < n.rows; ++r)
      for (int c = 0; c < n.cols; ++c)
        gx[static_cast<size_t>(r) * x.cols + c0 + c] +=
            n.grad[static_cast<size_t>(r) * n.cols + c];
  }
}

template <class S>
TensorRef slice_cols(Tape<S>& t, TensorRef x, int col0, int len) {
  detail::require<S>(col0 >= 0 && col0 + len <= x.cols, "slice", "range out of bounds");
  const S* px = t.node(x.id).vptr;
  Node<S>& out = t.emit(x.rows, len, "slice", &slice_cols_bwd<S>, {x.id});
  out.iaux[0] = col0;
  for (int r = 0; r < x.rows; ++r)
    std::copy(px + static_cast<size_t>(r) * x.cols + col0,
              px + static_cast<size_t>(r) * x.cols + col0 + len,
              out.val.data() + static_cast<size_t>(r) * len);
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Spatial filtering: per-(look, bin) complex inner products over channels
// with conjugated weights, matching the offline beamformer convention
// out(d,b) = sum_c conj(W[d,b,c]) * x[b,c].
//
// x: [T x bins*ch*2] with layout ((bin*ch + c)*2 + re/im)
// w: [1 x looks*bins*ch*2] with layout (((look*bins + b)*ch + c)*2 + re/im)
// out: [T x looks*bins*2] with layout ((look*bins + b)*2 + re/im)
// ---------------------------------------------------------------------------

template <class S>
void spatial_filter_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& xn = t.node(n.in[0]);
  const S* x = xn.vptr;
  const S* w = t.node(n.in[1]).vptr;
  S* gx = t.grad_sink(n.in[0]);
  S* gw = t.grad_sink(n.in[1]);
  const int looks = n.iaux[0], bins = n.iaux[1], ch = n.iaux[2];
  const int T = n.rows;
  for (int ti = 0; ti < T; ++ti) {
    const S* xr = x + static_cast<size_t>(ti) * xn.cols;
    S* gxr = gx ? gx + static_cast<size_t>(ti) * xn.cols : nullptr;
    const S* g = n.grad.data() + static_cast<size_t>(ti) * n.cols;
    for (int d = 0; d < looks; ++d) {
      for (int b = 0; b < bins; ++b) {
        const S gre = g[(d * bins + b) * 2];
        const S gim = g[(d * bins + b) * 2 + 1];
        if (gre == S(0) && gim == S(0)) continue;
        for (int c = 0; c < ch; ++c) {
          const size_t wi = (static_cast<size_t>(d) * bins + b) * ch * 2 + c * 2;
          const size_t xi = (static_cast<size_t>(b) * ch + c) * 2;
          const S wre = w[wi], wim = w[wi + 1];
          const S xre = xr[xi], xim = xr[xi + 1];
          if (gxr) {
            gxr[xi] += gre * wre - gim * wim;
            gxr[xi + 1] += gre * wim + gim * wre;
          }
          if (gw) {
            gw[wi] += gre * xre + gim * xim;
            gw[wi + 1] += gre * xim - gim * xre;
          }
        }
      }
    }
  }
}

template <class S>
TensorRef spatial_filter(Tape<S>& t, TensorRef x, TensorRef w, int looks, int bins, int ch) {
  detail::require<S>(x.cols == bins * ch * 2, "spatial_filter", "input layout mismatch");
  detail::require<S>(w.size() == looks * bins * ch * 2, "spatial_filter", "weight layout mismatch");
  const S* px = t.node(x.id).vptr;
  const S* pw = t.node(w.id).vptr;
  Node<S>& out =
      t.emit(x.rows, looks * bins * 2, "spatial_filter", &spatial_filter_bwd<S>, {x.id, w.id});
  out.iaux = {looks, bins, ch, 0};
  for (int ti = 0; ti < x.rows; ++ti) {
    const S* xr = px + static_cast<size_t>(ti) * x.cols;
    S* o = out.val.data() + static_cast<size_t>(ti) * out.cols;
    for (int d = 0; d < looks; ++d) {
      for (int b = 0; b < bins; ++b) {
        S acc_re = S(0), acc_im = S(0);
        for (int c = 0; c < ch; ++c) {
          const size_t wi = (static_cast<size_t>(d) * bins + b) * ch * 2 + c * 2;
          const size_t xi = (static_cast<size_t>(b) * ch + c) * 2;
          const S wre = pw[wi], wim = pw[wi + 1];
          const S xre = xr[xi], xim = xr[xi + 1];
          acc_re += wre * xre + wim * xim;
          acc_im += wre * xim - wim * xre;
        }
        o[(d * bins + b) * 2] = acc_re;
        o[(d * bins + b) * 2 + 1] = acc_im;
      }
    }
  }
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Fused LSTM over a (possibly batched) sequence with zero initial state.
//
// x: [steps*batch x in_dim], step-major: row s*batch + b is item b at step s.
// wx: [in_dim x 4H], wh: [H x 4H], b: [1 x 4H]; gate order (i, f, g, o).
// Output: [steps*batch x H] step-major. reverse=true runs right-to-left over
// steps (for bidirectional stacks) while keeping the output in input order.
// ---------------------------------------------------------------------------

template <class S>
void lstm_seq_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& xn = t.node(n.in[0]);
  Node<S>& wxn = t.node(n.in[1]);
  Node<S>& whn = t.node(n.in[2]);
  const int steps = n.iaux[0], batch = n.iaux[1], H = n.iaux[2];
  const bool reverse = n.iaux[3] != 0;
  const int in_dim = xn.cols;
  const size_t rb = static_cast<size_t>(batch);
  // aux layout: gates [steps*batch*4H], c [steps*batch*H]
  const S* gates = n.aux.data();
  const S* cs = n.aux.data() + static_cast<size_t>(steps) * rb * 4 * H;
  CMapMat<S> Wx(wxn.vptr, in_dim, 4 * H);
  CMapMat<S> Wh(whn.vptr, H, 4 * H);
  S* gx = t.grad_sink(n.in[0]);
  S* gwx = t.grad_sink(n.in[1]);
  S* gwh = t.grad_sink(n.in[2]);
  S* gb = t.grad_sink(n.in[3]);

  RowMat<S> dh = RowMat<S>::Zero(batch, H);
  RowMat<S> dc = RowMat<S>::Zero(batch, H);
  RowMat<S> dz(batch, 4 * H);           // pre-activation gate grads at one step
  RowMat<S> dZ(steps * batch, 4 * H);   // accumulated for the big input GEMMs
  for (int si = steps - 1; si >= 0; --si) {
    const int s = reverse ? steps - 1 - si : si;  // tape-time order
    const size_t row0 = static_cast<size_t>(s) * rb;
    // dh += gradient flowing directly out of this step's h
    for (int bi = 0; bi < batch; ++bi)
      for (int h = 0; h < H; ++h)
        dh(bi, h) += n.grad[(row0 + bi) * H + h];
    const S* gs = gates + (static_cast<size_t>(si)) * rb * 4 * H;
    const S* cr = cs + (static_cast<size_t>(si)) * rb * H;
    const S* cprev = si > 0 ? cs + (static_cast<size_t>(si - 1)) * rb * H : nullptr;
    for (int bi = 0; bi < batch; ++bi) {
      for (int h = 0; h < H; ++h) {
        const S i = gs[bi * 4 * H + h];
        const S f = gs[bi * 4 * H + H + h];
        const S g = gs[bi * 4 * H + 2 * H + h];
        const S o = gs[bi * 4 * H + 3 * H + h];
        const S c = cr[bi * H + h];
        const S tc = std::tanh(c);
        const S dhv = dh(bi, h);
        S dcv = dc(bi, h) + dhv * o * (S(1) - tc * tc);
        const S cp = cprev ? cprev[bi * H + h] : S(0);
        dz(bi, h) = dcv * g * i * (S(1) - i);
        dz(bi, H + h) = dcv * cp * f * (S(1) - f);
        dz(bi, 2 * H + h) = dcv * i * (S(1) - g * g);
        dz(bi, 3 * H + h) = dhv * tc * o * (S(1) - o);
        dc(bi, h) = dcv * f;
      }
    }
    // dh_prev = dz * Wh^T; h_prev rows live at tape step si-1
    dh.noalias() = dz * Wh.transpose();
    if (gwh && si > 0) {
      const int sprev = reverse ? steps - si : si - 1;
      CMapMat<S> Hprev(n.vptr + static_cast<size_t>(sprev) * rb * H, batch, H);
      MapMat<S>(gwh, H, 4 * H).noalias() += Hprev.transpose() * dz;
    }
    dZ.middleRows(s * batch, batch) = dz;
  }
  if (gx) MapMat<S>(gx, xn.rows, in_dim).noalias() += dZ * Wx.transpose();
  if (gwx) MapMat<S>(gwx, in_dim, 4 * H).noalias() += CMapMat<S>(xn.vptr, xn.rows, in_dim).transpose() * dZ;
  if (gb)
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb, 4 * H).noalias() += dZ.colwise().sum();
}

template <class S>
TensorRef lstm_seq(Tape<S>& t, TensorRef x, TensorRef wx, TensorRef wh, TensorRef b,
                   int steps, int batch, bool reverse = false) {
  const int H = wh.rows;
  detail::require<S>(x.rows == steps * batch, "lstm", "row count != steps*batch");
  detail::require<S>(wx.rows == x.cols && wx.cols == 4 * H && wh.cols == 4 * H,
                     "lstm", "weight shapes inconsistent");
  detail::require<S>(b.rows == 1 && b.cols == 4 * H, "lstm", "bias shape mismatch");
  const int in_dim = x.cols;
  CMapMat<S> X(t.node(x.id).vptr, x.rows, in_dim);
  CMapMat<S> Wx(t.node(wx.id).vptr, in_dim, 4 * H);
  CMapMat<S> Wh(t.node(wh.id).vptr, H, 4 * H);
  Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> B(t.node(b.id).vptr, 4 * H);

  // One big GEMM for the input contribution of every step.
  RowMat<S> Z = X * Wx;
  Z.rowwise() += B;

  Node<S>& out = t.emit(x.rows, H, "lstm", &lstm_seq_bwd<S>, {x.id, wx.id, wh.id, b.id});
  out.iaux = {steps, batch, H, reverse ? 1 : 0};
  out.aux.resize(static_cast<size_t>(steps) * batch * 5 * H);
  S* gates = out.aux.data();
  S* cs = out.aux.data() + static_cast<size_t>(steps) * batch * 4 * H;

  RowMat<S> h = RowMat<S>::Zero(batch, H);
  RowMat<S> zrow(batch, 4 * H);
  for (int si = 0; si < steps; ++si) {
    const int s = reverse ? steps - 1 - si : si;
    zrow = Z.middleRows(s * batch, batch);
    if (si > 0) zrow.noalias() += h * Wh;
    S* gs = gates + static_cast<size_t>(si) * batch * 4 * H;
    S* cr = cs + static_cast<size_t>(si) * batch * H;
    const S* cprev = si > 0 ? cs + static_cast<size_t>(si - 1) * batch * H : nullptr;
    for (int bi = 0; bi < batch; ++bi) {
      S* hrow = out.val.data() + (static_cast<size_t>(s) * batch + bi) * H;
      for (int hh = 0; hh < H; ++hh) {
        const S zi = zrow(bi, hh);
        const S zf = zrow(bi, H + hh);
        const S zg = zrow(bi, 2 * H + hh);
        const S zo = zrow(bi, 3 * H + hh);
        const S i = sigmoid_scalar(zi);
        const S f = sigmoid_scalar(zf);
        const S g = std::tanh(zg);
        const S o = sigmoid_scalar(zo);
        const S c = f * (cprev ? cprev[bi * H + hh] : S(0)) + i * g;
        gs[bi * 4 * H + hh] = i;
        gs[bi * 4 * H + H + hh] = f;
        gs[bi * 4 * H + 2 * H + hh] = g;
        gs[bi * 4 * H + 3 * H + hh] = o;
        cr[bi * H + hh] = c;
        hrow[hh] = o * std::tanh(c);
        h(bi, hh) = hrow[hh];
      }
    }
  }
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Frequency windowing for the F-LSTM: [rows x F] -> [n_win*rows x W],
// window w of row r lands at output row w*rows + r (step-major over windows).
// The input is padded by edge replication so the windows tile exactly.
// ---------------------------------------------------------------------------

template <class S>
void freq_windows_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& xn = t.node(n.in[0]);
  if (S* gx = t.grad_sink(n.in[0])) {
    const int n_win = n.iaux[0], W = n.iaux[1], stride = n.iaux[2];
    const int rows = xn.rows, F = xn.cols;
    for (int w = 0; w < n_win; ++w)
      for (int r = 0; r < rows; ++r) {
        const S* g = n.grad.data() + (static_cast<size_t>(w) * rows + r) * W;
        for (int j = 0; j < W; ++j) {
          const int col = std::min(w * stride + j, F - 1);
          gx[static_cast<size_t>(r) * F + col] += g[j];
        }
      }
  }
}

template <class S>
TensorRef freq_windows(Tape<S>& t, TensorRef x, int window, int stride, int n_win) {
  const S* px = t.node(x.id).vptr;
  Node<S>& out = t.emit(n_win * x.rows, window, "freq_windows", &freq_windows_bwd<S>, {x.id});
  out.iaux = {n_win, window, stride, 0};
  for (int w = 0; w < n_win; ++w)
    for (int r = 0; r < x.rows; ++r) {
      S* o = out.val.data() + (static_cast<size_t>(w) * x.rows + r) * window;
      for (int j = 0; j < window; ++j)
        o[j] = px[static_cast<size_t>(r) * x.cols + std::min(w * stride + j, x.cols - 1)];
    }
  return t.finish(out);
}

// Inverse arrangement: [n_win*rows x H] step-major -> [rows x n_win*H].
template <class S>
void window_concat_bwd(Tape<S>& t, int id) {
  Node<S>& n = t.node(id);
  Node<S>& xn = t.node(n.in[0]);
  if (S* gx = t.grad_sink(n.in[0])) {
    const int n_win = n.iaux[0];
    const int rows = n.rows, H = xn.cols;
    for (int w = 0; w < n_win; ++w)
      for (int r = 0; r < rows; ++r)
        for (int h = 0; h < H; ++h)
          gx[(static_cast<size_t>(w) * rows + r) * H + h] +=
              n.grad[static_cast<size_t>(r) * n.cols + w * H + h];
  }
}

template <class S>
TensorRef window_concat(Tape<S>& t, TensorRef x, int n_win) {
  detail::require<S>(x.rows % n_win == 0, "window_concat", "rows not divisible by windows");
  const int rows = x.rows / n_win;
  const int H = x.cols;
  const S* px = t.node(x.id).vptr;
  Node<S>& out = t.emit(rows, n_win * H, "window_concat", &window_concat_bwd<S>, {x.id});
  out.iaux = {n_win, 0, 0, 0};
  for (int w = 0; w < n_win; ++w)
    for (int r = 0; r < rows; ++r)
      std::copy(px + (static_cast<size_t>(w) * rows + r) * H,
                px + (static_cast<size_t>(w) * rows + r + 1) * H,
                out.val.data() + static_cast<size_t>(r) * out.cols + w * H);
  return t.finish(out);
}

// ---------------------------------------------------------------------------
// Optimizer, initializers, gradient checker
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 16;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
      throw std::invalid_argument("betas must lie in (0, 1)");
  }
};

struct AdamState {
  std::vector<float> m, v;
  int64_t t = 0;
};

// Bias-corrected Adam update, in place.
inline void adam_step(std::span<float> params, std::span<const float> grads, AdamState& st,
                      const OptimizerConfig& cfg) {
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.f);
    st.v.assign(params.size(), 0.f);
  }
  st.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = b1 * st.m[i] + (1.0 - b1) * g;
    const double v = b2 * st.v[i] + (1.0 - b2) * g * g;
    st.m[i] = static_cast<float>(m);
    st.v[i] = static_cast<float>(v);
    const double update = cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon);
    params[i] = static_cast<float>(params[i] - update);
  }
}

// I.i.d. normal entries with std = sqrt(2 / (fan_in + fan_out)).
template <class S>
void xavier_normal_fill(std::span<S> w, int fan_in, int fan_out, Rng& rng) {
  const double std = std::sqrt(2.0 / (fan_in + fan_out));
  for (S& x : w) x = static_cast<S>(std * rng.normal());
}

inline std::vector<double> xavier_normal(int fan_in, int fan_out, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(fan_in) * fan_out);
  xavier_normal_fill<double>(w, fan_in, fan_out, rng);
  return w;
}

// Finite-difference gradient checker. `value` must be deterministic (this is
// verified by double evaluation); gradients are checked on a random sample of
// at least `min_coords` coordinates per parameter tensor.
struct GradCheckReport {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

inline GradCheckReport grad_check(
    const std::function<double(const std::vector<std::vector<double>>&)>& value,
    const std::function<std::vector<std::vector<double>>(
        const std::vector<std::vector<double>>&)>& analytic_grad,
    std::vector<std::vector<double>> params, double eps = 1e-6, int min_coords = 64,
    uint64_t seed = 0x5eedULL) {
  const double v0 = value(params);
  if (value(params) != v0)
    throw std::runtime_error("grad_check: objective is not deterministic");
  const std::vector<std::vector<double>> analytic = analytic_grad(params);
  if (analytic.size() != params.size())
    throw std::invalid_argument("grad_check: gradient/param tensor count mismatch");

  Rng rng(seed);
  GradCheckReport rep;
  for (size_t ti = 0; ti < params.size(); ++ti) {
    auto& theta = params[ti];
    const size_t n = theta.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    size_t take = std::min<size_t>(n, static_cast<size_t>(min_coords));
    for (size_t i = 0; i < take; ++i)  // partial Fisher-Yates
      std::swap(idx[i], idx[i + rng.uniform_int(n - i)]);
    for (size_t i = 0; i < take; ++i) {
      const size_t k = idx[i];
      const double orig = theta[k];
      const double a = analytic[ti][k];
      // Central differences at two step sizes: the small step is
      // truncation-limited, the large one rounding-limited. A coordinate is
      // scored by whichever resolves its derivative better.
      double rel = std::numeric_limits<double>::infinity();
      for (const double e : {eps, 100.0 * eps}) {
        theta[k] = orig + e;
        const double fp = value(params);
        theta[k] = orig - e;
        const double fm = value(params);
        theta[k] = orig;
        const double numeric = (fp - fm) / (2.0 * e);
        rel = std::min(rel, std::abs(a - numeric) /
                                std::max({std::abs(a), std::abs(numeric), 1e-8}));
      }
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.coords_checked;
    }
  }
  return rep;
}

}  // namespace beamkd::ad
