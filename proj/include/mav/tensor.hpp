#pragma once

// Dense row-major tensor (rank 1..4) templated on scalar, plus a reverse-mode
// gradient tape. Tensors are cheap immutable handles: copies alias the same
// buffer, and a buffer is never written again once an op has consumed it.
// Gradient accumulation order is the tape record order, so identical inputs
// give bit-identical gradients across runs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mav/error.hpp"
#include "mav/opcount.hpp"

namespace mav {

using Index = std::int64_t;

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims) {
    if (dims.size() < 1 || dims.size() > 4)
      throw ShapeError("Shape: rank must be 1..4, got " + std::to_string(dims.size()));
    rank_ = static_cast<int>(dims.size());
    int i = 0;
    for (Index d : dims) {
      if (d <= 0) throw ShapeError("Shape: extents must be positive");
      ext_[i++] = d;
    }
  }

  int rank() const { return rank_; }
  Index extent(int i) const { return ext_[i]; }
  Index numel() const {
    Index n = 1;
    for (int i = 0; i < rank_; ++i) n *= ext_[i];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (ext_[i] != o.ext_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    for (int i = 0; i < rank_; ++i) os << (i ? "x" : "") << ext_[i];
    return os.str();
  }

 private:
  std::array<Index, 4> ext_{1, 1, 1, 1};
  int rank_ = 0;
};

template <class S>
class GradTape;

template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(const Shape& s, S fill = S(0))
      : shape_(s), data_(std::make_shared<std::vector<S>>(s.numel(), fill)) {}
  Tensor(const Shape& s, std::vector<S> values) : shape_(s), data_(std::make_shared<std::vector<S>>(std::move(values))) {
    if (static_cast<Index>(data_->size()) != s.numel())
      throw ShapeError("Tensor: data length " + std::to_string(data_->size()) +
                       " does not match shape " + s.str());
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank(); }
  Index extent(int i) const { return shape_.extent(i); }
  Index numel() const { return shape_.numel(); }
  bool empty() const { return !data_; }

  const S* data() const { return data_->data(); }
  // Writable view; only meaningful before the tensor is consumed by any op.
  S* data() { return data_->data(); }

  S at(Index i) const { return (*data_)[i]; }
  S at(Index i, Index j) const { return (*data_)[i * shape_.extent(1) + j]; }
  S at(Index i, Index j, Index k) const {
    return (*data_)[(i * shape_.extent(1) + j) * shape_.extent(2) + k];
  }
  S at(Index i, Index j, Index k, Index l) const {
    return (*data_)[((i * shape_.extent(1) + j) * shape_.extent(2) + k) * shape_.extent(3) + l];
  }

  bool tracked() const { return tid_ >= 0; }
  int tape_id() const { return tid_; }
  // Forgets any tape association; required before watching the same tensor
  // on a fresh tape (one tape per training step).
  void clear_tape_id() { tid_ = -1; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  int tid_ = -1;

  template <class T>
  friend class GradTape;
  template <class T>
  friend Tensor<T> reshape(const Tensor<T>& x, const Shape& s, GradTape<T>* tape);
};

template <class S>
bool all_finite(const Tensor<S>& t) {
  const S* p = t.data();
  for (Index i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

// Reverse-mode tape. Nodes are replayed in exact reverse record order; each
// node accumulates into its inputs' gradient buffers, so a tensor consumed by
// several ops receives the fixed-order sum of all contributions.
template <class S>
class GradTape {
 public:
  using BackFn = std::function<void(GradTape<S>&)>;

  // Marks a leaf tensor whose gradient should be collected.
  void watch(Tensor<S>& t) {
    if (t.tid_ < 0) t.tid_ = alloc(t.shape());
  }

  Tensor<S> grad_of(const Tensor<S>& t) {
    if (t.tid_ < 0) throw ValueError("grad_of: tensor is not tracked by this tape");
    Tensor<S> g(t.shape());
    const auto& v = grad(t.tid_);
    std::copy(v.begin(), v.end(), g.data());
    return g;
  }

  Index num_nodes() const { return static_cast<Index>(nodes_.size()); }

  // --- recording internals, used by ops ---
  int alloc(const Shape& s) {
    shapes_.push_back(s);
    grads_.emplace_back();
    return static_cast<int>(shapes_.size()) - 1;
  }
  void adopt(Tensor<S>& out) { out.tid_ = alloc(out.shape()); }
  std::vector<S>& grad(int tid) {
    auto& g = grads_[tid];
    if (g.empty()) g.assign(shapes_[tid].numel(), S(0));
    return g;
  }
  void record(BackFn fn) { nodes_.push_back(std::move(fn)); }

  void run_backward(const Tensor<S>& loss) {
    if (loss.numel() != 1 || !loss.tracked())
      throw ValueError("backward: loss must be a tracked scalar tensor");
    for (auto& g : grads_) g.clear();
    grad(loss.tape_id())[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
  }

 private:
  std::vector<Shape> shapes_;
  std::vector<std::vector<S>> grads_;
  std::vector<BackFn> nodes_;
};

template <class S>
void backward(GradTape<S>& tape, const Tensor<S>& loss) {
  tape.run_backward(loss);
}

namespace detail {

template <class S>
void axpy(std::vector<S>& acc, const std::vector<S>& v, S a = S(1)) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a * v[i];
}

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using CMatMap = Eigen::Map<const RowMat<S>>;

// c (m x n) = a (m x k) * b (k x n), accumulating when acc is set.
template <class S>
void gemm(const S* a, Index m, Index k, const S* b, Index n, S* c, bool acc = false) {
  CMatMap<S> A(a, m, k), B(b, k, n);
  MatMap<S> C(c, m, n);
  if (acc)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
  opcount::bump(static_cast<std::uint64_t>(m) * k * n);
}

// c (m x n) = a (m x k) * b (n x k)^T
template <class S>
void gemm_nt(const S* a, Index m, Index k, const S* b, Index n, S* c, bool acc = false) {
  CMatMap<S> A(a, m, k), B(b, n, k);
  MatMap<S> C(c, m, n);
  if (acc)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
  opcount::bump(static_cast<std::uint64_t>(m) * k * n);
}

// c (m x n) = a (k x m)^T * b (k x n)
template <class S>
void gemm_tn(const S* a, Index k, Index m, const S* b, Index n, S* c, bool acc = false) {
  CMatMap<S> A(a, k, m), B(b, k, n);
  MatMap<S> C(c, m, n);
  if (acc)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
  opcount::bump(static_cast<std::uint64_t>(m) * k * n);
}

// Shared-data capture for backward closures.
template <class S>
std::shared_ptr<std::vector<S>> keep(const Tensor<S>& t) {
  return std::make_shared<std::vector<S>>(t.data(), t.data() + t.numel());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S, class Fwd, class DA, class DB>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape,
                    Fwd f, DA da, DB db) {
  check_same_shape(name, a, b);
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  if (tape && (a.tracked() || b.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), aid = a.tape_id(), bid = b.tape_id();
    auto ka = detail::keep(a);
    auto kb = detail::keep(b);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      if (aid >= 0) {
        auto& ga = t.grad(aid);
        for (Index i = 0; i < n; ++i) ga[i] += da((*ka)[i], (*kb)[i]) * go[i];
      }
      if (bid >= 0) {
        auto& gb = t.grad(bid);
        for (Index i = 0; i < n; ++i) gb[i] += db((*ka)[i], (*kb)[i]) * go[i];
      }
    });
  }
  return out;
}

template <class S, class Fwd, class DX>
Tensor<S> unary_op(const Tensor<S>& x, GradTape<S>* tape, Fwd f, DX dx) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const Index n = x.numel();
  for (Index i = 0; i < n; ++i) po[i] = f(px[i]);
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    auto kx = detail::keep(x);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index i = 0; i < n; ++i) gx[i] += dx((*kx)[i]) * go[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  return binary_op(
      "add", a, b, tape, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  return binary_op(
      "sub", a, b, tape, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  return binary_op(
      "mul", a, b, tape, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <class S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  return binary_op(
      "divide", a, b, tape, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c, GradTape<S>* tape = nullptr) {
  return unary_op(
      x, tape, [c](S v) { return c * v; }, [c](S) { return c; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S c, GradTape<S>* tape = nullptr) {
  return unary_op(
      x, tape, [c](S v) { return v + c; }, [](S) { return S(1); });
}

template <class S>
Tensor<S> abs_val(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  return unary_op(
      x, tape, [](S v) { return std::abs(v); },
      [](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

inline constexpr double kLeakySlope = 0.1;

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  const S a = S(kLeakySlope);
  return unary_op(
      x, tape, [a](S v) { return v > S(0) ? v : a * v; },
      [a](S v) { return v > S(0) ? S(1) : a; });
}

template <class S>
Tensor<S> sigmoid_op(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const Index n = x.numel();
  for (Index i = 0; i < n; ++i) po[i] = S(1) / (S(1) + std::exp(-px[i]));
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    auto ko = detail::keep(out);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index i = 0; i < n; ++i) {
        const S s = (*ko)[i];
        gx[i] += s * (S(1) - s) * go[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw ShapeError("matmul: incompatible shapes " + a.shape().str() + " and " + b.shape().str());
  const Index m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<S> out(Shape{m, n});
  detail::gemm(a.data(), m, k, b.data(), n, out.data());
  if (tape && (a.tracked() || b.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), aid = a.tape_id(), bid = b.tape_id();
    auto ka = detail::keep(a);
    auto kb = detail::keep(b);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      if (aid >= 0) detail::gemm_nt(go.data(), m, n, kb->data(), k, t.grad(aid).data(), true);
      if (bid >= 0) detail::gemm_tn(ka->data(), m, k, go.data(), n, t.grad(bid).data(), true);
    });
  }
  return out;
}

// a (m x d) * b (n x d)^T -> m x n
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1))
    throw ShapeError("matmul_nt: incompatible shapes " + a.shape().str() + " and " + b.shape().str());
  const Index m = a.extent(0), d = a.extent(1), n = b.extent(0);
  Tensor<S> out(Shape{m, n});
  detail::gemm_nt(a.data(), m, d, b.data(), n, out.data());
  if (tape && (a.tracked() || b.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), aid = a.tape_id(), bid = b.tape_id();
    auto ka = detail::keep(a);
    auto kb = detail::keep(b);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);  // m x n
      if (aid >= 0) detail::gemm(go.data(), m, n, kb->data(), d, t.grad(aid).data(), true);
      if (bid >= 0) detail::gemm_tn(go.data(), m, n, ka->data(), d, t.grad(bid).data(), true);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / reductions
// ---------------------------------------------------------------------------

// Softmax over the last axis, max-subtracted for stability.
template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  const Index cols = x.extent(x.rank() - 1);
  const Index rows = x.numel() / cols;
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const S* xr = px + r * cols;
    S* yr = po + r * cols;
    S m = xr[0];
    for (Index c = 1; c < cols; ++c) m = std::max(m, xr[c]);
    S sum = S(0);
    for (Index c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - m);
      sum += yr[c];
    }
    for (Index c = 0; c < cols; ++c) yr[c] /= sum;
  }
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    auto ko = detail::keep(out);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index r = 0; r < rows; ++r) {
        const S* y = ko->data() + r * cols;
        const S* g = go.data() + r * cols;
        S dot = S(0);
        for (Index c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (Index c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(Shape{1});
  S s = S(0);
  const S* px = x.data();
  for (Index i = 0; i < x.numel(); ++i) s += px[i];
  out.data()[0] = s;
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    const Index n = x.numel();
    tape->record([=](GradTape<S>& t) {
      const S g = t.grad(oid)[0];
      auto& gx = t.grad(xid);
      for (Index i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  return scale(sum_all(x, tape), S(1) / S(x.numel()), tape);
}

// Mean over axis 0 of an N x d matrix -> length-d vector.
template <class S>
Tensor<S> mean_axis0(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  if (x.rank() != 2) throw ShapeError("mean_axis0: expected rank-2, got " + x.shape().str());
  const Index n = x.extent(0), d = x.extent(1);
  Tensor<S> out(Shape{d});
  const S* px = x.data();
  S* po = out.data();
  for (Index j = 0; j < d; ++j) po[j] = S(0);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) po[j] += px[i * d + j];
  for (Index j = 0; j < d; ++j) po[j] /= S(n);
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      const S inv = S(1) / S(n);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) gx[i * d + j] += go[j] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, const Shape& s, GradTape<S>* tape = nullptr) {
  if (s.numel() != x.numel())
    throw ShapeError("reshape: element count mismatch " + x.shape().str() + " -> " + s.str());
  Tensor<S> out;
  out.shape_ = s;
  out.data_ = x.data_;  // alias; tensors are immutable once consumed
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) { detail::axpy(t.grad(xid), t.grad(oid)); });
  }
  return out;
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  Tensor<To> out(x.shape());
  const From* px = x.data();
  To* po = out.data();
  for (Index i = 0; i < x.numel(); ++i) po[i] = static_cast<To>(px[i]);
  return out;
}

// Concatenate rank-3 tensors along the channel (first) axis.
template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts, GradTape<S>* tape = nullptr) {
  if (parts.empty()) throw ValueError("concat_channels: no inputs");
  const Index h = parts[0].extent(1), w = parts[0].extent(2);
  Index ctot = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.extent(1) != h || p.extent(2) != w)
      throw ShapeError("concat_channels: incompatible part shape " + p.shape().str());
    ctot += p.extent(0);
  }
  Tensor<S> out(Shape{ctot, h, w});
  S* po = out.data();
  Index off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), po + off);
    off += p.numel();
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.tracked();
  if (tape && any) {
    tape->adopt(out);
    int oid = out.tape_id();
    std::vector<std::pair<int, Index>> ins;  // (tid, numel), in order
    for (const auto& p : parts) ins.emplace_back(p.tape_id(), p.numel());
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      Index o = 0;
      for (auto [tid, n] : ins) {
        if (tid >= 0) {
          auto& g = t.grad(tid);
          for (Index i = 0; i < n; ++i) g[i] += go[o + i];
        }
        o += n;
      }
    });
  }
  return out;
}

// Row gather: x (N x d), idx (k) -> k x d.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<Index>& idx, GradTape<S>* tape = nullptr) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + x.shape().str());
  const Index n = x.extent(0), d = x.extent(1), k = static_cast<Index>(idx.size());
  for (Index i : idx)
    if (i < 0 || i >= n) throw ValueError("gather_rows: index " + std::to_string(i) + " out of range");
  Tensor<S> out(Shape{k, d});
  const S* px = x.data();
  S* po = out.data();
  for (Index r = 0; r < k; ++r) std::copy(px + idx[r] * d, px + (idx[r] + 1) * d, po + r * d);
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    auto ki = idx;
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index r = 0; r < k; ++r)
        for (Index j = 0; j < d; ++j) gx[ki[r] * d + j] += go[r * d + j];
    });
  }
  return out;
}

// Row scatter into an N x d zero matrix; inverse of gather_rows for distinct idx.
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& rows, const std::vector<Index>& idx, Index n,
                       GradTape<S>* tape = nullptr) {
  if (rows.rank() != 2 || rows.extent(0) != static_cast<Index>(idx.size()))
    throw ShapeError("scatter_rows: rows shape " + rows.shape().str() + " vs " +
                     std::to_string(idx.size()) + " indices");
  const Index k = rows.extent(0), d = rows.extent(1);
  for (Index i : idx)
    if (i < 0 || i >= n) throw ValueError("scatter_rows: index " + std::to_string(i) + " out of range");
  Tensor<S> out(Shape{n, d});
  const S* pr = rows.data();
  S* po = out.data();
  for (Index r = 0; r < k; ++r) std::copy(pr + r * d, pr + (r + 1) * d, po + idx[r] * d);
  if (tape && rows.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), rid = rows.tape_id();
    auto ki = idx;
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gr = t.grad(rid);
      for (Index r = 0; r < k; ++r)
        for (Index j = 0; j < d; ++j) gr[r * d + j] += go[ki[r] * d + j];
    });
  }
  return out;
}

// x (N x d) + row (d), broadcast over rows.
template <class S>
Tensor<S> add_row_broadcast(const Tensor<S>& x, const Tensor<S>& row, GradTape<S>* tape = nullptr) {
  if (x.rank() != 2 || row.rank() != 1 || row.extent(0) != x.extent(1))
    throw ShapeError("add_row_broadcast: " + x.shape().str() + " vs " + row.shape().str());
  const Index n = x.extent(0), d = x.extent(1);
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pr = row.data();
  S* po = out.data();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) po[i * d + j] = px[i * d + j] + pr[j];
  if (tape && (x.tracked() || row.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id(), rid = row.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      if (xid >= 0) detail::axpy(t.grad(xid), go);
      if (rid >= 0) {
        auto& gr = t.grad(rid);
        for (Index i = 0; i < n; ++i)
          for (Index j = 0; j < d; ++j) gr[j] += go[i * d + j];
      }
    });
  }
  return out;
}

// Scale row i of x (k x d) by w[i].
template <class S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& w, GradTape<S>* tape = nullptr) {
  if (x.rank() != 2 || w.rank() != 1 || w.extent(0) != x.extent(0))
    throw ShapeError("scale_rows: " + x.shape().str() + " vs " + w.shape().str());
  const Index k = x.extent(0), d = x.extent(1);
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pw = w.data();
  S* po = out.data();
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < d; ++j) po[i * d + j] = px[i * d + j] * pw[i];
  if (tape && (x.tracked() || w.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id(), wid = w.tape_id();
    auto kx = detail::keep(x);
    auto kw = detail::keep(w);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      if (xid >= 0) {
        auto& gx = t.grad(xid);
        for (Index i = 0; i < k; ++i)
          for (Index j = 0; j < d; ++j) gx[i * d + j] += go[i * d + j] * (*kw)[i];
      }
      if (wid >= 0) {
        auto& gw = t.grad(wid);
        for (Index i = 0; i < k; ++i)
          for (Index j = 0; j < d; ++j) gw[i] += go[i * d + j] * (*kx)[i * d + j];
      }
    });
  }
  return out;
}

// out = w[0]*a + w[1]*b + w[2]*c with w a length-3 tensor.
template <class S>
Tensor<S> weighted_sum3(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& c,
                        const Tensor<S>& w, GradTape<S>* tape = nullptr) {
  check_same_shape("weighted_sum3", a, b);
  check_same_shape("weighted_sum3", a, c);
  if (w.numel() != 3) throw ShapeError("weighted_sum3: weights must have 3 elements");
  Tensor<S> out(a.shape());
  const S w0 = w.at(0), w1 = w.at(1), w2 = w.at(2);
  const S* pa = a.data();
  const S* pb = b.data();
  const S* pc = c.data();
  S* po = out.data();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) po[i] = w0 * pa[i] + w1 * pb[i] + w2 * pc[i];
  bool any = a.tracked() || b.tracked() || c.tracked() || w.tracked();
  if (tape && any) {
    tape->adopt(out);
    int oid = out.tape_id(), ai = a.tape_id(), bi = b.tape_id(), ci = c.tape_id(), wi = w.tape_id();
    auto ka = detail::keep(a);
    auto kb = detail::keep(b);
    auto kc = detail::keep(c);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      if (ai >= 0) detail::axpy(t.grad(ai), go, w0);
      if (bi >= 0) detail::axpy(t.grad(bi), go, w1);
      if (ci >= 0) detail::axpy(t.grad(ci), go, w2);
      if (wi >= 0) {
        auto& gw = t.grad(wi);
        S s0 = 0, s1 = 0, s2 = 0;
        for (Index i = 0; i < n; ++i) {
          s0 += go[i] * (*ka)[i];
          s1 += go[i] * (*kb)[i];
          s2 += go[i] * (*kc)[i];
        }
        gw[0] += s0;
        gw[1] += s1;
        gw[2] += s2;
      }
    });
  }
  return out;
}

// Per-pixel select between a and b (rank-3 C x H x W) by a rank-2 gate g in
// [0,1]: out = g*a + (1-g)*b. Pixels with g exactly 0 or 1 copy the source
// value unchanged. The gate itself receives no gradient.
template <class S>
Tensor<S> mask_blend(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& gate,
                     GradTape<S>* tape = nullptr) {
  check_same_shape("mask_blend", a, b);
  if (a.rank() != 3 || gate.rank() != 2 || gate.extent(0) != a.extent(1) ||
      gate.extent(1) != a.extent(2))
    throw ShapeError("mask_blend: gate " + gate.shape().str() + " vs input " + a.shape().str());
  const Index c = a.extent(0), hw = a.extent(1) * a.extent(2);
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  const S* pg = gate.data();
  S* po = out.data();
  for (Index ch = 0; ch < c; ++ch)
    for (Index p = 0; p < hw; ++p) {
      const S g = pg[p];
      const Index i = ch * hw + p;
      po[i] = g == S(0) ? pb[i] : (g == S(1) ? pa[i] : g * pa[i] + (S(1) - g) * pb[i]);
    }
  if (tape && (a.tracked() || b.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), ai = a.tape_id(), bi = b.tape_id();
    auto kg = detail::keep(gate);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      for (Index ch = 0; ch < c; ++ch)
        for (Index p = 0; p < hw; ++p) {
          const S g = (*kg)[p];
          const Index i = ch * hw + p;
          if (ai >= 0) t.grad(ai)[i] += g * go[i];
          if (bi >= 0) t.grad(bi)[i] += (S(1) - g) * go[i];
        }
    });
  }
  return out;
}

// Multiply each channel of x (C x H x W) by the rank-2 map m (H x W).
// m is treated as a constant.
template <class S>
Tensor<S> broadcast_mul_hw(const Tensor<S>& x, const Tensor<S>& m, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3 || m.rank() != 2 || m.extent(0) != x.extent(1) || m.extent(1) != x.extent(2))
    throw ShapeError("broadcast_mul_hw: map " + m.shape().str() + " vs input " + x.shape().str());
  const Index c = x.extent(0), hw = x.extent(1) * x.extent(2);
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pm = m.data();
  S* po = out.data();
  for (Index ch = 0; ch < c; ++ch)
    for (Index p = 0; p < hw; ++p) po[ch * hw + p] = px[ch * hw + p] * pm[p];
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    auto km = detail::keep(m);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index ch = 0; ch < c; ++ch)
        for (Index p = 0; p < hw; ++p) gx[ch * hw + p] += go[ch * hw + p] * (*km)[p];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeded creation helpers
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> uniform(const Shape& s, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<S> out(s);
  std::uniform_real_distribution<double> dist(lo, hi);
  S* p = out.data();
  for (Index i = 0; i < s.numel(); ++i) p[i] = static_cast<S>(dist(rng));
  return out;
}

template <class S>
Tensor<S> normal(const Shape& s, std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<S> out(s);
  std::normal_distribution<double> dist(mean, stddev);
  S* p = out.data();
  for (Index i = 0; i < s.numel(); ++i) p[i] = static_cast<S>(dist(rng));
  return out;
}

}  // namespace mav
