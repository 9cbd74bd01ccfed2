#pragma once

// Motion-guided dual interaction: patch saliency scoring from the motion
// mask, Top-K patch selection, asymmetric sparse attention over the selected
// tokens, a convolutional weak-interaction branch for static content, and
// mask-gated scatter reconstruction.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mav/image_ops.hpp"
#include "mav/tensor.hpp"

namespace mav {

// Bijection between patch index i = by*gw + bx and the p x p block at
// (by*p, bx*p). Token dimension is d = C*p*p (channel-major flattening).
struct PatchGrid {
  Index p = 8;
  Index gh = 0, gw = 0;
  Index num_patches() const { return gh * gw; }

  static PatchGrid over(Index h, Index w, Index p) {
    if (h % p != 0 || w % p != 0)
      throw ValueError("PatchGrid: " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by patch " + std::to_string(p) + "; pad first");
    return PatchGrid{p, h / p, w / p};
  }
};

template <class S>
struct SalientSet {
  std::vector<Index> omega;  // sorted ascending, distinct, in [0, N)
  std::vector<S> weights;    // retained scores, aligned with omega
};

enum class KvMode { all_patches, global_token_only };

template <class S>
struct AttentionProj {
  Tensor<S> wq, wk, wv;  // each d x d
};

template <class S>
struct StaticWeights {
  Tensor<S> dw_w;    // C x 3 x 3
  Tensor<S> pw_w;    // C x C
  Tensor<S> conv_w;  // C x C x 3 x 3, zero-initialized (residual identity)
  Tensor<S> conv_b;  // C
};

// S[i] = mean of the motion mask over patch i (Eq-style AvgPool scoring).
template <class S>
Tensor<S> saliency_scores(const Tensor<S>& mask, Index p) {
  Tensor<S> pooled = avg_pool(mask, p);
  return reshape(pooled, Shape{pooled.numel()});
}

// Top-k selection with k = max(1, min(floor(N*tau), k_max)). Ties break to
// the lower patch index; omega is returned sorted ascending.
template <class S>
SalientSet<S> topk_select(const Tensor<S>& scores, double tau, Index k_max) {
  if (scores.rank() != 1) throw ShapeError("topk_select: scores must be rank-1");
  if (tau <= 0.0 || tau > 1.0)
    throw ValueError("topk_select: tau " + std::to_string(tau) + " outside (0,1]");
  if (k_max < 1) throw ValueError("topk_select: k_max must be >= 1");
  const Index n = scores.numel();
  const Index k = std::max<Index>(1, std::min<Index>(static_cast<Index>(n * tau), k_max));
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index(0));
  const S* ps = scores.data();
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return ps[a] > ps[b]; });
  SalientSet<S> out;
  out.omega.assign(order.begin(), order.begin() + k);
  std::sort(out.omega.begin(), out.omega.end());
  out.weights.reserve(k);
  for (Index i : out.omega) out.weights.push_back(ps[i]);
  return out;
}

// Tokens: N x d matrix from non-overlapping p x p blocks, channel-major.
template <class S>
Tensor<S> patch_tokens(const Tensor<S>& x, Index p, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw ShapeError("patch_tokens: expected CxHxW, got " + x.shape().str());
  const Index c = x.extent(0), h = x.extent(1), w = x.extent(2);
  PatchGrid grid = PatchGrid::over(h, w, p);
  const Index n = grid.num_patches(), d = c * p * p;
  Tensor<S> out(Shape{n, d});
  const S* px = x.data();
  S* po = out.data();
  for (Index by = 0; by < grid.gh; ++by)
    for (Index bx = 0; bx < grid.gw; ++bx) {
      S* tok = po + (by * grid.gw + bx) * d;
      Index j = 0;
      for (Index ci = 0; ci < c; ++ci)
        for (Index u = 0; u < p; ++u)
          for (Index v = 0; v < p; ++v, ++j) tok[j] = px[(ci * h + by * p + u) * w + bx * p + v];
    }
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index by = 0; by < grid.gh; ++by)
        for (Index bx = 0; bx < grid.gw; ++bx) {
          const S* tok = go.data() + (by * grid.gw + bx) * d;
          Index j = 0;
          for (Index ci = 0; ci < c; ++ci)
            for (Index u = 0; u < p; ++u)
              for (Index v = 0; v < p; ++v, ++j)
                gx[(ci * h + by * p + u) * w + bx * p + v] += tok[j];
        }
    });
  }
  return out;
}

// Index-copy of k tokens back to their patch blocks; everywhere else zero.
template <class S>
Tensor<S> scatter_tokens(const Tensor<S>& tokens, const std::vector<Index>& omega,
                         const PatchGrid& grid, Index c, GradTape<S>* tape = nullptr) {
  const Index p = grid.p, n = grid.num_patches(), d = c * p * p;
  if (tokens.rank() != 2 || tokens.extent(1) != d ||
      tokens.extent(0) != static_cast<Index>(omega.size()))
    throw ShapeError("scatter_tokens: tokens " + tokens.shape().str() + " vs k=" +
                     std::to_string(omega.size()) + ", d=" + std::to_string(d));
  for (Index i : omega)
    if (i < 0 || i >= n)
      throw ValueError("scatter_tokens: patch index " + std::to_string(i) + " out of range");
  const Index h = grid.gh * p, w = grid.gw * p;
  Tensor<S> out(Shape{c, h, w});
  const S* pt = tokens.data();
  S* po = out.data();
  for (std::size_t r = 0; r < omega.size(); ++r) {
    const Index by = omega[r] / grid.gw, bx = omega[r] % grid.gw;
    const S* tok = pt + r * d;
    Index j = 0;
    for (Index ci = 0; ci < c; ++ci)
      for (Index u = 0; u < p; ++u)
        for (Index v = 0; v < p; ++v, ++j) po[(ci * h + by * p + u) * w + bx * p + v] = tok[j];
  }
  if (tape && tokens.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), tid = tokens.tape_id();
    auto om = omega;
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gt = t.grad(tid);
      for (std::size_t r = 0; r < om.size(); ++r) {
        const Index by = om[r] / grid.gw, bx = om[r] % grid.gw;
        Index j = 0;
        for (Index ci = 0; ci < c; ++ci)
          for (Index u = 0; u < p; ++u)
            for (Index v = 0; v < p; ++v, ++j)
              gt[r * d + j] += go[(ci * h + by * p + u) * w + bx * p + v];
      }
    });
  }
  return out;
}

// Spatial mean of all patch tokens.
template <class S>
Tensor<S> global_token(const Tensor<S>& tokens, GradTape<S>* tape = nullptr) {
  return mean_axis0(tokens, tape);
}

// Key/value source for the attention, by mode:
//  - all_patches: every patch token with the global token added as a residual
//    bias (k x N score matrix; the complexity stays O(k*N)).
//  - global_token_only: the single global token (k x 1 scores; every output
//    row degenerates to V(T_global)).
template <class S>
Tensor<S> build_kv(const Tensor<S>& tokens, const Tensor<S>& t_global, KvMode mode,
                   GradTape<S>* tape = nullptr) {
  if (mode == KvMode::global_token_only)
    return reshape(t_global, Shape{1, t_global.numel()}, tape);
  return add_row_broadcast(tokens, t_global, tape);
}

// F_attn = Softmax(Q(X_sel) K(kv)^T / sqrt(d)) V(kv); row-wise softmax over
// the key axis. Multiply-adds: 2*k*m*d + (k + 2m)*d^2 for m key tokens.
template <class S>
Tensor<S> sparse_attention(const Tensor<S>& x_sel, const Tensor<S>& kv,
                           const AttentionProj<S>& proj, GradTape<S>* tape = nullptr) {
  if (x_sel.rank() != 2 || kv.rank() != 2)
    throw ShapeError("sparse_attention: token matrices must be rank-2");
  const Index d = x_sel.extent(1);
  if (kv.extent(1) != d || proj.wq.extent(0) != d || proj.wq.extent(1) != d ||
      proj.wk.shape() != proj.wq.shape() || proj.wv.shape() != proj.wq.shape())
    throw ShapeError("sparse_attention: dimension mismatch, queries " + x_sel.shape().str() +
                     ", kv " + kv.shape().str() + ", wq " + proj.wq.shape().str());
  Tensor<S> q = matmul(x_sel, proj.wq, tape);
  Tensor<S> kk = matmul(kv, proj.wk, tape);
  Tensor<S> v = matmul(kv, proj.wv, tape);
  Tensor<S> scores = scale(matmul_nt(q, kk, tape), S(1.0 / std::sqrt(static_cast<double>(d))), tape);
  Tensor<S> attn = softmax_lastdim(scores, tape);
  return matmul(attn, v, tape);
}

// Weak interaction branch: residual local refinement,
// F_static = X + conv3x3(act(depthwise_separable(X))).
template <class S>
Tensor<S> static_branch(const Tensor<S>& x, const StaticWeights<S>& w, GradTape<S>* tape = nullptr) {
  Tensor<S> mid = leaky_relu(depthwise_separable(x, w.dw_w, w.pw_w, tape), tape);
  Tensor<S> res = conv2d(mid, w.conv_w, &w.conv_b, tape);
  return add(x, res, tape);
}

// Y = F_static + Smooth(M (.) scatter(F_attn (.) W)). The smoothing kernel is
// bias-free, so an all-zero mask returns F_static exactly. mask must already
// be at the padded working resolution.
template <class S>
Tensor<S> reconstruct(const Tensor<S>& f_static, const Tensor<S>& f_attn,
                      const std::vector<S>& weights, const std::vector<Index>& omega,
                      const Tensor<S>& mask, const Tensor<S>& smooth_w, Index p,
                      GradTape<S>* tape = nullptr) {
  if (f_static.rank() != 3) throw ShapeError("reconstruct: F_static must be CxHxW");
  const Index c = f_static.extent(0), h = f_static.extent(1), w = f_static.extent(2);
  PatchGrid grid = PatchGrid::over(h, w, p);
  if (mask.rank() != 2 || mask.extent(0) != h || mask.extent(1) != w)
    throw ShapeError("reconstruct: mask " + mask.shape().str() + " vs feature " +
                     f_static.shape().str());
  if (weights.size() != omega.size())
    throw ShapeError("reconstruct: weight/index count mismatch");
  Tensor<S> wvec(Shape{static_cast<Index>(weights.size())});
  std::copy(weights.begin(), weights.end(), wvec.data());
  Tensor<S> weighted = scale_rows(f_attn, wvec, tape);
  Tensor<S> scattered = scatter_tokens(weighted, omega, grid, c, tape);
  Tensor<S> gated = broadcast_mul_hw(scattered, mask, tape);
  Tensor<S> smoothed = conv2d(gated, smooth_w, tape);
  return add(f_static, smoothed, tape);
}

// Analytic multiply-add counts for one attention pass; the runtime counter
// over sparse_attention reproduces these exactly.
inline std::uint64_t attention_flops(std::uint64_t n, std::uint64_t k, std::uint64_t d,
                                     KvMode mode) {
  if (mode == KvMode::global_token_only) return 2 * k * d + (k + 2) * d * d;
  return 2 * k * n * d + (k + 2 * n) * d * d;
}

// Dense baseline: queries, keys and values from all N tokens.
inline std::uint64_t dense_attention_flops(std::uint64_t n, std::uint64_t d) {
  return 2 * n * n * d + 3 * n * d * d;
}

}  // namespace mav
