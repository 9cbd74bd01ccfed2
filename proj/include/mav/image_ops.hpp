#pragma once

// Spatial kernels on C x H x W feature maps: same-padded convolutions (zero
// extension), non-overlapping average pooling, valid-window box filtering and
// clamp-to-edge bilinear warping. Convolutions run as im2col + GEMM so the
// multiply-add counter sees exactly H*W*Cout*Cin*k*k per call.

#include <cmath>
#include <vector>

#include "mav/tensor.hpp"

namespace mav {

namespace detail {

// cols is (C*k*k) x (H*W); row index (ci*k + u)*k + v. Zero padding.
template <class S>
void im2col(const S* x, Index c, Index h, Index w, Index k, S* cols) {
  const Index r = k / 2, hw = h * w;
  Index row = 0;
  for (Index ci = 0; ci < c; ++ci)
    for (Index u = 0; u < k; ++u)
      for (Index v = 0; v < k; ++v, ++row) {
        S* dst = cols + row * hw;
        const Index dy = u - r, dx = v - r;
        for (Index y = 0; y < h; ++y) {
          const Index iy = y + dy;
          if (iy < 0 || iy >= h) {
            std::fill(dst + y * w, dst + (y + 1) * w, S(0));
            continue;
          }
          const S* src = x + (ci * h + iy) * w;
          for (Index xx = 0; xx < w; ++xx) {
            const Index ix = xx + dx;
            dst[y * w + xx] = (ix < 0 || ix >= w) ? S(0) : src[ix];
          }
        }
      }
}

template <class S>
void col2im_add(const S* cols, Index c, Index h, Index w, Index k, S* dx) {
  const Index r = k / 2, hw = h * w;
  Index row = 0;
  for (Index ci = 0; ci < c; ++ci)
    for (Index u = 0; u < k; ++u)
      for (Index v = 0; v < k; ++v, ++row) {
        const S* src = cols + row * hw;
        const Index dy = u - r, dxo = v - r;
        for (Index y = 0; y < h; ++y) {
          const Index iy = y + dy;
          if (iy < 0 || iy >= h) continue;
          S* dst = dx + (ci * h + iy) * w;
          for (Index xx = 0; xx < w; ++xx) {
            const Index ix = xx + dxo;
            if (ix >= 0 && ix < w) dst[ix] += src[y * w + xx];
          }
        }
      }
}

}  // namespace detail

// Same-padded stride-1 convolution. input: Cin x H x W, kernel:
// Cout x Cin x k x k with k odd, optional bias of length Cout.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias = nullptr,
                 GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw ShapeError("conv2d: input must be CxHxW, got " + x.shape().str());
  if (w.rank() != 4) throw ShapeError("conv2d: kernel must be CoutxCinxkxk, got " + w.shape().str());
  const Index cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const Index cout = w.extent(0), k = w.extent(2);
  if (w.extent(2) != w.extent(3) || k % 2 == 0)
    throw ShapeError("conv2d: kernel window must be square and odd, got " + w.shape().str());
  if (w.extent(1) != cin)
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.extent(1)) +
                     " input channels (kernel " + w.shape().str() + ") but input has " +
                     std::to_string(cin) + " (input " + x.shape().str() + ")");
  if (bias && (bias->rank() != 1 || bias->extent(0) != cout))
    throw ShapeError("conv2d: bias shape " + bias->shape().str() + " vs Cout " + std::to_string(cout));

  const Index hw = h * wd, ckk = cin * k * k;
  std::vector<S> cols(static_cast<std::size_t>(ckk * hw));
  detail::im2col(x.data(), cin, h, wd, k, cols.data());
  Tensor<S> out(Shape{cout, h, wd});
  detail::gemm(w.data(), cout, ckk, cols.data(), hw, out.data());
  if (bias) {
    S* po = out.data();
    const S* pb = bias->data();
    for (Index co = 0; co < cout; ++co)
      for (Index p = 0; p < hw; ++p) po[co * hw + p] += pb[co];
  }

  bool any = x.tracked() || w.tracked() || (bias && bias->tracked());
  if (tape && any) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id(), wid = w.tape_id();
    int bid = bias ? bias->tape_id() : -1;
    auto kx = detail::keep(x);
    auto kw = detail::keep(w);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);  // Cout x HW
      if (wid >= 0) {
        std::vector<S> c2(static_cast<std::size_t>(ckk * hw));
        detail::im2col(kx->data(), cin, h, wd, k, c2.data());
        detail::gemm_nt(go.data(), cout, hw, c2.data(), ckk, t.grad(wid).data(), true);
      }
      if (xid >= 0) {
        std::vector<S> dcols(static_cast<std::size_t>(ckk * hw));
        detail::gemm_tn(kw->data(), cout, ckk, go.data(), hw, dcols.data());
        detail::col2im_add(dcols.data(), cin, h, wd, k, t.grad(xid).data());
      }
      if (bid >= 0) {
        auto& gb = t.grad(bid);
        for (Index co = 0; co < cout; ++co) {
          S s = S(0);
          for (Index p = 0; p < hw; ++p) s += go[co * hw + p];
          gb[co] += s;
        }
      }
    });
  }
  return out;
}

// Bias-free overload; avoids deducing the bias pointer from nullptr.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, GradTape<S>* tape) {
  return conv2d(x, w, static_cast<const Tensor<S>*>(nullptr), tape);
}

// Per-channel spatial convolution. input: C x H x W, kernel: C x k x k.
template <class S>
Tensor<S> depthwise_conv(const Tensor<S>& x, const Tensor<S>& w, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw ShapeError("depthwise_conv: input must be CxHxW, got " + x.shape().str());
  if (w.rank() != 3 || w.extent(1) != w.extent(2) || w.extent(1) % 2 == 0)
    throw ShapeError("depthwise_conv: kernel must be Cxkxk with k odd, got " + w.shape().str());
  if (w.extent(0) != x.extent(0))
    throw ShapeError("depthwise_conv: kernel has " + std::to_string(w.extent(0)) +
                     " channels (kernel " + w.shape().str() + ") but input has " +
                     std::to_string(x.extent(0)) + " (input " + x.shape().str() + ")");
  const Index c = x.extent(0), h = x.extent(1), wd = x.extent(2), k = w.extent(1), r = k / 2;
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pw = w.data();
  S* po = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < wd; ++xx) {
        S acc = S(0);
        for (Index u = 0; u < k; ++u) {
          const Index iy = y + u - r;
          if (iy < 0 || iy >= h) continue;
          for (Index v = 0; v < k; ++v) {
            const Index ix = xx + v - r;
            if (ix < 0 || ix >= wd) continue;
            acc += pw[(ci * k + u) * k + v] * px[(ci * h + iy) * wd + ix];
          }
        }
        po[(ci * h + y) * wd + xx] = acc;
      }
  opcount::bump(static_cast<std::uint64_t>(h) * wd * c * k * k);

  if (tape && (x.tracked() || w.tracked())) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id(), wid = w.tape_id();
    auto kx = detail::keep(x);
    auto kw = detail::keep(w);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      for (Index ci = 0; ci < c; ++ci)
        for (Index y = 0; y < h; ++y)
          for (Index xx = 0; xx < wd; ++xx) {
            const S g = go[(ci * h + y) * wd + xx];
            for (Index u = 0; u < k; ++u) {
              const Index iy = y + u - r;
              if (iy < 0 || iy >= h) continue;
              for (Index v = 0; v < k; ++v) {
                const Index ix = xx + v - r;
                if (ix < 0 || ix >= wd) continue;
                if (xid >= 0)
                  t.grad(xid)[(ci * h + iy) * wd + ix] += (*kw)[(ci * k + u) * k + v] * g;
                if (wid >= 0)
                  t.grad(wid)[(ci * k + u) * k + v] += (*kx)[(ci * h + iy) * wd + ix] * g;
              }
            }
          }
    });
  }
  return out;
}

// Depthwise separable convolution: per-channel k x k followed by 1x1 channel
// mixing. pw: Cout x C. Costs H*W*(C*k^2 + C*Cout) multiply-adds.
template <class S>
Tensor<S> depthwise_separable(const Tensor<S>& x, const Tensor<S>& dw, const Tensor<S>& pw,
                              GradTape<S>* tape = nullptr) {
  Tensor<S> mid = depthwise_conv(x, dw, tape);
  if (pw.rank() != 2 || pw.extent(1) != x.extent(0))
    throw ShapeError("depthwise_separable: pointwise " + pw.shape().str() + " vs channels " +
                     std::to_string(x.extent(0)));
  const Index h = x.extent(1), w = x.extent(2);
  Tensor<S> mid2 = reshape(mid, Shape{x.extent(0), h * w}, tape);
  Tensor<S> out = matmul(pw, mid2, tape);
  return reshape(out, Shape{pw.extent(0), h, w}, tape);
}

// Non-overlapping p x p mean pooling of a rank-2 map. Extents must divide by
// p; callers pad beforehand.
template <class S>
Tensor<S> avg_pool(const Tensor<S>& x, Index p, GradTape<S>* tape = nullptr) {
  if (x.rank() != 2) throw ShapeError("avg_pool: expected rank-2 map, got " + x.shape().str());
  const Index h = x.extent(0), w = x.extent(1);
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw ValueError("avg_pool: extents " + x.shape().str() + " not divisible by window " +
                     std::to_string(p) + "; pad the input to a multiple first");
  const Index oh = h / p, ow = w / p;
  Tensor<S> out(Shape{oh, ow});
  const S* px = x.data();
  S* po = out.data();
  const S inv = S(1) / S(p * p);
  for (Index by = 0; by < oh; ++by)
    for (Index bx = 0; bx < ow; ++bx) {
      S acc = S(0);
      for (Index u = 0; u < p; ++u)
        for (Index v = 0; v < p; ++v) acc += px[(by * p + u) * w + bx * p + v];
      po[by * ow + bx] = acc * inv;
    }
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      const S iv = S(1) / S(p * p);
      for (Index by = 0; by < oh; ++by)
        for (Index bx = 0; bx < ow; ++bx) {
          const S g = go[by * ow + bx] * iv;
          for (Index u = 0; u < p; ++u)
            for (Index v = 0; v < p; ++v) gx[(by * p + u) * w + bx * p + v] += g;
        }
    });
  }
  return out;
}

// Mean over every fully-contained win x win window of a rank-2 map;
// output is (H-win+1) x (W-win+1).
template <class S>
Tensor<S> box_filter_valid(const Tensor<S>& x, Index win, GradTape<S>* tape = nullptr) {
  if (x.rank() != 2) throw ShapeError("box_filter_valid: expected rank-2 map, got " + x.shape().str());
  const Index h = x.extent(0), w = x.extent(1);
  if (win <= 0 || win > h || win > w)
    throw ValueError("box_filter_valid: window " + std::to_string(win) + " exceeds map " + x.shape().str());
  const Index oh = h - win + 1, ow = w - win + 1;
  Tensor<S> out(Shape{oh, ow});
  const S* px = x.data();
  S* po = out.data();
  const S inv = S(1) / S(win * win);
  for (Index y = 0; y < oh; ++y)
    for (Index xx = 0; xx < ow; ++xx) {
      S acc = S(0);
      for (Index u = 0; u < win; ++u)
        for (Index v = 0; v < win; ++v) acc += px[(y + u) * w + xx + v];
      po[y * ow + xx] = acc * inv;
    }
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      const S iv = S(1) / S(win * win);
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          const S g = go[y * ow + xx] * iv;
          for (Index u = 0; u < win; ++u)
            for (Index v = 0; v < win; ++v) gx[(y + u) * w + xx + v] += g;
        }
    });
  }
  return out;
}

// Warp feature (C x H x W) by a per-pixel displacement field flow (H x W x 2,
// (dx, dy) in pixels): out(c,y,x) = feature(c, y+dy, x+dx) read bilinearly
// with clamp-to-edge. Gradients flow to the feature only; the flow is a
// constant as far as the tape is concerned.
template <class S>
Tensor<S> bilinear_sample(const Tensor<S>& f, const Tensor<S>& flow, GradTape<S>* tape = nullptr) {
  if (f.rank() != 3) throw ShapeError("bilinear_sample: feature must be CxHxW, got " + f.shape().str());
  if (flow.rank() != 3 || flow.extent(2) != 2 || flow.extent(0) != f.extent(1) ||
      flow.extent(1) != f.extent(2))
    throw ShapeError("bilinear_sample: flow " + flow.shape().str() + " vs feature " + f.shape().str());
  const Index c = f.extent(0), h = f.extent(1), w = f.extent(2), hw = h * w;
  Tensor<S> out(f.shape());
  const S* pf = f.data();
  const S* pl = flow.data();
  S* po = out.data();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double sx = x + static_cast<double>(pl[(y * w + x) * 2 + 0]);
      double sy = y + static_cast<double>(pl[(y * w + x) * 2 + 1]);
      sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const Index x0 = static_cast<Index>(std::floor(sx)), y0 = static_cast<Index>(std::floor(sy));
      const Index x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const S fx = static_cast<S>(sx - x0), fy = static_cast<S>(sy - y0);
      const S w00 = (S(1) - fx) * (S(1) - fy), w01 = fx * (S(1) - fy);
      const S w10 = (S(1) - fx) * fy, w11 = fx * fy;
      for (Index ci = 0; ci < c; ++ci) {
        const S* fp = pf + ci * hw;
        po[ci * hw + y * w + x] = w00 * fp[y0 * w + x0] + w01 * fp[y0 * w + x1] +
                                  w10 * fp[y1 * w + x0] + w11 * fp[y1 * w + x1];
      }
    }
  opcount::bump(static_cast<std::uint64_t>(4) * c * hw);

  if (tape && f.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), fid = f.tape_id();
    auto kl = detail::keep(flow);
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gf = t.grad(fid);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          double sx = x + static_cast<double>((*kl)[(y * w + x) * 2 + 0]);
          double sy = y + static_cast<double>((*kl)[(y * w + x) * 2 + 1]);
          sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
          sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
          const Index x0 = static_cast<Index>(std::floor(sx)), y0 = static_cast<Index>(std::floor(sy));
          const Index x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
          const S fx = static_cast<S>(sx - x0), fy = static_cast<S>(sy - y0);
          const S w00 = (S(1) - fx) * (S(1) - fy), w01 = fx * (S(1) - fy);
          const S w10 = (S(1) - fx) * fy, w11 = fx * fy;
          for (Index ci = 0; ci < c; ++ci) {
            const S g = go[ci * hw + y * w + x];
            S* gp = gf.data() + ci * hw;
            gp[y0 * w + x0] += w00 * g;
            gp[y0 * w + x1] += w01 * g;
            gp[y1 * w + x0] += w10 * g;
            gp[y1 * w + x1] += w11 * g;
          }
        }
    });
  }
  return out;
}

// Zero-pad a rank-3 tensor at the bottom/right to (C x Hp x Wp).
template <class S>
Tensor<S> pad_spatial(const Tensor<S>& x, Index hp, Index wp, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw ShapeError("pad_spatial: expected CxHxW, got " + x.shape().str());
  const Index c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (hp < h || wp < w) throw ValueError("pad_spatial: target smaller than input");
  Tensor<S> out(Shape{c, hp, wp});
  const S* px = x.data();
  S* po = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y)
      std::copy(px + (ci * h + y) * w, px + (ci * h + y + 1) * w, po + (ci * hp + y) * wp);
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index ci = 0; ci < c; ++ci)
        for (Index y = 0; y < h; ++y)
          for (Index xx = 0; xx < w; ++xx)
            gx[(ci * h + y) * w + xx] += go[(ci * hp + y) * wp + xx];
    });
  }
  return out;
}

// Crop the top-left (C x H x W) region out of a padded rank-3 tensor.
template <class S>
Tensor<S> crop_spatial(const Tensor<S>& x, Index h, Index w, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw ShapeError("crop_spatial: expected CxHxW, got " + x.shape().str());
  const Index c = x.extent(0), hp = x.extent(1), wp = x.extent(2);
  if (h > hp || w > wp) throw ValueError("crop_spatial: target larger than input");
  Tensor<S> out(Shape{c, h, w});
  const S* px = x.data();
  S* po = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y)
      std::copy(px + (ci * hp + y) * wp, px + (ci * hp + y) * wp + w, po + (ci * h + y) * w);
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index ci = 0; ci < c; ++ci)
        for (Index y = 0; y < h; ++y)
          for (Index xx = 0; xx < w; ++xx)
            gx[(ci * hp + y) * wp + xx] += go[(ci * h + y) * w + xx];
    });
  }
  return out;
}

// Untracked rank-2 (plane) variants used for masks and flows.
template <class S>
Tensor<S> pad_plane(const Tensor<S>& x, Index hp, Index wp) {
  if (x.rank() != 2) throw ShapeError("pad_plane: expected HxW, got " + x.shape().str());
  Tensor<S> r3 = pad_spatial(reshape(x, Shape{1, x.extent(0), x.extent(1)}), hp, wp);
  return reshape(r3, Shape{hp, wp});
}

template <class S>
Tensor<S> crop_plane(const Tensor<S>& x, Index h, Index w) {
  if (x.rank() != 2) throw ShapeError("crop_plane: expected HxW, got " + x.shape().str());
  Tensor<S> r3 = crop_spatial(reshape(x, Shape{1, x.extent(0), x.extent(1)}), h, w);
  return reshape(r3, Shape{h, w});
}

// Bilinear resize of a rank-2 plane to h2 x w2 (pixel-center mapping,
// clamp-to-edge). Untracked utility for flow/mask rescaling.
template <class S>
Tensor<S> bilinear_resize_plane(const Tensor<S>& x, Index h2, Index w2) {
  if (x.rank() != 2) throw ShapeError("bilinear_resize_plane: expected HxW, got " + x.shape().str());
  const Index h = x.extent(0), w = x.extent(1);
  Tensor<S> out(Shape{h2, w2});
  const S* px = x.data();
  S* po = out.data();
  const double sy = static_cast<double>(h) / h2, sx = static_cast<double>(w) / w2;
  for (Index y = 0; y < h2; ++y)
    for (Index xx = 0; xx < w2; ++xx) {
      double fy = (y + 0.5) * sy - 0.5, fx = (xx + 0.5) * sx - 0.5;
      fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const Index y0 = static_cast<Index>(std::floor(fy)), x0 = static_cast<Index>(std::floor(fx));
      const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const S ay = static_cast<S>(fy - y0), ax = static_cast<S>(fx - x0);
      po[y * w2 + xx] = (S(1) - ay) * ((S(1) - ax) * px[y0 * w + x0] + ax * px[y0 * w + x1]) +
                        ay * ((S(1) - ax) * px[y1 * w + x0] + ax * px[y1 * w + x1]);
    }
  return out;
}

// Rearrange a 2 x H x W channel pair into an H x W x 2 field (tracked).
template <class S>
Tensor<S> chw_to_hwc(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw ShapeError("chw_to_hwc: expected CxHxW, got " + x.shape().str());
  const Index c = x.extent(0), h = x.extent(1), w = x.extent(2), hw = h * w;
  Tensor<S> out(Shape{h, w, c});
  const S* px = x.data();
  S* po = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index p = 0; p < hw; ++p) po[p * c + ci] = px[ci * hw + p];
  if (tape && x.tracked()) {
    tape->adopt(out);
    int oid = out.tape_id(), xid = x.tape_id();
    tape->record([=](GradTape<S>& t) {
      const auto& go = t.grad(oid);
      auto& gx = t.grad(xid);
      for (Index ci = 0; ci < c; ++ci)
        for (Index p = 0; p < hw; ++p) gx[ci * hw + p] += go[p * c + ci];
    });
  }
  return out;
}

// Inverse rearrangement, untracked (flows are constants).
template <class S>
Tensor<S> hwc_to_chw(const Tensor<S>& x) {
  if (x.rank() != 3) throw ShapeError("hwc_to_chw: expected HxWxC, got " + x.shape().str());
  const Index h = x.extent(0), w = x.extent(1), c = x.extent(2), hw = h * w;
  Tensor<S> out(Shape{c, h, w});
  const S* px = x.data();
  S* po = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index p = 0; p < hw; ++p) po[ci * hw + p] = px[p * c + ci];
  return out;
}

}  // namespace mav
