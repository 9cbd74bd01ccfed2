#pragma once

// Classical coarse-to-fine optical flow by minimum-SAD block matching, plus
// flow-derived motion masks and gates. A flow field is an H x W x 2 tensor of
// (dx, dy) pixel displacements with warp semantics
//   bilinear_sample(second, estimate_flow(first, second)) ~ first,
// i.e. the flow pulls the second frame back onto the first frame's grid.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mav/image_ops.hpp"
#include "mav/tensor.hpp"

namespace mav {

template <class S>
using FlowField = Tensor<S>;  // H x W x 2, (dx, dy)
template <class S>
using MotionMask = Tensor<S>;  // H x W, values in [0,1]

struct FlowCfg {
  int block = 8;      // matching block at the reduced resolution
  int search = 4;     // +/- displacement range at the reduced resolution
  int downscale = 4;  // frames are box-averaged by this factor before matching
};

struct MaskCfg {
  double percentile = 99.0;  // robust normalizer for the magnitude field
};

// Matching configuration adapted to the frame size: desk-scale frames get a
// finer grid (quarter-resolution matching would leave 32-pixel cells), large
// frames keep the cheap coarse defaults.
inline FlowCfg flow_cfg_for(Index h, Index w) {
  FlowCfg cfg;
  if (std::min(h, w) <= 256) {
    cfg.block = 4;
    cfg.downscale = 2;
  }
  while (cfg.downscale > 1 && (h < cfg.block * cfg.downscale || w < cfg.block * cfg.downscale))
    cfg.downscale /= 2;
  return cfg;
}

namespace detail {

template <class S>
Tensor<S> box_downsample(const Tensor<S>& x, Index ds) {
  const Index h = x.extent(0) / ds, w = x.extent(1) / ds;
  Tensor<S> out(Shape{h, w});
  const S* px = x.data();
  S* po = out.data();
  const S inv = S(1) / S(ds * ds);
  for (Index y = 0; y < h; ++y)
    for (Index xx = 0; xx < w; ++xx) {
      S acc = S(0);
      for (Index u = 0; u < ds; ++u)
        for (Index v = 0; v < ds; ++v) acc += px[(y * ds + u) * x.extent(1) + xx * ds + v];
      po[y * w + xx] = acc * inv;
    }
  return out;
}

}  // namespace detail

// Block-matching flow between two equal-size gray frames in [0,1]. Frames are
// reduced by cfg.downscale, matched in cfg.block blocks over a +/- cfg.search
// window (SAD, clamped reads of the second frame), and the per-block vectors
// are bilinearly upsampled back to full resolution and rescaled. Equal-SAD
// ties resolve to the smallest displacement magnitude, then lexicographic
// (dy, dx), so identical frames give exactly zero flow.
template <class S>
FlowField<S> estimate_flow(const Tensor<S>& a, const Tensor<S>& b, const FlowCfg& cfg = {}) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("estimate_flow: frames must be HxW");
  check_same_shape("estimate_flow", a, b);
  const Index h = a.extent(0), w = a.extent(1);
  const Index ds = cfg.downscale, blk = cfg.block, sr = cfg.search;
  if (h < blk * ds || w < blk * ds)
    throw ValueError("estimate_flow: frames " + a.shape().str() + " smaller than block*downscale = " +
                     std::to_string(blk * ds));

  Tensor<S> al = detail::box_downsample(a, ds);
  Tensor<S> bl = detail::box_downsample(b, ds);
  const Index hl = al.extent(0), wl = al.extent(1);
  const Index gh = hl / blk, gw = wl / blk;

  Tensor<S> grid(Shape{gh, gw, 2});
  const S* pa = al.data();
  const S* pb = bl.data();
  S* pg = grid.data();
  for (Index by = 0; by < gh; ++by)
    for (Index bx = 0; bx < gw; ++bx) {
      double best = std::numeric_limits<double>::infinity();
      Index bdx = 0, bdy = 0;
      for (Index dy = -sr; dy <= sr; ++dy)
        for (Index dx = -sr; dx <= sr; ++dx) {
          double sad = 0;
          for (Index u = 0; u < blk; ++u)
            for (Index v = 0; v < blk; ++v) {
              const Index y = by * blk + u, x = bx * blk + v;
              const Index sy = std::clamp(y + dy, Index(0), hl - 1);
              const Index sx = std::clamp(x + dx, Index(0), wl - 1);
              sad += std::abs(static_cast<double>(pb[sy * wl + sx]) -
                              static_cast<double>(pa[y * wl + x]));
            }
          const Index m2 = dx * dx + dy * dy, b2 = bdx * bdx + bdy * bdy;
          if (sad < best ||
              (sad == best && (m2 < b2 || (m2 == b2 && (dy < bdy || (dy == bdy && dx < bdx)))))) {
            best = sad;
            bdx = dx;
            bdy = dy;
          }
        }
      pg[(by * gw + bx) * 2 + 0] = static_cast<S>(bdx);
      pg[(by * gw + bx) * 2 + 1] = static_cast<S>(bdy);
    }

  // Upsample the block grid to full resolution (block centers as samples)
  // and rescale displacements to full-resolution pixels.
  FlowField<S> flow(Shape{h, w, 2});
  S* pf = flow.data();
  const double cell = static_cast<double>(blk * ds);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double gy = (y + 0.5) / cell - 0.5, gx = (x + 0.5) / cell - 0.5;
      gy = std::clamp(gy, 0.0, static_cast<double>(gh - 1));
      gx = std::clamp(gx, 0.0, static_cast<double>(gw - 1));
      const Index y0 = static_cast<Index>(std::floor(gy)), x0 = static_cast<Index>(std::floor(gx));
      const Index y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
      const double fy = gy - y0, fx = gx - x0;
      for (int ch = 0; ch < 2; ++ch) {
        const double v00 = pg[(y0 * gw + x0) * 2 + ch], v01 = pg[(y0 * gw + x1) * 2 + ch];
        const double v10 = pg[(y1 * gw + x0) * 2 + ch], v11 = pg[(y1 * gw + x1) * 2 + ch];
        const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        pf[(y * w + x) * 2 + ch] = static_cast<S>(v * ds);
      }
    }
  return flow;
}

template <class S>
FlowField<S> mean_flow(const FlowField<S>& prev, const FlowField<S>& next) {
  check_same_shape("mean_flow", prev, next);
  Tensor<S> out(prev.shape());
  const S* pp = prev.data();
  const S* pn = next.data();
  S* po = out.data();
  for (Index i = 0; i < prev.numel(); ++i) po[i] = (pp[i] + pn[i]) / S(2);
  return out;
}

// Per-pixel motion saliency from two flow fields: the larger of the two
// magnitudes, normalized by its cfg.percentile value (nearest-rank, floored
// at 1e-6) and clamped to [0,1]. Zero everywhere iff both flows are zero.
template <class S>
MotionMask<S> motion_mask(const FlowField<S>& prev, const FlowField<S>& next,
                          const MaskCfg& cfg = {}) {
  check_same_shape("motion_mask", prev, next);
  const Index h = prev.extent(0), w = prev.extent(1), n = h * w;
  std::vector<double> mag(n);
  const S* pp = prev.data();
  const S* pn = next.data();
  for (Index i = 0; i < n; ++i) {
    const double mp = std::hypot(static_cast<double>(pp[2 * i]), static_cast<double>(pp[2 * i + 1]));
    const double mn = std::hypot(static_cast<double>(pn[2 * i]), static_cast<double>(pn[2 * i + 1]));
    mag[i] = std::max(mp, mn);
  }
  std::vector<double> sorted(mag);
  std::sort(sorted.begin(), sorted.end());
  const Index rank = std::clamp<Index>(
      static_cast<Index>(std::ceil(cfg.percentile / 100.0 * n)) - 1, 0, n - 1);
  const double q = std::max(sorted[rank], 1e-6);
  MotionMask<S> out(Shape{h, w});
  S* po = out.data();
  for (Index i = 0; i < n; ++i) po[i] = static_cast<S>(std::min(mag[i] / q, 1.0));
  return out;
}

template <class S>
Tensor<S> binarize_gate(const MotionMask<S>& mask, double theta) {
  if (theta < 0.0 || theta > 1.0)
    throw ValueError("binarize_gate: threshold " + std::to_string(theta) + " outside [0,1]");
  Tensor<S> out(mask.shape());
  const S* pm = mask.data();
  S* po = out.data();
  for (Index i = 0; i < mask.numel(); ++i) po[i] = pm[i] >= static_cast<S>(theta) ? S(1) : S(0);
  return out;
}

}  // namespace mav
