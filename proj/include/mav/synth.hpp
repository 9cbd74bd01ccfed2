#pragma once

// Deterministic synthetic infrared/visible sequence generator with exact
// ground-truth flow and motion masks. Visible frames get a smoothed value-
// noise background with dim objects; infrared frames get a flat background
// with bright objects. Objects move at constant sub-pixel velocity and are
// rendered with coverage-weighted (bilinear) splatting so the ground truth
// stays exact.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mav/tensor.hpp"

namespace mav {

struct ObjectSpec {
  enum class Kind { rectangle, disk };
  Kind kind = Kind::rectangle;
  double size = 16;           // rectangle edge or disk diameter, pixels
  double x0 = 0, y0 = 0;      // top-left (rectangle) / bounding-box origin at t=0
  double vx = 0, vy = 0;      // pixels per frame
  double ir_intensity = 0.9;  // thermal saliency
  double vis_intensity = 0.3; // dim visible appearance
  // Visible-band surface texture riding with the object; without it a flat
  // moving patch is unmatchable for any correlation-based flow estimator.
  double vis_texture = 0.15;
};

struct SceneSpec {
  std::uint64_t seed = 1;
  Index height = 128, width = 128;
  Index frames = 24;
  std::vector<ObjectSpec> objects;
  double vis_texture_amp = 0.35;  // amplitude of the visible value-noise
  double ir_base = 0.15;          // flat infrared background level
  double noise_ir = 0.01, noise_vis = 0.01;
};

struct SceneData {
  std::vector<Tensor<float>> ir, vis;          // frames, H x W in [0,1]
  std::vector<Tensor<float>> gt_flow_fwd;      // [t]: pair (t, t+1) anchored at t
  std::vector<Tensor<float>> gt_flow_bwd;      // [t]: pair (t+1, t) anchored at t+1
  std::vector<Tensor<float>> gt_mask;          // [t]: binary object footprint
};

namespace detail {

// Seeded lattice value-noise, bilinearly interpolated, in [-1, 1].
inline Tensor<float> value_noise(Index h, Index w, Index spacing, std::mt19937_64& rng) {
  const Index gh = h / spacing + 2, gw = w / spacing + 2;
  std::vector<float> lattice(gh * gw);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (auto& v : lattice) v = static_cast<float>(dist(rng));
  Tensor<float> out(Shape{h, w});
  float* po = out.data();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y) / spacing, fx = static_cast<double>(x) / spacing;
      const Index y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
      const double ay = fy - y0, ax = fx - x0;
      const float v00 = lattice[y0 * gw + x0], v01 = lattice[y0 * gw + x0 + 1];
      const float v10 = lattice[(y0 + 1) * gw + x0], v11 = lattice[(y0 + 1) * gw + x0 + 1];
      po[y * w + x] = static_cast<float>((1 - ay) * ((1 - ax) * v00 + ax * v01) +
                                         ay * ((1 - ax) * v10 + ax * v11));
    }
  return out;
}

// Fractional coverage of pixel (x, y) by the object at frame-time t.
inline double object_coverage(const ObjectSpec& obj, double t, Index y, Index x) {
  const double ox = obj.x0 + obj.vx * t, oy = obj.y0 + obj.vy * t;
  if (obj.kind == ObjectSpec::Kind::rectangle) {
    const double lx = std::max(static_cast<double>(x), ox);
    const double rx = std::min(static_cast<double>(x) + 1.0, ox + obj.size);
    const double ty = std::max(static_cast<double>(y), oy);
    const double by = std::min(static_cast<double>(y) + 1.0, oy + obj.size);
    return std::max(0.0, rx - lx) * std::max(0.0, by - ty);
  }
  // Disk: smooth radial falloff over one pixel at the rim.
  const double r = obj.size / 2.0;
  const double cx = ox + r, cy = oy + r;
  const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
  return std::clamp(r + 0.5 - d, 0.0, 1.0);
}

}  // namespace detail

inline SceneData generate(const SceneSpec& spec) {
  const Index h = spec.height, w = spec.width, tcount = spec.frames;
  for (const auto& obj : spec.objects)
    if (obj.size > h || obj.size > w)
      throw ValueError("generate: object of size " + std::to_string(obj.size) +
                       " larger than frame " + std::to_string(h) + "x" + std::to_string(w));
  std::mt19937_64 rng(spec.seed);
  Tensor<float> vis_bg = detail::value_noise(h, w, 8, rng);
  std::vector<Tensor<float>> obj_tex;
  for (const auto& obj : spec.objects) {
    const Index side = static_cast<Index>(std::ceil(obj.size)) + 4;
    obj_tex.push_back(detail::value_noise(side, side, 4, rng));
  }
  std::normal_distribution<double> gauss(0.0, 1.0);

  SceneData out;
  out.ir.reserve(tcount);
  out.vis.reserve(tcount);
  out.gt_mask.reserve(tcount);
  std::vector<Tensor<float>> coverage(tcount);  // max over objects, for masks/flows

  for (Index t = 0; t < tcount; ++t) {
    Tensor<float> ir(Shape{h, w});
    Tensor<float> vis(Shape{h, w});
    Tensor<float> cov(Shape{h, w});
    Tensor<float> mask(Shape{h, w});
    float* pir = ir.data();
    float* pvis = vis.data();
    float* pcov = cov.data();
    float* pm = mask.data();
    const float* pbg = vis_bg.data();
    for (Index i = 0; i < h * w; ++i) {
      pir[i] = static_cast<float>(spec.ir_base);
      pvis[i] = static_cast<float>(0.5 + spec.vis_texture_amp * pbg[i]);
    }
    for (std::size_t oi = 0; oi < spec.objects.size(); ++oi) {
      const auto& obj = spec.objects[oi];
      const Tensor<float>& tex = obj_tex[oi];
      const double ox = obj.x0 + obj.vx * t, oy = obj.y0 + obj.vy * t;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const double a = detail::object_coverage(obj, static_cast<double>(t), y, x);
          if (a <= 0.0) continue;
          const Index i = y * w + x;
          // Object-local texture coordinate; the pattern moves with the object.
          const double lx = std::clamp(x + 0.5 - ox, 0.0, static_cast<double>(tex.extent(1) - 1));
          const double ly = std::clamp(y + 0.5 - oy, 0.0, static_cast<double>(tex.extent(0) - 1));
          const Index x0 = static_cast<Index>(lx), y0 = static_cast<Index>(ly);
          const Index x1 = std::min(x0 + 1, tex.extent(1) - 1), y1 = std::min(y0 + 1, tex.extent(0) - 1);
          const double fx = lx - x0, fy = ly - y0;
          const double tv = (1 - fy) * ((1 - fx) * tex.at(y0, x0) + fx * tex.at(y0, x1)) +
                            fy * ((1 - fx) * tex.at(y1, x0) + fx * tex.at(y1, x1));
          const double vis_val = std::clamp(obj.vis_intensity + obj.vis_texture * tv, 0.0, 1.0);
          pir[i] = static_cast<float>((1 - a) * pir[i] + a * obj.ir_intensity);
          pvis[i] = static_cast<float>((1 - a) * pvis[i] + a * vis_val);
          pcov[i] = std::max(pcov[i], static_cast<float>(a));
        }
    }
    for (Index i = 0; i < h * w; ++i) pm[i] = pcov[i] > 0.5f ? 1.0f : 0.0f;
    for (Index i = 0; i < h * w; ++i) {
      pir[i] = std::clamp(pir[i] + static_cast<float>(spec.noise_ir * gauss(rng)), 0.0f, 1.0f);
      pvis[i] = std::clamp(pvis[i] + static_cast<float>(spec.noise_vis * gauss(rng)), 0.0f, 1.0f);
    }
    out.ir.push_back(std::move(ir));
    out.vis.push_back(std::move(vis));
    out.gt_mask.push_back(std::move(mask));
    coverage[t] = std::move(cov);
  }

  // Ground-truth flows per pair: the object velocity inside the footprint of
  // the anchor frame, zero elsewhere. Overlapping objects: later wins.
  auto flow_at = [&](Index t_anchor, double sign) {
    Tensor<float> f(Shape{h, w, 2});
    float* pf = f.data();
    for (const auto& obj : spec.objects)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          if (detail::object_coverage(obj, static_cast<double>(t_anchor), y, x) > 0.5) {
            pf[(y * w + x) * 2 + 0] = static_cast<float>(sign * obj.vx);
            pf[(y * w + x) * 2 + 1] = static_cast<float>(sign * obj.vy);
          }
    return f;
  };
  for (Index t = 0; t + 1 < tcount; ++t) {
    out.gt_flow_fwd.push_back(flow_at(t, +1.0));
    out.gt_flow_bwd.push_back(flow_at(t + 1, -1.0));
  }
  return out;
}

// Default scene used by the quantitative tests and the CLI when no spec file
// is given: one fast bright rectangle, one slow disk, textured background.
inline SceneSpec default_scene() {
  SceneSpec spec;
  spec.seed = 7;
  spec.height = 128;
  spec.width = 128;
  spec.frames = 24;
  spec.noise_ir = 0.005;
  spec.noise_vis = 0.005;
  ObjectSpec rect;
  rect.kind = ObjectSpec::Kind::rectangle;
  rect.size = 56;
  rect.x0 = 8;
  rect.y0 = 40;
  rect.vx = 2.0;
  rect.vy = 0.0;
  rect.ir_intensity = 0.92;
  rect.vis_intensity = 0.35;
  ObjectSpec disk;
  disk.kind = ObjectSpec::Kind::disk;
  disk.size = 36;
  disk.x0 = 84;
  disk.y0 = 8;
  disk.vx = 0.0;
  disk.vy = 2.0;
  disk.ir_intensity = 0.8;
  disk.vis_intensity = 0.25;
  spec.objects = {rect, disk};
  return spec;
}

}  // namespace mav
