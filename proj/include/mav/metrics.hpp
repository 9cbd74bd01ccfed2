#pragma once

// Fusion quality metrics. qabf follows the gradient-preservation family:
// Sobel edge strength/orientation agreement between each source and the fused
// frame, weighted by source edge strength, without sigmoid shaping so that
// perfect preservation scores exactly 1. piella_qs is the local-variance
// weighted windowed-SSIM combination, clamped to [0,1]. ms2r_proxy measures
// warped-neighbor error of the fused sequence normalized per frame pair by
// the same error on the two reference sequences (lower is better).

#include <cmath>
#include <string>
#include <vector>

#include "mav/flow.hpp"
#include "mav/loss.hpp"
#include "mav/media_io.hpp"
#include "mav/tensor.hpp"

namespace mav {

namespace detail {

struct GradField {
  std::vector<double> mag, ang;  // orientation folded into (-pi/2, pi/2]
};

// Sobel over the interior; border pixels keep zero magnitude so they carry
// no weight (zero extension would fabricate edges on constant frames).
inline GradField sobel(const Tensor<float>& img) {
  const Index h = img.extent(0), w = img.extent(1);
  GradField g;
  g.mag.assign(h * w, 0.0);
  g.ang.assign(h * w, 0.0);
  const float* p = img.data();
  auto px = [&](Index y, Index x) -> double { return p[y * w + x]; };
  for (Index y = 1; y + 1 < h; ++y)
    for (Index x = 1; x + 1 < w; ++x) {
      const double gx = px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1) -
                        px(y - 1, x - 1) - 2 * px(y, x - 1) - px(y + 1, x - 1);
      const double gy = px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1) -
                        px(y - 1, x - 1) - 2 * px(y - 1, x) - px(y - 1, x + 1);
      g.mag[y * w + x] = std::hypot(gx, gy);
      double a = std::atan2(gy, gx);
      if (a > M_PI / 2) a -= M_PI;
      if (a <= -M_PI / 2) a += M_PI;
      g.ang[y * w + x] = a;
    }
  return g;
}

// Edge preservation of one source in the fused frame at pixel i.
inline double edge_preservation(const GradField& src, const GradField& fused, Index i) {
  const double gs = src.mag[i], gf = fused.mag[i];
  const double strength = (gs == 0.0 && gf == 0.0) ? 1.0 : std::min(gs, gf) / std::max(gs, gf);
  double da = std::abs(src.ang[i] - fused.ang[i]);
  da = std::min(da, M_PI - da);
  const double orient = 1.0 - da / (M_PI / 2);
  return strength * orient;
}

struct WindowStats {
  double mu_a, mu_b, var_a, var_b, cov;
};

template <class F>
void for_each_window(const Tensor<float>& a, const Tensor<float>& b, Index win, F f) {
  const Index h = a.extent(0), w = a.extent(1);
  const double n = static_cast<double>(win * win);
  for (Index y = 0; y + win <= h; ++y)
    for (Index x = 0; x + win <= w; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (Index u = 0; u < win; ++u)
        for (Index v = 0; v < win; ++v) {
          const double va = a.at(y + u, x + v), vb = b.at(y + u, x + v);
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      WindowStats s;
      s.mu_a = sa / n;
      s.mu_b = sb / n;
      s.var_a = saa / n - s.mu_a * s.mu_a;
      s.var_b = sbb / n - s.mu_b * s.mu_b;
      s.cov = sab / n - s.mu_a * s.mu_b;
      f(y, x, s);
    }
}

inline double ssim_from_stats(const WindowStats& s, double c1, double c2) {
  return ((2 * s.mu_a * s.mu_b + c1) * (2 * s.cov + c2)) /
         ((s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2));
}

}  // namespace detail

// Normalized weighted edge-preservation score in [0,1]; 1 when the fused
// frame reproduces both sources' gradients, 0 when a constant frame preserves
// nothing (or when both sources are constant).
inline double qabf(const Tensor<float>& ir, const Tensor<float>& vis, const Tensor<float>& fused) {
  check_same_shape("qabf", ir, vis);
  check_same_shape("qabf", ir, fused);
  detail::GradField ga = detail::sobel(ir), gb = detail::sobel(vis), gf = detail::sobel(fused);
  double num = 0, den = 0;
  for (Index i = 0; i < ir.numel(); ++i) {
    num += detail::edge_preservation(ga, gf, i) * ga.mag[i] +
           detail::edge_preservation(gb, gf, i) * gb.mag[i];
    den += ga.mag[i] + gb.mag[i];
  }
  return den == 0.0 ? 0.0 : num / den;
}

// Saliency-weighted windowed SSIM (7x7 uniform, valid windows); local
// variance picks the more salient source per window. Clamped to [0,1].
inline double piella_qs(const Tensor<float>& ir, const Tensor<float>& vis,
                        const Tensor<float>& fused) {
  check_same_shape("piella_qs", ir, vis);
  check_same_shape("piella_qs", ir, fused);
  const Index win = 7;
  const double c1 = 1e-4, c2 = 9e-4;
  if (ir.extent(0) < win || ir.extent(1) < win)
    throw ShapeError("piella_qs: image smaller than the 7x7 window");

  // Collect per-window stats of (ir,fused) and (vis,fused) in lockstep.
  std::vector<detail::WindowStats> saf, sbf;
  detail::for_each_window(ir, fused, win,
                          [&](Index, Index, const detail::WindowStats& s) { saf.push_back(s); });
  detail::for_each_window(vis, fused, win,
                          [&](Index, Index, const detail::WindowStats& s) { sbf.push_back(s); });
  double total = 0;
  for (std::size_t i = 0; i < saf.size(); ++i) {
    const double va = saf[i].var_a, vb = sbf[i].var_a;
    const double lam = (va + vb) == 0.0 ? 0.5 : va / (va + vb);
    total += lam * detail::ssim_from_stats(saf[i], c1, c2) +
             (1 - lam) * detail::ssim_from_stats(sbf[i], c1, c2);
  }
  return std::clamp(total / static_cast<double>(saf.size()), 0.0, 1.0);
}

// Plain mean windowed SSIM between two frames (7x7 uniform, valid windows).
inline double ssim_index(const Tensor<float>& a, const Tensor<float>& b) {
  check_same_shape("ssim_index", a, b);
  const Index win = 7;
  const double c1 = 1e-4, c2 = 9e-4;
  if (a.extent(0) < win || a.extent(1) < win)
    throw ShapeError("ssim_index: image smaller than the 7x7 window");
  double total = 0;
  Index count = 0;
  detail::for_each_window(a, b, win, [&](Index, Index, const detail::WindowStats& s) {
    total += detail::ssim_from_stats(s, c1, c2);
    ++count;
  });
  return total / static_cast<double>(count);
}

namespace detail {

inline double masked_warp_error(const Tensor<float>& cur, const Tensor<float>& prev,
                                const Tensor<float>& flow, const Tensor<float>& valid) {
  const Index h = cur.extent(0), w = cur.extent(1);
  Tensor<float> warped =
      reshape(bilinear_sample(reshape(prev, Shape{1, h, w}), flow), Shape{h, w});
  double sum = 0, count = 0;
  for (Index i = 0; i < cur.numel(); ++i)
    if (valid.at(i) > 0) {
      sum += std::abs(static_cast<double>(cur.at(i)) - warped.at(i));
      count += 1;
    }
  return count == 0 ? 0.0 : sum / count;
}

}  // namespace detail

// Per-pair smoothness ratios of the fused sequence against the two reference
// sequences. Flow for each pair is estimated on both references and averaged;
// the same flow warps fused and references alike. Returned values are
// r_t = e_fused / max(mean(e_ir, e_vis), 1e-6) for t = 1..T-1.
inline std::vector<double> ms2r_pair_ratios(const std::vector<Tensor<float>>& fused,
                                            const std::vector<Tensor<float>>& ir,
                                            const std::vector<Tensor<float>>& vis,
                                            double fb_eps = 0.5) {
  if (fused.size() < 2) throw ValueError("ms2r: need at least 2 frames");
  if (ir.size() != fused.size() || vis.size() != fused.size())
    throw ShapeError("ms2r: sequence lengths differ");
  const Index h = fused[0].extent(0), w = fused[0].extent(1);
  const FlowCfg cfg = flow_cfg_for(h, w);
  std::vector<double> ratios;
  for (std::size_t t = 1; t < fused.size(); ++t) {
    Tensor<float> f_ir = estimate_flow(ir[t], ir[t - 1], cfg);
    Tensor<float> f_vis = estimate_flow(vis[t], vis[t - 1], cfg);
    Tensor<float> fwd = mean_flow(f_ir, f_vis);
    Tensor<float> b_ir = estimate_flow(ir[t - 1], ir[t], cfg);
    Tensor<float> b_vis = estimate_flow(vis[t - 1], vis[t], cfg);
    Tensor<float> bwd = mean_flow(b_ir, b_vis);
    Tensor<float> valid = validity_masks(fwd, bwd, fb_eps);
    const double e_f = detail::masked_warp_error(fused[t], fused[t - 1], fwd, valid);
    const double e_ir = detail::masked_warp_error(ir[t], ir[t - 1], fwd, valid);
    const double e_vis = detail::masked_warp_error(vis[t], vis[t - 1], fwd, valid);
    ratios.push_back(e_f / std::max(0.5 * (e_ir + e_vis), 1e-6));
  }
  return ratios;
}

// Sequence-level score: mean of the per-pair ratios; >= 0, lower is better,
// 0 for perfectly static inputs by the 0/0 convention.
inline double ms2r_proxy(const std::vector<Tensor<float>>& fused,
                         const std::vector<Tensor<float>>& ir,
                         const std::vector<Tensor<float>>& vis, double fb_eps = 0.5) {
  const auto r = ms2r_pair_ratios(fused, ir, vis, fb_eps);
  double sum = 0;
  for (double v : r) sum += v;
  return sum / static_cast<double>(r.size());
}

// --- report -----------------------------------------------------------------

struct MetricSeries {
  std::string name;
  std::vector<Index> frames;   // frame index per value
  std::vector<double> values;  // same length as frames

  double mean() const {
    double s = 0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
};

struct MetricReport {
  Index frame_count = 0;
  std::vector<MetricSeries> series;

  const MetricSeries* find(const std::string& name) const {
    for (const auto& s : series)
      if (s.name == name) return &s;
    return nullptr;
  }
};

// Evaluates qabf, piella_qs, ssim per frame and ms2r_proxy per frame pair.
inline MetricReport evaluate_metrics(const std::vector<Tensor<float>>& fused,
                                     const std::vector<Tensor<float>>& ir,
                                     const std::vector<Tensor<float>>& vis) {
  if (ir.size() != fused.size() || vis.size() != fused.size())
    throw ShapeError("evaluate_metrics: sequence lengths differ (fused " +
                     std::to_string(fused.size()) + ", ir " + std::to_string(ir.size()) +
                     ", vis " + std::to_string(vis.size()) + ")");
  for (std::size_t t = 0; t < fused.size(); ++t) {
    check_same_shape("evaluate_metrics", fused[t], ir[t]);
    check_same_shape("evaluate_metrics", fused[t], vis[t]);
  }
  MetricReport report;
  report.frame_count = static_cast<Index>(fused.size());
  MetricSeries q{"qabf", {}, {}}, p{"piella_qs", {}, {}}, s{"ssim", {}, {}};
  for (std::size_t t = 0; t < fused.size(); ++t) {
    q.frames.push_back(static_cast<Index>(t));
    q.values.push_back(qabf(ir[t], vis[t], fused[t]));
    p.frames.push_back(static_cast<Index>(t));
    p.values.push_back(piella_qs(ir[t], vis[t], fused[t]));
    s.frames.push_back(static_cast<Index>(t));
    s.values.push_back(0.5 * (ssim_index(fused[t], ir[t]) + ssim_index(fused[t], vis[t])));
  }
  report.series = {q, p, s};
  if (fused.size() >= 2) {
    MetricSeries m{"ms2r_proxy", {}, {}};
    const auto ratios = ms2r_pair_ratios(fused, ir, vis);
    for (std::size_t t = 1; t < fused.size(); ++t) {
      m.frames.push_back(static_cast<Index>(t));
      m.values.push_back(ratios[t - 1]);
    }
    report.series.push_back(m);
  }
  return report;
}

// CSV layout: header "frame,metric,value", per-frame rows grouped by metric,
// then one "mean" row per metric. Values carry 6 decimals, LF endings.
inline void write_metric_csv(const std::string& path, const MetricReport& report) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : report.series)
    for (std::size_t i = 0; i < s.values.size(); ++i)
      rows.push_back({std::to_string(s.frames[i]), s.name, csv_value(s.values[i])});
  for (const auto& s : report.series) rows.push_back({"mean", s.name, csv_value(s.mean())});
  write_csv(path, {"frame", "metric", "value"}, rows);
}

}  // namespace mav
