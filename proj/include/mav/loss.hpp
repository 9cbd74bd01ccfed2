#pragma once

// Training losses: pixel fidelity against the elementwise-max target, a
// uniform-window SSIM loss, forward-backward flow validity masks, and the
// warped-neighbor temporal consistency term. All terms are tape-friendly so
// the fused frame receives gradients; flows and masks are constants.

#include <cmath>

#include "mav/flow.hpp"
#include "mav/image_ops.hpp"
#include "mav/tensor.hpp"

namespace mav {

struct LossConfig {
  double gamma = 1.0;      // temporal weight
  Index ssim_window = 7;   // uniform window
  double ssim_c1 = 1e-4;   // (K1*L)^2 for images in [0,1]
  double ssim_c2 = 9e-4;   // (K2*L)^2
  double fb_epsilon = 1.0;  // forward-backward consistency radius, pixels

  void validate() const {
    if (gamma < 0.0) throw ValueError("LossConfig: gamma must be >= 0");
    if (fb_epsilon <= 0.0) throw ValueError("LossConfig: fb_epsilon must be > 0");
  }
};

// mean |I_F - max(I_ir, I_vis)|. The target keeps infrared saliency and
// bright visible texture; it is constant on the tape.
template <class S>
Tensor<S> pixel_loss(const Tensor<S>& fused, const Tensor<S>& ir, const Tensor<S>& vis,
                     GradTape<S>* tape = nullptr) {
  check_same_shape("pixel_loss", fused, ir);
  check_same_shape("pixel_loss", fused, vis);
  Tensor<S> target(ir.shape());
  const S* pi = ir.data();
  const S* pv = vis.data();
  S* pt = target.data();
  for (Index i = 0; i < ir.numel(); ++i) pt[i] = std::max(pi[i], pv[i]);
  return mean_all(abs_val(sub(fused, target, tape), tape), tape);
}

// Mean local SSIM over all fully-contained windows (uniform weighting).
template <class S>
Tensor<S> ssim_mean(const Tensor<S>& a, const Tensor<S>& b, const LossConfig& cfg = {},
                    GradTape<S>* tape = nullptr) {
  check_same_shape("ssim_mean", a, b);
  if (a.rank() != 2) throw ShapeError("ssim_mean: expected HxW images");
  const Index win = cfg.ssim_window;
  const S c1 = static_cast<S>(cfg.ssim_c1), c2 = static_cast<S>(cfg.ssim_c2);
  Tensor<S> mu_a = box_filter_valid(a, win, tape);
  Tensor<S> mu_b = box_filter_valid(b, win, tape);
  Tensor<S> saa = box_filter_valid(mul(a, a, tape), win, tape);
  Tensor<S> sbb = box_filter_valid(mul(b, b, tape), win, tape);
  Tensor<S> sab = box_filter_valid(mul(a, b, tape), win, tape);
  Tensor<S> var_a = sub(saa, mul(mu_a, mu_a, tape), tape);
  Tensor<S> var_b = sub(sbb, mul(mu_b, mu_b, tape), tape);
  Tensor<S> cov = sub(sab, mul(mu_a, mu_b, tape), tape);
  Tensor<S> num = mul(add_scalar(scale(mul(mu_a, mu_b, tape), S(2), tape), c1, tape),
                      add_scalar(scale(cov, S(2), tape), c2, tape), tape);
  Tensor<S> den = mul(add_scalar(add(mul(mu_a, mu_a, tape), mul(mu_b, mu_b, tape), tape), c1, tape),
                      add_scalar(add(var_a, var_b, tape), c2, tape), tape);
  return mean_all(divide(num, den, tape), tape);
}

// 1 - mean local SSIM.
template <class S>
Tensor<S> ssim_loss(const Tensor<S>& fused, const Tensor<S>& ref, const LossConfig& cfg = {},
                    GradTape<S>* tape = nullptr) {
  return add_scalar(scale(ssim_mean(fused, ref, cfg, tape), S(-1), tape), S(1), tape);
}

// Pixel term plus the two-source SSIM losses averaged.
template <class S>
Tensor<S> spatial_loss(const Tensor<S>& fused, const Tensor<S>& ir, const Tensor<S>& vis,
                       const LossConfig& cfg = {}, GradTape<S>* tape = nullptr) {
  Tensor<S> px = pixel_loss(fused, ir, vis, tape);
  Tensor<S> ss = scale(add(ssim_loss(fused, ir, cfg, tape), ssim_loss(fused, vis, cfg, tape), tape),
                       S(0.5), tape);
  return add(px, ss, tape);
}

// Pixel p is valid iff ||phi_fwd(p) + phi_bwd(p + phi_fwd(p))|| < eps, with
// the backward flow read bilinearly (clamped). Marks occlusions and
// inconsistent estimates invalid.
template <class S>
Tensor<S> validity_masks(const FlowField<S>& fwd, const FlowField<S>& bwd, double eps) {
  check_same_shape("validity_masks", fwd, bwd);
  const Index h = fwd.extent(0), w = fwd.extent(1);
  Tensor<S> out(Shape{h, w});
  const S* pf = fwd.data();
  const S* pb = bwd.data();
  S* po = out.data();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double dx = pf[(y * w + x) * 2 + 0], dy = pf[(y * w + x) * 2 + 1];
      double sx = std::clamp(x + dx, 0.0, static_cast<double>(w - 1));
      double sy = std::clamp(y + dy, 0.0, static_cast<double>(h - 1));
      const Index x0 = static_cast<Index>(std::floor(sx)), y0 = static_cast<Index>(std::floor(sy));
      const Index x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      double bx = 0, by = 0;
      for (int ch = 0; ch < 2; ++ch) {
        const double v = (1 - fy) * ((1 - fx) * pb[(y0 * w + x0) * 2 + ch] +
                                     fx * pb[(y0 * w + x1) * 2 + ch]) +
                         fy * ((1 - fx) * pb[(y1 * w + x0) * 2 + ch] +
                               fx * pb[(y1 * w + x1) * 2 + ch]);
        (ch == 0 ? bx : by) = v;
      }
      po[y * w + x] = std::hypot(dx + bx, dy + by) < eps ? S(1) : S(0);
    }
  return out;
}

namespace detail {

// Masked mean L1 between the center frame and one warped neighbor. An empty
// mask contributes exactly zero.
template <class S>
Tensor<S> warped_l1(const Tensor<S>& center, const Tensor<S>& neighbor, const FlowField<S>& flow,
                    const Tensor<S>& valid, GradTape<S>* tape) {
  S count = S(0);
  const S* pv = valid.data();
  for (Index i = 0; i < valid.numel(); ++i) count += pv[i];
  if (count == S(0)) return Tensor<S>(Shape{1}, S(0));
  const Index h = center.extent(0), w = center.extent(1);
  Tensor<S> warped = reshape(
      bilinear_sample(reshape(neighbor, Shape{1, h, w}, tape), flow, tape), Shape{h, w}, tape);
  Tensor<S> diff = abs_val(sub(center, warped, tape), tape);
  Tensor<S> masked = mul(diff, valid, tape);
  return scale(sum_all(masked, tape), S(1) / count, tape);
}

}  // namespace detail

// Warped-neighbor consistency: both neighbors pulled onto frame t and
// compared under their validity masks, terms summed.
template <class S>
Tensor<S> temporal_loss(const Tensor<S>& fused_prev, const Tensor<S>& fused_t,
                        const Tensor<S>& fused_next, const FlowField<S>& flow_prev,
                        const FlowField<S>& flow_next, const Tensor<S>& valid_prev,
                        const Tensor<S>& valid_next, GradTape<S>* tape = nullptr) {
  check_same_shape("temporal_loss", fused_prev, fused_t);
  check_same_shape("temporal_loss", fused_t, fused_next);
  Tensor<S> a = detail::warped_l1(fused_t, fused_prev, flow_prev, valid_prev, tape);
  Tensor<S> b = detail::warped_l1(fused_t, fused_next, flow_next, valid_next, tape);
  return add(a, b, tape);
}

// L_total = L_spatial + gamma * L_temp.
template <class S>
Tensor<S> total_loss(const Tensor<S>& spatial, const Tensor<S>& temporal, double gamma,
                     GradTape<S>* tape = nullptr) {
  if (gamma < 0.0) throw ValueError("total_loss: gamma must be >= 0");
  return add(spatial, scale(temporal, static_cast<S>(gamma), tape), tape);
}

}  // namespace mav
