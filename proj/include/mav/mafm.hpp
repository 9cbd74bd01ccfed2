#pragma once

// Motion-aware feature alignment: coarse bilinear warping of a three-frame
// feature window, cross-modal residual flow refinement of the center frame,
// softmax-weighted temporal aggregation, and motion-gated selection between
// the aggregate and the raw current-frame feature.

#include <vector>

#include "mav/flow.hpp"
#include "mav/image_ops.hpp"
#include "mav/tensor.hpp"

namespace mav {

template <class S>
struct AlignedTriplet {
  Tensor<S> prev, center, next;  // all C x H x W
};

// Refinement stack: 1x1 channel compression (4C+4 -> C), leaky activation,
// depthwise 3x3, leaky activation, 1x1 projection to a 2-channel residual
// flow. The projection is zero-initialized so alignment starts purely coarse.
template <class S>
struct MafmWeights {
  Tensor<S> compress_w;  // C x (4C+4) x 1 x 1
  Tensor<S> compress_b;  // C
  Tensor<S> dw_w;        // C x 3 x 3
  Tensor<S> proj_w;      // 2 x C x 1 x 1
  Tensor<S> proj_b;      // 2
  Tensor<S> omega;       // 3 temporal logits
};

// Eq-style coarse alignment: neighbors warp by their own flows, the center by
// the mean flow of the two.
template <class S>
AlignedTriplet<S> coarse_align(const Tensor<S>& f_prev, const Tensor<S>& f_t,
                               const Tensor<S>& f_next, const FlowField<S>& phi_prev,
                               const FlowField<S>& phi_next, GradTape<S>* tape = nullptr) {
  check_same_shape("coarse_align", f_prev, f_t);
  check_same_shape("coarse_align", f_t, f_next);
  FlowField<S> phi_t = mean_flow(phi_prev, phi_next);
  AlignedTriplet<S> out;
  out.prev = bilinear_sample(f_prev, phi_prev, tape);
  out.center = bilinear_sample(f_t, phi_t, tape);
  out.next = bilinear_sample(f_next, phi_next, tape);
  return out;
}

// Predicts the residual flow from [anchor, warped triplet, both flows]
// (4C+4 channels). anchor is the other modality's feature at time t.
template <class S>
Tensor<S> refine_residual(const Tensor<S>& anchor, const AlignedTriplet<S>& tri,
                          const FlowField<S>& phi_prev, const FlowField<S>& phi_next,
                          const MafmWeights<S>& w, GradTape<S>* tape = nullptr) {
  check_same_shape("refine_residual", anchor, tri.center);
  std::vector<Tensor<S>> parts{anchor, tri.prev, tri.center, tri.next,
                               hwc_to_chw(phi_prev), hwc_to_chw(phi_next)};
  Tensor<S> stacked = concat_channels(parts, tape);
  Tensor<S> hid = leaky_relu(conv2d(stacked, w.compress_w, &w.compress_b, tape), tape);
  hid = leaky_relu(depthwise_conv(hid, w.dw_w, tape), tape);
  Tensor<S> res = conv2d(hid, w.proj_w, &w.proj_b, tape);  // 2 x H x W
  return chw_to_hwc(res, tape);                            // H x W x 2
}

// Re-warps the raw center feature by the compensated flow phi_t + dphi.
template <class S>
Tensor<S> apply_residual(const Tensor<S>& f_t, const FlowField<S>& phi_t, const Tensor<S>& dphi,
                         GradTape<S>* tape = nullptr) {
  check_same_shape("apply_residual", phi_t, dphi);
  Tensor<S> total = add(phi_t, dphi);  // flows are constants on the tape
  return bilinear_sample(f_t, total, tape);
}

// Softmax(omega)-weighted sum of the aligned features.
template <class S>
Tensor<S> temporal_aggregate(const Tensor<S>& f_prev, const Tensor<S>& f_center,
                             const Tensor<S>& f_next, const Tensor<S>& omega,
                             GradTape<S>* tape = nullptr) {
  Tensor<S> w = softmax_lastdim(omega, tape);
  return weighted_sum3(f_prev, f_center, f_next, w, tape);
}

// gate == 1 -> aggregated feature, gate == 0 -> raw current-frame feature.
template <class S>
Tensor<S> motion_gate(const Tensor<S>& f_agg, const Tensor<S>& f_t, const Tensor<S>& gate,
                      GradTape<S>* tape = nullptr) {
  return mask_blend(f_agg, f_t, gate, tape);
}

// Full module pass for one modality.
template <class S>
Tensor<S> mafm_forward(const Tensor<S>& f_prev, const Tensor<S>& f_t, const Tensor<S>& f_next,
                       const Tensor<S>& anchor, const FlowField<S>& phi_prev,
                       const FlowField<S>& phi_next, const Tensor<S>& gate,
                       const MafmWeights<S>& w, GradTape<S>* tape = nullptr) {
  AlignedTriplet<S> tri = coarse_align(f_prev, f_t, f_next, phi_prev, phi_next, tape);
  Tensor<S> dphi = refine_residual(anchor, tri, phi_prev, phi_next, w, tape);
  Tensor<S> f_hat = apply_residual(f_t, mean_flow(phi_prev, phi_next), dphi, tape);
  Tensor<S> agg = temporal_aggregate(tri.prev, f_hat, tri.next, w.omega, tape);
  return motion_gate(agg, f_t, gate, tape);
}

}  // namespace mav
