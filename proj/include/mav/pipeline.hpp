#pragma once

// Full fusion network: per-modality shallow encoders, motion mask and gate
// from the input flows, dual MAFM alignment (each modality anchored on the
// other), channel-concat fusion join, MDIM static/dynamic branches, and a
// reconstruction decoder with sigmoid output. Also: desk-scale Adam training
// with the spatial+temporal loss, an analytic per-stage multiply-add report
// that matches the instrumented counter, and ablation variants.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mav/flow.hpp"
#include "mav/loss.hpp"
#include "mav/mafm.hpp"
#include "mav/mdim.hpp"
#include "mav/media_io.hpp"
#include "mav/metrics.hpp"
#include "mav/tensor.hpp"

namespace mav {

template <class S>
struct FusionModel {
  FusionConfig cfg;

  Tensor<S> enc_ir_w1, enc_ir_b1, enc_ir_w2, enc_ir_b2;
  Tensor<S> enc_vis_w1, enc_vis_b1, enc_vis_w2, enc_vis_b2;
  MafmWeights<S> mafm_ir, mafm_vis;
  Tensor<S> fuse_w, fuse_b;  // C x 2C x 1 x 1
  AttentionProj<S> attn;     // d x d each, d = C * p^2
  StaticWeights<S> stat;
  Tensor<S> smooth_w;  // C x C x 3 x 3, bias-free
  Tensor<S> dec_w1, dec_b1, dec_w2, dec_b2;

  Index token_dim() const { return Index(cfg.channels) * cfg.patch * cfg.patch; }

  std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
    return {
        {"enc_ir_w1", &enc_ir_w1},
        {"enc_ir_b1", &enc_ir_b1},
        {"enc_ir_w2", &enc_ir_w2},
        {"enc_ir_b2", &enc_ir_b2},
        {"enc_vis_w1", &enc_vis_w1},
        {"enc_vis_b1", &enc_vis_b1},
        {"enc_vis_w2", &enc_vis_w2},
        {"enc_vis_b2", &enc_vis_b2},
        {"mafm_ir_compress_w", &mafm_ir.compress_w},
        {"mafm_ir_compress_b", &mafm_ir.compress_b},
        {"mafm_ir_dw_w", &mafm_ir.dw_w},
        {"mafm_ir_proj_w", &mafm_ir.proj_w},
        {"mafm_ir_proj_b", &mafm_ir.proj_b},
        {"mafm_ir_omega", &mafm_ir.omega},
        {"mafm_vis_compress_w", &mafm_vis.compress_w},
        {"mafm_vis_compress_b", &mafm_vis.compress_b},
        {"mafm_vis_dw_w", &mafm_vis.dw_w},
        {"mafm_vis_proj_w", &mafm_vis.proj_w},
        {"mafm_vis_proj_b", &mafm_vis.proj_b},
        {"mafm_vis_omega", &mafm_vis.omega},
        {"fuse_w", &fuse_w},
        {"fuse_b", &fuse_b},
        {"attn_wq", &attn.wq},
        {"attn_wk", &attn.wk},
        {"attn_wv", &attn.wv},
        {"static_dw_w", &stat.dw_w},
        {"static_pw_w", &stat.pw_w},
        {"static_conv_w", &stat.conv_w},
        {"static_conv_b", &stat.conv_b},
        {"smooth_w", &smooth_w},
        {"dec_w1", &dec_w1},
        {"dec_b1", &dec_b1},
        {"dec_w2", &dec_w2},
        {"dec_b2", &dec_b2},
    };
  }
};

namespace detail {

template <class S>
Tensor<S> xavier(const Shape& s, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform<S>(s, rng, -limit, limit);
}

}  // namespace detail

// Deterministic initialization from cfg.seed. Residual paths (MAFM flow
// projection, static-branch output conv) start at zero so the untrained net
// collapses to plain encode -> fuse -> decode.
template <class S>
FusionModel<S> init_model(const FusionConfig& cfg) {
  cfg.validate();
  FusionModel<S> m;
  m.cfg = cfg;
  const Index c = cfg.channels, d = Index(cfg.channels) * cfg.patch * cfg.patch;
  std::mt19937_64 rng(cfg.seed + 0x9e3779b97f4a7c15ull);

  auto conv_init = [&](Index cout, Index cin, Index k) {
    return detail::xavier<S>(Shape{cout, cin, k, k}, cin * k * k, cout * k * k, rng);
  };
  auto zeros1 = [&](Index n) { return Tensor<S>(Shape{n}); };

  m.enc_ir_w1 = conv_init(c, 1, 3);
  m.enc_ir_b1 = zeros1(c);
  m.enc_ir_w2 = conv_init(c, c, 3);
  m.enc_ir_b2 = zeros1(c);
  m.enc_vis_w1 = conv_init(c, 1, 3);
  m.enc_vis_b1 = zeros1(c);
  m.enc_vis_w2 = conv_init(c, c, 3);
  m.enc_vis_b2 = zeros1(c);

  for (MafmWeights<S>* w : {&m.mafm_ir, &m.mafm_vis}) {
    w->compress_w = conv_init(c, 4 * c + 4, 1);
    w->compress_b = zeros1(c);
    w->dw_w = detail::xavier<S>(Shape{c, 3, 3}, 9, 9, rng);
    w->proj_w = Tensor<S>(Shape{2, c, 1, 1});
    w->proj_b = zeros1(2);
    // Center-biased temporal logits: aggregation starts close to the sharp
    // current frame and training widens the window only where it pays off.
    w->omega = Tensor<S>(Shape{3}, std::vector<S>{S(0), S(2), S(0)});
  }

  m.fuse_w = conv_init(c, 2 * c, 1);
  m.fuse_b = zeros1(c);
  m.attn.wq = detail::xavier<S>(Shape{d, d}, d, d, rng);
  m.attn.wk = detail::xavier<S>(Shape{d, d}, d, d, rng);
  m.attn.wv = detail::xavier<S>(Shape{d, d}, d, d, rng);
  m.stat.dw_w = detail::xavier<S>(Shape{c, 3, 3}, 9, 9, rng);
  m.stat.pw_w = detail::xavier<S>(Shape{c, c}, c, c, rng);
  m.stat.conv_w = Tensor<S>(Shape{c, c, 3, 3});
  m.stat.conv_b = zeros1(c);
  m.smooth_w = conv_init(c, c, 3);
  m.dec_w1 = conv_init(c, c, 3);
  m.dec_b1 = zeros1(c);
  m.dec_w2 = conv_init(1, c, 3);
  m.dec_b2 = zeros1(1);
  return m;
}

template <class To, class From>
FusionModel<To> cast_model(FusionModel<From>& m) {
  FusionModel<To> out;
  out.cfg = m.cfg;
  auto src = m.named_params();
  FusionModel<To>* po = &out;
  auto dst = po->named_params();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = cast<To>(*src[i].second);
  return out;
}

template <class S>
WeightStore to_weight_store(FusionModel<S>& m) {
  WeightStore store;
  for (auto& [name, t] : m.named_params()) store.put(name, cast<float>(*t));
  return store;
}

template <class S>
FusionModel<S> model_from_weights(const FusionConfig& cfg, const WeightStore& store) {
  FusionModel<S> m = init_model<S>(cfg);
  for (auto& [name, t] : m.named_params()) {
    const Tensor<float>* src = store.find(name);
    if (!src) throw IoError("weights: missing tensor '" + name + "'");
    if (src->shape() != t->shape())
      throw IoError("weights: tensor '" + name + "' has shape " + src->shape().str() +
                    " but config implies " + t->shape().str());
    *t = cast<S>(*src);
  }
  return m;
}

// Per-stage multiply-add snapshot taken from the runtime counter.
struct StageCounts {
  std::uint64_t encoder = 0, mafm = 0, fusion_join = 0, static_branch = 0, attention = 0,
                reconstruct = 0, decoder = 0;
  std::uint64_t total() const {
    return encoder + mafm + fusion_join + static_branch + attention + reconstruct + decoder;
  }
};

namespace detail {

template <class S>
Tensor<S> encode(const Tensor<S>& frame, const Tensor<S>& w1, const Tensor<S>& b1,
                 const Tensor<S>& w2, const Tensor<S>& b2, GradTape<S>* tape) {
  Tensor<S> x = reshape(frame, Shape{1, frame.extent(0), frame.extent(1)}, tape);
  Tensor<S> h = leaky_relu(conv2d(x, w1, &b1, tape), tape);
  return leaky_relu(conv2d(h, w2, &b2, tape), tape);
}

template <class S>
Tensor<S> ones_like_plane(Index h, Index w) {
  return Tensor<S>(Shape{h, w}, S(1));
}

}  // namespace detail

// Fuses the center frame of an aligned (t-1, t, t+1) window. Flows are
// anchored at t: phi_prev pulls frame t-1 onto t, phi_next pulls t+1 onto t.
template <class S>
Tensor<S> fuse_forward(const FusionModel<S>& m, const std::array<Tensor<S>, 3>& ir,
                       const std::array<Tensor<S>, 3>& vis, const FlowField<S>& phi_prev,
                       const FlowField<S>& phi_next,
                       std::type_identity_t<GradTape<S>*> tape = nullptr,
                       StageCounts* stages = nullptr) {
  const FusionConfig& cfg = m.cfg;
  const Index h = ir[1].extent(0), w = ir[1].extent(1), p = cfg.patch;
  if (h < 4 * p || w < 4 * p)
    throw ValueError("fuse_forward: frame " + ir[1].shape().str() + " below minimum " +
                     std::to_string(4 * p) + "x" + std::to_string(4 * p));
  for (int i = 0; i < 3; ++i) {
    check_same_shape("fuse_forward", ir[i], ir[1]);
    check_same_shape("fuse_forward", vis[i], ir[1]);
  }
  auto mark = [stages, last = opcount::read()](std::uint64_t StageCounts::* slot) mutable {
    const std::uint64_t now = opcount::read();
    if (stages) stages->*slot += now - last;
    last = now;
  };

  std::array<Tensor<S>, 3> e_ir, e_vis;
  for (int i = 0; i < 3; ++i) {
    e_ir[i] = detail::encode(ir[i], m.enc_ir_w1, m.enc_ir_b1, m.enc_ir_w2, m.enc_ir_b2, tape);
    e_vis[i] = detail::encode(vis[i], m.enc_vis_w1, m.enc_vis_b1, m.enc_vis_w2, m.enc_vis_b2, tape);
  }
  mark(&StageCounts::encoder);

  // full_db treats every pixel as dynamic; full_sb treats every pixel as
  // static (gate closed, dynamic branch dropped), which also makes its
  // output independent of the flow inputs.
  MotionMask<S> mask = cfg.variant == Variant::full_db  ? detail::ones_like_plane<S>(h, w)
                       : cfg.variant == Variant::full_sb ? Tensor<S>(Shape{h, w})
                                                         : motion_mask(phi_prev, phi_next);
  Tensor<S> gate = cfg.variant == Variant::full_sb ? Tensor<S>(Shape{h, w})
                                                   : binarize_gate(mask, cfg.gate_theta);

  Tensor<S> a_ir, a_vis;
  if (cfg.variant == Variant::no_mafm) {
    Tensor<S> third(Shape{3}, S(1.0 / 3.0));
    a_ir = weighted_sum3(e_ir[0], e_ir[1], e_ir[2], third, tape);
    a_vis = weighted_sum3(e_vis[0], e_vis[1], e_vis[2], third, tape);
  } else {
    a_ir = mafm_forward(e_ir[0], e_ir[1], e_ir[2], e_vis[1], phi_prev, phi_next, gate, m.mafm_ir,
                        tape);
    a_vis = mafm_forward(e_vis[0], e_vis[1], e_vis[2], e_ir[1], phi_prev, phi_next, gate,
                         m.mafm_vis, tape);
  }
  mark(&StageCounts::mafm);

  Tensor<S> joined = concat_channels(std::vector<Tensor<S>>{a_ir, a_vis}, tape);
  Tensor<S> fused_feat = leaky_relu(conv2d(joined, m.fuse_w, &m.fuse_b, tape), tape);
  mark(&StageCounts::fusion_join);

  MotionMask<S> mdim_mask = mask;
  if (cfg.variant == Variant::inverted_mask) {
    mdim_mask = Tensor<S>(mask.shape());
    const S* pm = mask.data();
    S* po = mdim_mask.data();
    for (Index i = 0; i < mask.numel(); ++i) po[i] = S(1) - pm[i];
  }

  const Index hp = (h + p - 1) / p * p, wp = (w + p - 1) / p * p;
  Tensor<S> xp = (hp == h && wp == w) ? fused_feat : pad_spatial(fused_feat, hp, wp, tape);
  Tensor<S> mp = (hp == h && wp == w) ? mdim_mask : pad_plane(mdim_mask, hp, wp);

  Tensor<S> f_static = static_branch(xp, m.stat, tape);
  mark(&StageCounts::static_branch);

  Tensor<S> yp;
  if (cfg.variant == Variant::full_sb) {
    yp = f_static;
    mark(&StageCounts::attention);
    mark(&StageCounts::reconstruct);
  } else {
    Tensor<S> tokens = patch_tokens(xp, p, tape);
    Tensor<S> scores = saliency_scores(mp, p);
    const Index n = tokens.extent(0);
    SalientSet<S> sel;
    if (cfg.variant == Variant::dense_attention) {
      sel.omega.resize(n);
      std::iota(sel.omega.begin(), sel.omega.end(), Index(0));
      sel.weights.assign(scores.data(), scores.data() + n);
    } else {
      sel = topk_select(scores, cfg.tau, cfg.k_max);
    }
    Tensor<S> t_global = global_token(tokens, tape);
    const KvMode mode =
        cfg.kv_mode == ConfigKvMode::all_patches ? KvMode::all_patches : KvMode::global_token_only;
    Tensor<S> kv = build_kv(tokens, t_global, mode, tape);
    Tensor<S> x_sel = gather_rows(tokens, sel.omega, tape);
    Tensor<S> f_attn = sparse_attention(x_sel, kv, m.attn, tape);
    mark(&StageCounts::attention);
    yp = reconstruct(f_static, f_attn, sel.weights, sel.omega, mp, m.smooth_w, p, tape);
    mark(&StageCounts::reconstruct);
  }

  Tensor<S> y = (hp == h && wp == w) ? yp : crop_spatial(yp, h, w, tape);
  Tensor<S> dh = leaky_relu(conv2d(y, m.dec_w1, &m.dec_b1, tape), tape);
  Tensor<S> out = sigmoid_op(conv2d(dh, m.dec_w2, &m.dec_b2, tape), tape);
  mark(&StageCounts::decoder);
  return reshape(out, Shape{h, w}, tape);
}

// --- sequence plumbing -------------------------------------------------------

template <class S>
struct SequenceFlows {
  std::vector<FlowField<S>> prev;  // [t]: pulls frame t-1 onto t (zero at t=0)
  std::vector<FlowField<S>> next;  // [t]: pulls frame t+1 onto t (zero at t=T-1)
};

template <class S>
SequenceFlows<S> estimate_sequence_flows(const std::vector<Tensor<S>>& frames) {
  const std::size_t t_count = frames.size();
  SequenceFlows<S> flows;
  flows.prev.resize(t_count);
  flows.next.resize(t_count);
  const Index h = frames[0].extent(0), w = frames[0].extent(1);
  const FlowCfg cfg = flow_cfg_for(h, w);
  for (std::size_t t = 0; t < t_count; ++t) {
    flows.prev[t] = t == 0 ? Tensor<S>(Shape{h, w, 2}) : estimate_flow(frames[t], frames[t - 1], cfg);
    flows.next[t] =
        t + 1 == t_count ? Tensor<S>(Shape{h, w, 2}) : estimate_flow(frames[t], frames[t + 1], cfg);
  }
  return flows;
}

// Frame window around t with edge frames duplicated (zero flow at the edge).
template <class S>
std::array<Tensor<S>, 3> triplet_at(const std::vector<Tensor<S>>& frames, std::size_t t) {
  const std::size_t last = frames.size() - 1;
  return {frames[t == 0 ? 0 : t - 1], frames[t], frames[t == last ? last : t + 1]};
}

template <class S>
std::vector<Tensor<S>> fuse_sequence(const FusionModel<S>& m, const std::vector<Tensor<S>>& ir,
                                     const std::vector<Tensor<S>>& vis,
                                     const SequenceFlows<S>& flows) {
  if (ir.size() != vis.size()) throw ShapeError("fuse_sequence: sequence lengths differ");
  std::vector<Tensor<S>> out(ir.size());
  for (std::size_t t = 0; t < ir.size(); ++t) {
    out[t] = fuse_forward(m, triplet_at(ir, t), triplet_at(vis, t), flows.prev[t], flows.next[t]);
    if (!all_finite(out[t]))
      throw NumericError("fuse_sequence: non-finite output at frame " + std::to_string(t));
  }
  return out;
}

// --- plane crops (frames, flows, masks) ---------------------------------------

template <class S>
Tensor<S> crop_region(const Tensor<S>& x, Index y0, Index x0, Index ch, Index cw) {
  if (x.rank() == 2) {
    Tensor<S> out(Shape{ch, cw});
    for (Index y = 0; y < ch; ++y)
      for (Index xx = 0; xx < cw; ++xx) out.data()[y * cw + xx] = x.at(y0 + y, x0 + xx);
    return out;
  }
  if (x.rank() == 3 && x.extent(2) == 2) {  // flow field
    Tensor<S> out(Shape{ch, cw, 2});
    for (Index y = 0; y < ch; ++y)
      for (Index xx = 0; xx < cw; ++xx)
        for (int k = 0; k < 2; ++k)
          out.data()[(y * cw + xx) * 2 + k] = x.at(y0 + y, x0 + xx, k);
    return out;
  }
  throw ShapeError("crop_region: unsupported shape " + x.shape().str());
}

// --- training -----------------------------------------------------------------

struct TrainLogRow {
  int iter;
  double loss;
  double moving_avg;  // over the trailing 50 iterations
  double lr;
};

struct TrainResult {
  WeightStore weights;
  std::vector<TrainLogRow> log;
};

// lr decays exponentially to 1% of its initial value at the final iteration.
inline double lr_at(double lr0, int iter, int iters) {
  if (iters <= 1) return lr0;
  return lr0 * std::pow(0.01, static_cast<double>(iter) / static_cast<double>(iters - 1));
}

// Adam training over random temporal windows. Each iteration fuses a window
// of 4 consecutive frames at one random crop (the desk-scale batch), applies
// the spatial loss to every fused frame and the temporal loss at the interior
// centers, and steps with bias-corrected Adam.
template <class S>
TrainResult train(const FusionConfig& cfg, const std::vector<Tensor<S>>& ir,
                  const std::vector<Tensor<S>>& vis, FusionModel<S>* model_out = nullptr) {
  cfg.validate();
  const std::size_t t_count = ir.size();
  if (t_count < 3 || vis.size() != t_count)
    throw ValueError("train: need aligned sequences of length >= 3, got " +
                     std::to_string(t_count) + "/" + std::to_string(vis.size()));
  const Index h = ir[0].extent(0), w = ir[0].extent(1);
  Index crop = std::min<Index>(cfg.crop, std::min(h, w));
  crop = crop / cfg.patch * cfg.patch;
  if (crop < 4 * cfg.patch)
    throw ValueError("train: crop " + std::to_string(crop) + " below minimum " +
                     std::to_string(4 * cfg.patch));

  FusionModel<S> model = init_model<S>(cfg);
  SequenceFlows<S> flows = estimate_sequence_flows(vis);

  LossConfig loss_cfg;
  loss_cfg.gamma = cfg.gamma;
  // Forward-backward validity per frame; zero mask at sequence edges.
  std::vector<Tensor<S>> valid_prev(t_count), valid_next(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    valid_prev[t] = t == 0 ? Tensor<S>(Shape{h, w})
                           : validity_masks(flows.prev[t], flows.next[t - 1], loss_cfg.fb_epsilon);
    valid_next[t] = t + 1 == t_count
                        ? Tensor<S>(Shape{h, w})
                        : validity_masks(flows.next[t], flows.prev[t + 1], loss_cfg.fb_epsilon);
  }

  auto params = model.named_params();
  std::vector<std::vector<double>> adam_m(params.size()), adam_v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_m[i].assign(params[i].second->numel(), 0.0);
    adam_v[i].assign(params[i].second->numel(), 0.0);
  }
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  std::mt19937_64 rng(cfg.seed);
  const std::size_t window = std::min<std::size_t>(4, t_count);
  std::uniform_int_distribution<std::size_t> pick_t(0, t_count - window);
  std::uniform_int_distribution<Index> pick_y(0, h - crop), pick_x(0, w - crop);

  TrainResult result;
  std::vector<double> recent;
  for (int iter = 0; iter < cfg.iters; ++iter) {
    const std::size_t t0 = pick_t(rng);
    const Index cy = pick_y(rng), cx = pick_x(rng);

    GradTape<S> tape;
    for (auto& [name, t] : params) {
      t->clear_tape_id();
      tape.watch(*t);
    }

    auto crop_frames = [&](const std::vector<Tensor<S>>& seq, std::size_t t) {
      std::array<Tensor<S>, 3> tri = triplet_at(seq, t);
      for (auto& f : tri) f = crop_region(f, cy, cx, crop, crop);
      return tri;
    };

    std::vector<Tensor<S>> fused(window);
    Tensor<S> spatial_sum(Shape{1}, S(0));
    for (std::size_t j = 0; j < window; ++j) {
      const std::size_t t = t0 + j;
      fused[j] = fuse_forward(model, crop_frames(ir, t), crop_frames(vis, t),
                              crop_region(flows.prev[t], cy, cx, crop, crop),
                              crop_region(flows.next[t], cy, cx, crop, crop), &tape);
      Tensor<S> sp = spatial_loss(fused[j], crop_region(ir[t], cy, cx, crop, crop),
                                  crop_region(vis[t], cy, cx, crop, crop), loss_cfg, &tape);
      spatial_sum = add(spatial_sum, sp, &tape);
    }
    Tensor<S> spatial = scale(spatial_sum, S(1) / S(window), &tape);

    Tensor<S> temporal(Shape{1}, S(0));
    Index centers = 0;
    for (std::size_t j = 1; j + 1 < window; ++j) {
      const std::size_t t = t0 + j;
      Tensor<S> term = temporal_loss(fused[j - 1], fused[j], fused[j + 1],
                                     crop_region(flows.prev[t], cy, cx, crop, crop),
                                     crop_region(flows.next[t], cy, cx, crop, crop),
                                     crop_region(valid_prev[t], cy, cx, crop, crop),
                                     crop_region(valid_next[t], cy, cx, crop, crop), &tape);
      temporal = add(temporal, term, &tape);
      ++centers;
    }
    if (centers > 1) temporal = scale(temporal, S(1) / S(centers), &tape);

    Tensor<S> loss = total_loss(spatial, temporal, cfg.gamma, &tape);
    const double loss_val = static_cast<double>(loss.at(0));
    if (!std::isfinite(loss_val))
      throw NumericError("train: non-finite loss at iteration " + std::to_string(iter));

    backward(tape, loss);

    const double lr = lr_at(cfg.lr, iter, cfg.iters);
    const double bc1 = 1.0 - std::pow(beta1, iter + 1), bc2 = 1.0 - std::pow(beta2, iter + 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& t = *params[i].second;
      Tensor<S> g = tape.grad_of(t);
      Tensor<S> updated(t.shape());
      const S* pt = t.data();
      const S* pg = g.data();
      S* pu = updated.data();
      for (Index j = 0; j < t.numel(); ++j) {
        const double gd = static_cast<double>(pg[j]);
        adam_m[i][j] = beta1 * adam_m[i][j] + (1 - beta1) * gd;
        adam_v[i][j] = beta2 * adam_v[i][j] + (1 - beta2) * gd * gd;
        const double step = lr * (adam_m[i][j] / bc1) / (std::sqrt(adam_v[i][j] / bc2) + adam_eps);
        pu[j] = static_cast<S>(static_cast<double>(pt[j]) - step);
      }
      t = updated;
    }

    recent.push_back(loss_val);
    if (recent.size() > 50) recent.erase(recent.begin());
    const double ma = std::accumulate(recent.begin(), recent.end(), 0.0) / recent.size();
    result.log.push_back({iter, loss_val, ma, lr});
  }

  result.weights = to_weight_store(model);
  if (model_out) *model_out = std::move(model);
  return result;
}

// --- analytic multiply-add report ---------------------------------------------

struct StageFlops {
  std::string name;
  std::uint64_t madds = 0;
};

// Per-fused-frame counts. "attention" is the score+apply interaction (the
// part that scales with k*N); "attention_proj" is the Q/K/V projections.
// The instrumented counter over one forward equals the row sums exactly.
inline std::vector<StageFlops> flops_report(const FusionConfig& cfg, Index h, Index w) {
  cfg.validate();
  const std::uint64_t c = cfg.channels, p = cfg.patch;
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
  const std::uint64_t hp = (h + p - 1) / p * p, wp = (w + p - 1) / p * p;
  const std::uint64_t hwp = hp * wp;
  const std::uint64_t n = (hp / p) * (wp / p);
  const std::uint64_t d = c * p * p;
  const std::uint64_t k =
      cfg.variant == Variant::dense_attention
          ? n
          : std::max<std::uint64_t>(
                1, std::min<std::uint64_t>(static_cast<std::uint64_t>(n * cfg.tau), cfg.k_max));

  std::vector<StageFlops> rows;
  rows.push_back({"encoder", 6 * (hw * c * 9 * (1 + c))});
  std::uint64_t mafm = 0;
  if (cfg.variant != Variant::no_mafm)
    mafm = 2 * (4 * (4 * c * hw) + hw * c * (4 * c + 4) + hw * c * 9 + hw * 2 * c);
  rows.push_back({"mafm", mafm});
  rows.push_back({"fusion_join", hw * c * 2 * c});
  rows.push_back({"static_branch", hwp * (c * 9 + c * c + c * c * 9)});
  std::uint64_t attn = 0, proj = 0, smooth = 0;
  if (cfg.variant != Variant::full_sb) {
    if (cfg.kv_mode == ConfigKvMode::global_token_only) {
      attn = 2 * k * d;
      proj = (k + 2) * d * d;
    } else {
      attn = 2 * k * n * d;
      proj = (k + 2 * n) * d * d;
    }
    smooth = hwp * c * c * 9;
  }
  rows.push_back({"attention", attn});
  rows.push_back({"attention_proj", proj});
  rows.push_back({"reconstruct", smooth});
  rows.push_back({"decoder", hw * c * c * 9 + hw * c * 9});
  std::uint64_t total = 0;
  for (const auto& r : rows) total += r.madds;
  rows.push_back({"total", total});
  return rows;
}

// --- bench table -----------------------------------------------------------------

// Attention cost sweep plus the pipeline scaling table at 640x480 and
// 1280x720. Measured columns run the instrumented kernels; no wall times go
// into the file, so the bytes are deterministic.
inline void write_bench_csv(const std::string& path, const std::vector<Index>& ns, double tau,
                            Index d, Index k_max, KvMode mode, const FusionConfig& pipeline_cfg) {
  std::vector<std::vector<std::string>> rows;
  std::mt19937_64 rng(1);
  for (Index n : ns) {
    const Index k = std::max<Index>(1, std::min<Index>(static_cast<Index>(n * tau), k_max));
    const std::uint64_t dense = dense_attention_flops(n, d);
    const std::uint64_t sparse = attention_flops(n, k, d, mode);
    Tensor<float> tokens = uniform<float>(Shape{n, d}, rng, -1.0, 1.0);
    AttentionProj<float> proj{uniform<float>(Shape{d, d}, rng, -0.1, 0.1),
                              uniform<float>(Shape{d, d}, rng, -0.1, 0.1),
                              uniform<float>(Shape{d, d}, rng, -0.1, 0.1)};
    std::vector<Index> omega(k);
    std::iota(omega.begin(), omega.end(), Index(0));
    Tensor<float> x_sel = gather_rows(tokens, omega);
    Tensor<float> kv = build_kv(tokens, global_token(tokens), mode);
    opcount::reset();
    sparse_attention(x_sel, kv, proj);
    const std::uint64_t measured_sparse = opcount::read();
    opcount::reset();
    sparse_attention(tokens, tokens, proj);  // dense baseline
    const std::uint64_t measured_dense = opcount::read();
    opcount::reset();
    rows.push_back({"attention", "sweep", std::to_string(n), std::to_string(k), std::to_string(d),
                    std::to_string(dense), std::to_string(sparse),
                    csv_value(static_cast<double>(dense) / static_cast<double>(sparse)),
                    std::to_string(measured_sparse), std::to_string(measured_dense), "", "", ""});
  }
  auto r480 = flops_report(pipeline_cfg, 480, 640);
  auto r720 = flops_report(pipeline_cfg, 720, 1280);
  for (std::size_t i = 0; i < r480.size(); ++i) {
    const double growth = r480[i].madds == 0 ? 0.0
                                             : static_cast<double>(r720[i].madds) /
                                                   static_cast<double>(r480[i].madds);
    rows.push_back({"pipeline", r480[i].name, "", "", "", "", "", "", "", "",
                    std::to_string(r480[i].madds), std::to_string(r720[i].madds), csv_value(growth)});
  }
  write_csv(path,
            {"section", "name", "n", "k", "d", "dense_madds", "sparse_madds", "ratio",
             "measured_sparse", "measured_dense", "flops_480p", "flops_720p", "growth"},
            rows);
}

// --- ablation ------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  double qabf = 0, piella_qs = 0, ssim = 0, ms2r = 0;
};

// Trains each variant from the same seed/data, fuses the full sequence and
// evaluates the metric suite.
inline std::vector<AblationRow> ablate(const FusionConfig& base,
                                       const std::vector<Variant>& variants,
                                       const std::vector<Tensor<float>>& ir,
                                       const std::vector<Tensor<float>>& vis) {
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    FusionConfig cfg = base;
    cfg.variant = v;
    FusionModel<float> model;
    train(cfg, ir, vis, &model);
    SequenceFlows<float> flows = estimate_sequence_flows(vis);
    std::vector<Tensor<float>> fused = fuse_sequence(model, ir, vis, flows);
    MetricReport report = evaluate_metrics(fused, ir, vis);
    AblationRow row;
    row.variant = variant_name(v);
    row.qabf = report.find("qabf")->mean();
    row.piella_qs = report.find("piella_qs")->mean();
    row.ssim = report.find("ssim")->mean();
    row.ms2r = report.find("ms2r_proxy") ? report.find("ms2r_proxy")->mean() : 0.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mav
