#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <random>

#include "mav/pipeline.hpp"
#include "mav/synth.hpp"
#include "oracles.hpp"

using namespace mav;

namespace {

FusionConfig small_cfg() {
  FusionConfig cfg;
  cfg.channels = 8;
  cfg.patch = 4;
  cfg.crop = 32;
  cfg.k_max = 64;
  cfg.seed = 3;
  cfg.iters = 300;
  return cfg;
}

std::array<Tensor<float>, 3> repeat3(const Tensor<float>& f) { return {f, f, f}; }

std::uint64_t fnv1a(const Tensor<float>& t) {
  std::uint64_t h = 1469598103934665603ull;
  const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
  for (Index i = 0; i < t.numel() * static_cast<Index>(sizeof(float)); ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

TEST_CASE("untrained model on a static scene collapses to encode-fuse-decode") {
  FusionConfig cfg = small_cfg();
  FusionModel<float> m = init_model<float>(cfg);
  std::mt19937_64 rng(1);
  Tensor<float> ir = uniform<float>(Shape{32, 32}, rng, 0, 1);
  Tensor<float> vis = uniform<float>(Shape{32, 32}, rng, 0, 1);
  Tensor<float> zero_flow(Shape{32, 32, 2});
  Tensor<float> out = fuse_forward(m, repeat3(ir), repeat3(vis), zero_flow, zero_flow);

  // Manual composition of the ungated path.
  Tensor<float> e_ir = leaky_relu(conv2d(
      leaky_relu(conv2d(reshape(ir, Shape{1, 32, 32}), m.enc_ir_w1, &m.enc_ir_b1)), m.enc_ir_w2,
      &m.enc_ir_b2));
  Tensor<float> e_vis = leaky_relu(conv2d(
      leaky_relu(conv2d(reshape(vis, Shape{1, 32, 32}), m.enc_vis_w1, &m.enc_vis_b1)), m.enc_vis_w2,
      &m.enc_vis_b2));
  Tensor<float> x = leaky_relu(conv2d(concat_channels(std::vector<Tensor<float>>{e_ir, e_vis}),
                                      m.fuse_w, &m.fuse_b));
  Tensor<float> dh = leaky_relu(conv2d(x, m.dec_w1, &m.dec_b1));
  Tensor<float> ref = reshape(sigmoid_op(conv2d(dh, m.dec_w2, &m.dec_b2)), Shape{32, 32});
  for (Index i = 0; i < out.numel(); ++i) CHECK(out.at(i) == ref.at(i));
}

TEST_CASE("full_sb equals full on an all-static sequence") {
  FusionConfig cfg = small_cfg();
  FusionModel<float> m = init_model<float>(cfg);
  std::mt19937_64 rng(2);
  Tensor<float> ir = uniform<float>(Shape{32, 32}, rng, 0, 1);
  Tensor<float> vis = uniform<float>(Shape{32, 32}, rng, 0, 1);
  Tensor<float> zero_flow(Shape{32, 32, 2});
  Tensor<float> full_out = fuse_forward(m, repeat3(ir), repeat3(vis), zero_flow, zero_flow);
  FusionModel<float> m_sb = init_model<float>(cfg);
  m_sb.cfg.variant = Variant::full_sb;
  Tensor<float> sb_out = fuse_forward(m_sb, repeat3(ir), repeat3(vis), zero_flow, zero_flow);
  for (Index i = 0; i < full_out.numel(); ++i)
    CHECK(full_out.at(i) == doctest::Approx(sb_out.at(i)).epsilon(1e-6));
}

TEST_CASE("full_sb output is independent of the flow input") {
  FusionConfig cfg = small_cfg();
  cfg.variant = Variant::full_sb;
  FusionModel<float> m = init_model<float>(cfg);
  SceneSpec spec = default_scene();
  spec.frames = 3;
  SceneData data = generate(spec);
  Tensor<float> zero_flow(Shape{128, 128, 2});
  std::mt19937_64 rng(3);
  Tensor<float> random_flow = uniform<float>(Shape{128, 128, 2}, rng, -3, 3);
  auto ir = triplet_at(data.ir, 1);
  auto vis = triplet_at(data.vis, 1);
  Tensor<float> a = fuse_forward(m, ir, vis, zero_flow, zero_flow);
  Tensor<float> b = fuse_forward(m, ir, vis, random_flow, random_flow);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0);
}

TEST_CASE("inverted_mask with an all-ones mask reduces to the static branch result") {
  // Uniform nonzero flows make the motion mask exactly 1 everywhere, so the
  // inverted MDIM gate is 0 and the dynamic contribution is a smoothed zero.
  FusionConfig cfg = small_cfg();
  FusionModel<float> m_inv = init_model<float>(cfg);
  m_inv.cfg.variant = Variant::inverted_mask;
  // Constant frames: away from the zero-padded borders the encoder features
  // are constant, warping by a uniform flow reproduces them, and the MAFM
  // stage is idempotent; compare the interior where that holds.
  Tensor<float> ir(Shape{64, 64}, 0.8f);
  Tensor<float> vis(Shape{64, 64}, 0.4f);
  Tensor<float> flow(Shape{64, 64, 2});
  for (Index i = 0; i < 64 * 64; ++i) flow.data()[2 * i] = 3.0f;
  Tensor<float> inv_out = fuse_forward(m_inv, repeat3(ir), repeat3(vis), flow, flow);

  FusionModel<float> m_sb = init_model<float>(cfg);
  m_sb.cfg.variant = Variant::full_sb;
  Tensor<float> sb_out = fuse_forward(m_sb, repeat3(ir), repeat3(vis), flow, flow);
  for (Index y = 16; y < 48; ++y)
    for (Index x = 16; x < 48; ++x)
      CHECK(inv_out.at(y, x) == doctest::Approx(sb_out.at(y, x)).epsilon(2e-5));
}

TEST_CASE("forward is deterministic and matches the recorded golden hash") {
  SceneSpec spec = default_scene();
  spec.frames = 3;
  spec.height = 64;
  spec.width = 64;
  SceneData data = generate(spec);
  FusionConfig cfg;  // defaults: C=16, p=8
  cfg.seed = 42;
  FusionModel<float> m = init_model<float>(cfg);
  SequenceFlows<float> flows = estimate_sequence_flows(data.vis);
  auto run = [&] {
    return fuse_forward(m, triplet_at(data.ir, 1), triplet_at(data.vis, 1), flows.prev[1],
                        flows.next[1]);
  };
  Tensor<float> out1 = run();
  Tensor<float> out2 = run();
  CHECK(std::memcmp(out1.data(), out2.data(), sizeof(float) * out1.numel()) == 0);
  for (Index i = 0; i < out1.numel(); ++i) {
    CHECK(out1.at(i) > 0.0f);
    CHECK(out1.at(i) < 1.0f);
  }
  // Recorded on the reference build; determinism of the full forward path.
  CHECK(fnv1a(out1) == 12636770784348373908ull);
}

TEST_CASE("learning-rate schedule ends at exactly 1% of the initial rate") {
  CHECK(lr_at(1e-4, 0, 2000) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(1e-4, 1999, 2000) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(lr_at(5e-3, 299, 300) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at(1e-4, 0, 1) == doctest::Approx(1e-4));
}

TEST_CASE("gamma=0 and gamma=1 take identical steps on a static identical-frame batch") {
  SceneSpec spec;
  spec.seed = 5;
  spec.height = 48;
  spec.width = 48;
  spec.frames = 4;
  spec.noise_ir = 0.0;
  spec.noise_vis = 0.0;
  ObjectSpec obj;
  obj.size = 12;
  obj.x0 = 10;
  obj.y0 = 10;  // static object
  spec.objects = {obj};
  SceneData data = generate(spec);
  // Collapse to truly identical frames.
  for (std::size_t t = 1; t < data.ir.size(); ++t) {
    data.ir[t] = data.ir[0];
    data.vis[t] = data.vis[0];
  }
  FusionConfig cfg = small_cfg();
  cfg.iters = 1;
  cfg.crop = 32;
  FusionConfig cfg1 = cfg;
  cfg1.gamma = 0.0;
  FusionConfig cfg2 = cfg;
  cfg2.gamma = 1.0;
  TrainResult r1 = train(cfg1, data.ir, data.vis);
  TrainResult r2 = train(cfg2, data.ir, data.vis);
  REQUIRE(r1.weights.entries.size() == r2.weights.entries.size());
  for (std::size_t i = 0; i < r1.weights.entries.size(); ++i) {
    const auto& t1 = r1.weights.entries[i].second;
    const auto& t2 = r2.weights.entries[i].second;
    CHECK(std::memcmp(t1.data(), t2.data(), sizeof(float) * t1.numel()) == 0);
  }
}

TEST_CASE("300 training iterations reduce the moving-average loss") {
  SceneSpec spec = default_scene();
  spec.frames = 10;
  SceneData data = generate(spec);
  FusionConfig cfg = small_cfg();
  cfg.lr = 1e-3;  // desk-scale rate; 300 iterations are a short run
  TrainResult result = train(cfg, data.ir, data.vis);
  REQUIRE(result.log.size() == 300);
  const double initial = result.log.front().loss;
  const double final_ma = result.log.back().moving_avg;
  MESSAGE("initial loss ", initial, " final moving average ", final_ma);
  CHECK(final_ma < initial);
  CHECK(final_ma < 0.9 * initial);  // recorded threshold on the default task

  // Determinism: same seed reproduces the weights bit-exactly.
  TrainResult again = train(cfg, data.ir, data.vis);
  for (std::size_t i = 0; i < result.weights.entries.size(); ++i)
    CHECK(std::memcmp(result.weights.entries[i].second.data(),
                      again.weights.entries[i].second.data(),
                      sizeof(float) * result.weights.entries[i].second.numel()) == 0);
}

TEST_CASE("weights round-trip through the store preserves the forward pass") {
  FusionConfig cfg = small_cfg();
  FusionModel<float> m = init_model<float>(cfg);
  WeightStore store = to_weight_store(m);
  FusionModel<float> m2 = model_from_weights<float>(cfg, store);
  std::mt19937_64 rng(6);
  Tensor<float> ir = uniform<float>(Shape{32, 32}, rng, 0, 1);
  Tensor<float> vis = uniform<float>(Shape{32, 32}, rng, 0, 1);
  Tensor<float> zero(Shape{32, 32, 2});
  Tensor<float> a = fuse_forward(m, repeat3(ir), repeat3(vis), zero, zero);
  Tensor<float> b = fuse_forward(m2, repeat3(ir), repeat3(vis), zero, zero);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0);
}

TEST_CASE("flops_report: dense variant dominates, attention row scales exactly 3x") {
  FusionConfig cfg;  // defaults
  auto rows = flops_report(cfg, 480, 640);
  FusionConfig dense = cfg;
  dense.variant = Variant::dense_attention;
  auto dense_rows = flops_report(dense, 480, 640);
  CHECK(dense_rows.back().madds >= rows.back().madds);

  auto r720 = flops_report(cfg, 720, 1280);
  auto find = [](const std::vector<StageFlops>& rs, const std::string& name) {
    for (const auto& r : rs)
      if (r.name == name) return r.madds;
    return std::uint64_t(0);
  };
  // k is capped at k_max at both resolutions, so the interaction term is
  // exactly linear in the pixel count.
  const double growth = static_cast<double>(find(r720, "attention")) / find(rows, "attention");
  CHECK(growth == doctest::Approx(3.0).epsilon(1e-12));
  const double total_growth = static_cast<double>(r720.back().madds) / rows.back().madds;
  CHECK(total_growth <= 3.0);
}

TEST_CASE("flops_report equals the instrumented counter on a 64x64 forward") {
  SceneSpec spec = default_scene();
  spec.frames = 3;
  spec.height = 64;
  spec.width = 64;
  SceneData data = generate(spec);
  for (Variant v : {Variant::full, Variant::dense_attention, Variant::no_mafm, Variant::full_sb,
                    Variant::full_db, Variant::inverted_mask}) {
    FusionConfig cfg;
    cfg.variant = v;
    FusionModel<float> m = init_model<float>(cfg);
    SequenceFlows<float> flows = estimate_sequence_flows(data.vis);
    StageCounts stages;
    opcount::reset();
    fuse_forward(m, triplet_at(data.ir, 1), triplet_at(data.vis, 1), flows.prev[1], flows.next[1],
                 nullptr, &stages);
    const std::uint64_t measured_total = opcount::read();
    opcount::reset();

    auto rows = flops_report(cfg, 64, 64);
    auto find = [&](const std::string& name) {
      for (const auto& r : rows)
        if (r.name == name) return r.madds;
      return std::uint64_t(0);
    };
    CAPTURE(variant_name(v));
    CHECK(stages.encoder == find("encoder"));
    CHECK(stages.mafm == find("mafm"));
    CHECK(stages.fusion_join == find("fusion_join"));
    CHECK(stages.static_branch == find("static_branch"));
    CHECK(stages.attention == find("attention") + find("attention_proj"));
    CHECK(stages.reconstruct == find("reconstruct"));
    CHECK(stages.decoder == find("decoder"));
    CHECK(measured_total == find("total"));
  }
}

TEST_CASE("robustness: zero and random flows still give finite in-range outputs") {
  SceneSpec spec = default_scene();
  spec.frames = 3;
  spec.height = 64;
  spec.width = 64;
  SceneData data = generate(spec);
  FusionConfig cfg;
  FusionModel<float> m = init_model<float>(cfg);
  Tensor<float> zero(Shape{64, 64, 2});
  std::mt19937_64 rng(7);
  Tensor<float> random_flow = uniform<float>(Shape{64, 64, 2}, rng, -4, 4);
  for (const Tensor<float>& flow : {zero, random_flow}) {
    Tensor<float> out =
        fuse_forward(m, triplet_at(data.ir, 1), triplet_at(data.vis, 1), flow, flow);
    CHECK(all_finite(out));
    for (Index i = 0; i < out.numel(); ++i) {
      CHECK(out.at(i) > 0.0f);
      CHECK(out.at(i) < 1.0f);
    }
  }
  // The Top-K floor keeps at least one patch selected even for a zero mask.
  Tensor<float> zero_scores(Shape{64});
  CHECK(topk_select(zero_scores, 0.001, 256).omega.size() == 1);
}

TEST_CASE("forward rejects frames below the minimum size") {
  FusionConfig cfg;  // p=8 -> minimum 32
  FusionModel<float> m = init_model<float>(cfg);
  Tensor<float> tiny(Shape{16, 16}, 0.5f);
  Tensor<float> flow(Shape{16, 16, 2});
  CHECK_THROWS_AS(fuse_forward(m, repeat3(tiny), repeat3(tiny), flow, flow), ValueError);
}

TEST_CASE("train rejects short or mismatched sequences") {
  SceneSpec spec = default_scene();
  spec.frames = 2;
  SceneData data = generate(spec);
  FusionConfig cfg = small_cfg();
  CHECK_THROWS_AS(train(cfg, data.ir, data.vis), ValueError);
}
