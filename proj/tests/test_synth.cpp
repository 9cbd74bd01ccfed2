#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mav/flow.hpp"
#include "mav/synth.hpp"

using namespace mav;

namespace {

SceneSpec single_rect(double size, double vx, double vy) {
  SceneSpec spec;
  spec.seed = 11;
  spec.height = 96;
  spec.width = 96;
  spec.frames = 5;
  ObjectSpec obj;
  obj.kind = ObjectSpec::Kind::rectangle;
  obj.size = size;
  obj.x0 = 20;
  obj.y0 = 40;
  obj.vx = vx;
  obj.vy = vy;
  spec.objects = {obj};
  return spec;
}

}  // namespace

TEST_CASE("generate is deterministic bit-for-bit") {
  SceneData a = generate(default_scene());
  SceneData b = generate(default_scene());
  REQUIRE(a.ir.size() == b.ir.size());
  for (std::size_t t = 0; t < a.ir.size(); ++t) {
    CHECK(std::memcmp(a.ir[t].data(), b.ir[t].data(), sizeof(float) * a.ir[t].numel()) == 0);
    CHECK(std::memcmp(a.vis[t].data(), b.vis[t].data(), sizeof(float) * a.vis[t].numel()) == 0);
  }
  for (std::size_t t = 0; t + 1 < a.ir.size(); ++t)
    CHECK(std::memcmp(a.gt_flow_fwd[t].data(), b.gt_flow_fwd[t].data(),
                      sizeof(float) * a.gt_flow_fwd[t].numel()) == 0);
}

TEST_CASE("zero-velocity object: flows zero, mask static") {
  SceneData data = generate(single_rect(16, 0, 0));
  for (const auto& f : data.gt_flow_fwd)
    for (Index i = 0; i < f.numel(); ++i) CHECK(f.at(i) == 0.0f);
  for (std::size_t t = 1; t < data.gt_mask.size(); ++t)
    CHECK(std::memcmp(data.gt_mask[t].data(), data.gt_mask[0].data(),
                      sizeof(float) * data.gt_mask[0].numel()) == 0);
}

TEST_CASE("moving rectangle: gt flow equals velocity inside the footprint") {
  SceneData data = generate(single_rect(8, 2, 0));
  const auto& mask = data.gt_mask[0];
  const auto& flow = data.gt_flow_fwd[0];
  Index inside = 0;
  for (Index y = 0; y < mask.extent(0); ++y)
    for (Index x = 0; x < mask.extent(1); ++x) {
      if (mask.at(y, x) > 0.5f) {
        CHECK(flow.at(y, x, 0) == 2.0f);
        CHECK(flow.at(y, x, 1) == 0.0f);
        ++inside;
      } else {
        CHECK(flow.at(y, x, 0) == 0.0f);
      }
    }
  CHECK(inside == 64);  // 8x8 at integral position
}

TEST_CASE("gt_mask equals the support of nonzero gt flow for moving objects") {
  SceneData data = generate(single_rect(12, 1, -1));
  for (std::size_t t = 0; t + 1 < data.ir.size(); ++t) {
    const auto& flow = data.gt_flow_fwd[t];
    const auto& mask = data.gt_mask[t];
    for (Index y = 0; y < mask.extent(0); ++y)
      for (Index x = 0; x < mask.extent(1); ++x) {
        const bool moving = flow.at(y, x, 0) != 0.0f || flow.at(y, x, 1) != 0.0f;
        CHECK(moving == (mask.at(y, x) > 0.5f));
      }
  }
}

TEST_CASE("pixel values stay in [0,1] after noise clamping") {
  SceneSpec spec = default_scene();
  spec.noise_ir = 0.2;
  spec.noise_vis = 0.2;
  SceneData data = generate(spec);
  for (const auto& frame : {data.ir[0], data.vis[0], data.ir.back(), data.vis.back()})
    for (Index i = 0; i < frame.numel(); ++i) {
      CHECK(frame.at(i) >= 0.0f);
      CHECK(frame.at(i) <= 1.0f);
    }
}

TEST_CASE("oversized object is rejected") {
  SceneSpec spec = single_rect(200, 0, 0);
  CHECK_THROWS_AS(generate(spec), ValueError);
}

TEST_CASE("estimator recovers the ground-truth velocity inside the footprint") {
  SceneSpec spec = single_rect(40, 2, 0);
  spec.height = 128;
  spec.width = 128;
  SceneData data = generate(spec);
  FlowCfg cfg;
  cfg.block = 4;
  cfg.downscale = 2;
  Tensor<float> flow = estimate_flow(data.vis[0], data.vis[1], cfg);
  std::vector<float> dx, dy;
  for (Index y = 0; y < 128; ++y)
    for (Index x = 0; x < 128; ++x)
      if (data.gt_mask[0].at(y, x) > 0.5f) {
        dx.push_back(flow.at(y, x, 0));
        dy.push_back(flow.at(y, x, 1));
      }
  std::sort(dx.begin(), dx.end());
  std::sort(dy.begin(), dy.end());
  CHECK(std::abs(dx[dx.size() / 2] - 2.0f) <= 0.5f);
  CHECK(std::abs(dy[dy.size() / 2]) <= 0.5f);
}
