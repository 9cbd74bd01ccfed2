#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mav/mdim.hpp"
#include "oracles.hpp"

using namespace mav;

namespace {

AttentionProj<double> make_proj(Index d, std::mt19937_64& rng) {
  return {uniform<double>(Shape{d, d}, rng, -0.5, 0.5), uniform<double>(Shape{d, d}, rng, -0.5, 0.5),
          uniform<double>(Shape{d, d}, rng, -0.5, 0.5)};
}

}  // namespace

TEST_CASE("saliency_scores: zero mask, one active patch, block-mean oracle") {
  Tensor<double> zero(Shape{8, 8});
  Tensor<double> s0 = saliency_scores(zero, 4);
  for (Index i = 0; i < s0.numel(); ++i) CHECK(s0.at(i) == 0.0);

  Tensor<double> one(Shape{8, 8});
  for (Index y = 4; y < 8; ++y)
    for (Index x = 0; x < 4; ++x) one.data()[y * 8 + x] = 1.0;
  Tensor<double> s1 = saliency_scores(one, 4);
  CHECK(s1.at(2) == 1.0);  // patch (1,0) in a 2x2 grid
  CHECK(s1.at(0) == 0.0);
  CHECK(s1.at(1) == 0.0);
  CHECK(s1.at(3) == 0.0);

  std::mt19937_64 rng(1);
  Tensor<double> m = uniform<double>(Shape{12, 8}, rng, 0, 1);
  Tensor<double> s = saliency_scores(m, 4);
  Tensor<double> ref = oracle::avg_pool_ref(m, 4);
  for (Index i = 0; i < s.numel(); ++i) CHECK(s.at(i) == doctest::Approx(ref.at(i)).epsilon(1e-12));
}

TEST_CASE("topk_select: examples, ties, parameter checks") {
  Tensor<double> s(Shape{4}, {0.9, 0.1, 0.5, 0.0});
  SalientSet<double> sel = topk_select(s, 0.5, 256);
  REQUIRE(sel.omega.size() == 2);
  CHECK(sel.omega[0] == 0);
  CHECK(sel.omega[1] == 2);
  CHECK(sel.weights[0] == 0.9);
  CHECK(sel.weights[1] == 0.5);

  Tensor<double> eq(Shape{4}, {0.3, 0.3, 0.3, 0.3});
  SalientSet<double> tie = topk_select(eq, 0.5, 256);
  CHECK(tie.omega == std::vector<Index>{0, 1});

  // Floor and cap.
  Tensor<double> tiny(Shape{10}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(topk_select(tiny, 0.01, 256).omega.size() == 1);
  CHECK(topk_select(tiny, 1.0, 3).omega.size() == 3);
  CHECK_THROWS_AS(topk_select(tiny, 0.0, 256), ValueError);
  CHECK_THROWS_AS(topk_select(tiny, 1.5, 256), ValueError);
  CHECK_THROWS_AS(topk_select(tiny, 0.5, 0), ValueError);
}

TEST_CASE("topk_select matches the full-sort oracle on random inputs") {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor<double> s = uniform<double>(Shape{64}, rng, 0, 1);
    if (rep % 3 == 0) {  // inject ties
      for (Index i = 0; i < 64; i += 2) s.data()[i] = 0.5;
    }
    SalientSet<double> sel = topk_select(s, 0.25, 256);
    auto ref = oracle::topk_ref(s, 16);
    CHECK(sel.omega == ref);
    for (std::size_t i = 0; i < sel.omega.size(); ++i) CHECK(sel.weights[i] == s.at(sel.omega[i]));
  }
}

TEST_CASE("SalientSet invariant: every kept score >= every dropped score") {
  std::mt19937_64 rng(3);
  Tensor<double> s = uniform<double>(Shape{40}, rng, 0, 1);
  SalientSet<double> sel = topk_select(s, 0.3, 256);
  double kept_min = 1e9;
  for (double v : sel.weights) kept_min = std::min(kept_min, v);
  for (Index i = 0; i < 40; ++i) {
    if (std::find(sel.omega.begin(), sel.omega.end(), i) == sel.omega.end())
      CHECK(s.at(i) <= kept_min);
  }
}

TEST_CASE("global_token: identical, opposite, mean oracle") {
  Tensor<double> same(Shape{4, 3});
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 3; ++j) same.data()[i * 3 + j] = 2.5 - j;
  Tensor<double> t1 = global_token(same);
  CHECK(t1.at(0) == 2.5);
  CHECK(t1.at(2) == 0.5);

  Tensor<double> pair(Shape{2, 3}, {1, -2, 3, -1, 2, -3});
  Tensor<double> t2 = global_token(pair);
  for (Index j = 0; j < 3; ++j) CHECK(t2.at(j) == 0.0);

  std::mt19937_64 rng(4);
  Tensor<double> r = uniform<double>(Shape{6, 5}, rng, -1, 1);
  Tensor<double> t3 = global_token(r);
  for (Index j = 0; j < 5; ++j) {
    double acc = 0;
    for (Index i = 0; i < 6; ++i) acc += r.at(i, j);
    CHECK(t3.at(j) == doctest::Approx(acc / 6).epsilon(1e-12));
  }
}

TEST_CASE("sparse_attention: single-key degeneracy in global_token_only mode") {
  std::mt19937_64 rng(5);
  const Index n = 6, d = 4, k = 3;
  Tensor<double> tokens = uniform<double>(Shape{n, d}, rng, -1, 1);
  AttentionProj<double> proj = make_proj(d, rng);
  Tensor<double> t_global = global_token(tokens);
  Tensor<double> kv = build_kv(tokens, t_global, KvMode::global_token_only);
  Tensor<double> x_sel = gather_rows(tokens, {0, 2, 4});
  Tensor<double> out = sparse_attention(x_sel, kv, proj);
  Tensor<double> vref = matmul(kv, proj.wv);  // 1 x d
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < d; ++j) CHECK(out.at(i, j) == doctest::Approx(vref.at(0, j)).epsilon(1e-12));
}

TEST_CASE("sparse_attention: identical keys give uniform attention") {
  std::mt19937_64 rng(6);
  const Index n = 5, d = 3;
  Tensor<double> kv(Shape{n, d});
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) kv.data()[i * d + j] = 0.3 * (j + 1);
  AttentionProj<double> proj = make_proj(d, rng);
  Tensor<double> queries = uniform<double>(Shape{2, d}, rng, -1, 1);
  Tensor<double> out = sparse_attention(queries, kv, proj);
  Tensor<double> v = matmul(kv, proj.wv);
  for (Index j = 0; j < d; ++j) {
    double mean = 0;
    for (Index i = 0; i < n; ++i) mean += v.at(i, j);
    mean /= n;
    CHECK(out.at(0, j) == doctest::Approx(mean).epsilon(1e-9));
    CHECK(out.at(1, j) == doctest::Approx(mean).epsilon(1e-9));
  }
}

TEST_CASE("sparse_attention equals dense attention row-restricted to omega") {
  std::mt19937_64 rng(7);
  const Index n = 8, d = 4;
  Tensor<double> tokens = uniform<double>(Shape{n, d}, rng, -1, 1);
  AttentionProj<double> proj = make_proj(d, rng);
  Tensor<double> t_global = global_token(tokens);
  Tensor<double> kv = build_kv(tokens, t_global, KvMode::all_patches);
  const std::vector<Index> omega{1, 4, 6};
  Tensor<double> x_sel = gather_rows(tokens, omega);
  Tensor<double> got = sparse_attention(x_sel, kv, proj);
  Tensor<double> dense = oracle::dense_attention_ref(tokens, kv, proj.wq, proj.wk, proj.wv);
  for (std::size_t r = 0; r < omega.size(); ++r)
    for (Index j = 0; j < d; ++j)
      CHECK(got.at(static_cast<Index>(r), j) == doctest::Approx(dense.at(omega[r], j)).epsilon(1e-9));

  AttentionProj<double> bad = make_proj(d + 1, rng);
  CHECK_THROWS_AS(sparse_attention(x_sel, kv, bad), ShapeError);
}

TEST_CASE("static_branch: zero weights are the identity; composition oracle") {
  std::mt19937_64 rng(8);
  const Index c = 3, h = 6, w = 6;
  Tensor<double> x = uniform<double>(Shape{c, h, w}, rng, -1, 1);
  StaticWeights<double> zero{Tensor<double>(Shape{c, 3, 3}), Tensor<double>(Shape{c, c}),
                             Tensor<double>(Shape{c, c, 3, 3}), Tensor<double>(Shape{c})};
  Tensor<double> same = static_branch(x, zero);
  CHECK(same.shape() == x.shape());
  for (Index i = 0; i < x.numel(); ++i) CHECK(same.at(i) == x.at(i));

  StaticWeights<double> wts{uniform<double>(Shape{c, 3, 3}, rng, -0.5, 0.5),
                            uniform<double>(Shape{c, c}, rng, -0.5, 0.5),
                            uniform<double>(Shape{c, c, 3, 3}, rng, -0.5, 0.5),
                            uniform<double>(Shape{c}, rng, -0.5, 0.5)};
  Tensor<double> got = static_branch(x, wts);
  Tensor<double> mid = oracle::depthwise_separable_ref(x, wts.dw_w, wts.pw_w);
  Tensor<double> act = leaky_relu(mid);
  Tensor<double> ref = add(x, oracle::conv2d_ref(act, wts.conv_w, &wts.conv_b));
  for (Index i = 0; i < got.numel(); ++i) CHECK(got.at(i) == doctest::Approx(ref.at(i)).epsilon(1e-9));
}

TEST_CASE("reconstruct: gate-off identity, scatter/gather round trip, delta placement") {
  std::mt19937_64 rng(9);
  const Index c = 2, h = 8, w = 8, p = 4;
  PatchGrid grid = PatchGrid::over(h, w, p);
  const Index d = c * p * p;
  Tensor<double> f_static = uniform<double>(Shape{c, h, w}, rng, -1, 1);
  Tensor<double> f_attn = uniform<double>(Shape{2, d}, rng, -1, 1);
  Tensor<double> smooth = uniform<double>(Shape{c, c, 3, 3}, rng, -0.5, 0.5);
  const std::vector<Index> omega{1, 2};
  const std::vector<double> weights{0.7, 0.4};

  Tensor<double> m0(Shape{h, w});
  Tensor<double> y0 = reconstruct(f_static, f_attn, weights, omega, m0, smooth, p);
  for (Index i = 0; i < y0.numel(); ++i) CHECK(y0.at(i) == f_static.at(i));

  // Round trip: gathering the scattered tokens returns them unchanged.
  Tensor<double> scattered = scatter_tokens(f_attn, omega, grid, c);
  Tensor<double> back = gather_rows(patch_tokens(scattered, p), omega);
  for (Index i = 0; i < back.numel(); ++i) CHECK(back.at(i) == f_attn.at(i));

  // Single patch, unit weight, full mask, centered-delta smoothing kernel.
  Tensor<double> delta(Shape{c, c, 3, 3});
  for (Index ci = 0; ci < c; ++ci) delta.data()[((ci * c + ci) * 3 + 1) * 3 + 1] = 1.0;
  Tensor<double> one_token = gather_rows(f_attn, {0});
  Tensor<double> m1(Shape{h, w}, 1.0);
  Tensor<double> y1 = reconstruct(f_static, one_token, {1.0}, {3}, m1, delta, p);
  Tensor<double> placed = scatter_tokens(one_token, {3}, grid, c);
  for (Index i = 0; i < y1.numel(); ++i)
    CHECK(y1.at(i) == doctest::Approx(f_static.at(i) + placed.at(i)).epsilon(1e-12));

  CHECK_THROWS_AS(reconstruct(f_static, one_token, {1.0}, {99}, m1, delta, p), ValueError);
}

TEST_CASE("reconstruct is Lipschitz in the mask") {
  std::mt19937_64 rng(10);
  const Index c = 2, h = 8, w = 8, p = 4;
  Tensor<double> f_static = uniform<double>(Shape{c, h, w}, rng, -1, 1);
  Tensor<double> f_attn = uniform<double>(Shape{2, c * p * p}, rng, -1, 1);
  Tensor<double> smooth = uniform<double>(Shape{c, c, 3, 3}, rng, -0.5, 0.5);
  const std::vector<Index> omega{0, 3};
  const std::vector<double> weights{1.0, 1.0};
  Tensor<double> m = uniform<double>(Shape{h, w}, rng, 0, 1);
  const double eps = 1e-3;
  Tensor<double> m2 = add_scalar(m, eps);
  Tensor<double> y1 = reconstruct(f_static, f_attn, weights, omega, m, smooth, p);
  Tensor<double> y2 = reconstruct(f_static, f_attn, weights, omega, m2, smooth, p);
  double smooth_l1 = 0;
  for (Index i = 0; i < smooth.numel(); ++i) smooth_l1 += std::abs(smooth.at(i));
  double max_r = 0;
  Tensor<double> scattered = scatter_tokens(scale_rows(f_attn, Tensor<double>(Shape{2}, {1.0, 1.0})),
                                            omega, PatchGrid::over(h, w, p), c);
  for (Index i = 0; i < scattered.numel(); ++i) max_r = std::max(max_r, std::abs(scattered.at(i)));
  for (Index i = 0; i < y1.numel(); ++i)
    CHECK(std::abs(y2.at(i) - y1.at(i)) <= eps * smooth_l1 * max_r + 1e-12);
}

TEST_CASE("attention_flops: arithmetic examples and boundary") {
  CHECK(2ull * 100 * 100 * 16 == 320000ull);
  const std::uint64_t sparse_term = 2ull * 10 * 100 * 16;
  CHECK(sparse_term == 32000ull);
  CHECK(attention_flops(100, 10, 16, KvMode::all_patches) ==
        sparse_term + (10 + 200) * 16 * 16);
  // k = N makes the interaction term equal the dense score+apply term.
  CHECK(attention_flops(64, 64, 8, KvMode::all_patches) - (64 + 128) * 64 ==
        2ull * 64 * 64 * 8);
  CHECK(attention_flops(50, 5, 8, KvMode::global_token_only) == 2ull * 5 * 8 + 7ull * 64);
}

TEST_CASE("instrumented counter equals the analytic formula on random sizes") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const Index n = 2 + static_cast<Index>(rng() % 40);
    const Index k = 1 + static_cast<Index>(rng() % n);
    const Index d = 2 + static_cast<Index>(rng() % 12);
    const KvMode mode = rep % 4 == 0 ? KvMode::global_token_only : KvMode::all_patches;
    Tensor<double> tokens = uniform<double>(Shape{n, d}, rng, -1, 1);
    AttentionProj<double> proj = make_proj(d, rng);
    Tensor<double> t_global = global_token(tokens);
    Tensor<double> kv = build_kv(tokens, t_global, mode);
    std::vector<Index> omega(k);
    std::iota(omega.begin(), omega.end(), Index(0));
    Tensor<double> x_sel = gather_rows(tokens, omega);
    opcount::reset();
    sparse_attention(x_sel, kv, proj);
    CHECK(opcount::read() == attention_flops(n, k, d, mode));
  }
  opcount::reset();
}

TEST_CASE("measured multiply-adds grow linearly in N at fixed k") {
  std::mt19937_64 rng(12);
  const Index k = 8, d = 16;
  std::vector<double> ns, counts;
  for (Index n : {64, 128, 256, 512}) {
    Tensor<double> tokens = uniform<double>(Shape{n, d}, rng, -1, 1);
    AttentionProj<double> proj = make_proj(d, rng);
    Tensor<double> kv = build_kv(tokens, global_token(tokens), KvMode::all_patches);
    std::vector<Index> omega(k);
    std::iota(omega.begin(), omega.end(), Index(0));
    opcount::reset();
    sparse_attention(gather_rows(tokens, omega), kv, proj);
    ns.push_back(static_cast<double>(n));
    counts.push_back(static_cast<double>(opcount::read()));
  }
  opcount::reset();
  // Least-squares slope vs the analytic slope 2kd + 2d^2.
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    mx += ns[i];
    my += counts[i];
  }
  mx /= ns.size();
  my /= ns.size();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    num += (ns[i] - mx) * (counts[i] - my);
    den += (ns[i] - mx) * (ns[i] - mx);
  }
  const double slope = num / den;
  const double analytic = 2.0 * k * d + 2.0 * d * d;
  CHECK(std::abs(slope - analytic) / analytic < 0.05);
}

TEST_CASE("selection is invariant to uniform positive scaling of the saliency") {
  std::mt19937_64 rng(13);
  Tensor<double> s = uniform<double>(Shape{32}, rng, 0, 1);
  SalientSet<double> a = topk_select(s, 0.25, 256);
  SalientSet<double> b = topk_select(scale(s, 3.7), 0.25, 256);
  CHECK(a.omega == b.omega);
}

TEST_CASE("tau=1 with a large cap processes all patches") {
  std::mt19937_64 rng(14);
  Tensor<double> s = uniform<double>(Shape{16}, rng, 0, 1);
  SalientSet<double> sel = topk_select(s, 1.0, 1000);
  CHECK(sel.omega.size() == 16);
}
