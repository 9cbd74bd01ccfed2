#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mav/metrics.hpp"
#include "mav/synth.hpp"

using namespace mav;
namespace fs = std::filesystem;

namespace {

// Literal step-by-step edge-preservation metric, independent of the library
// path: Sobel via explicit kernels, min/max strength ratio, folded
// orientation agreement, source-strength weighting.
double qabf_reference(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& f) {
  const Index h = a.extent(0), w = a.extent(1);
  const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  auto grads = [&](const Tensor<float>& img, std::vector<double>& mag, std::vector<double>& ang) {
    mag.assign(h * w, 0);
    ang.assign(h * w, 0);
    for (Index y = 1; y + 1 < h; ++y)
      for (Index x = 1; x + 1 < w; ++x) {
        double gx = 0, gy = 0;
        for (int u = -1; u <= 1; ++u)
          for (int v = -1; v <= 1; ++v) {
            const double px = img.at(y + u, x + v);
            gx += kx[u + 1][v + 1] * px;
            gy += ky[u + 1][v + 1] * px;
          }
        mag[y * w + x] = std::sqrt(gx * gx + gy * gy);
        double al = std::atan2(gy, gx);
        if (al > M_PI / 2) al -= M_PI;
        if (al <= -M_PI / 2) al += M_PI;
        ang[y * w + x] = al;
      }
  };
  std::vector<double> ma, aa, mb, ab, mf, af;
  grads(a, ma, aa);
  grads(b, mb, ab);
  grads(f, mf, af);
  auto q = [&](double gs, double as, double gf2, double af2) {
    const double g = (gs == 0 && gf2 == 0) ? 1.0 : std::min(gs, gf2) / std::max(gs, gf2);
    double da = std::abs(as - af2);
    da = std::min(da, M_PI - da);
    return g * (1.0 - da / (M_PI / 2));
  };
  double num = 0, den = 0;
  for (Index i = 0; i < h * w; ++i) {
    num += q(ma[i], aa[i], mf[i], af[i]) * ma[i] + q(mb[i], ab[i], mf[i], af[i]) * mb[i];
    den += ma[i] + mb[i];
  }
  return den == 0 ? 0.0 : num / den;
}

// Literal windowed saliency-weighted SSIM combination.
double piella_reference(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& f) {
  const Index h = a.extent(0), w = a.extent(1), win = 7;
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  Index count = 0;
  for (Index y = 0; y + win <= h; ++y)
    for (Index x = 0; x + win <= w; ++x) {
      auto stats = [&](const Tensor<float>& p, const Tensor<float>& q, double& mp, double& mq,
                       double& vp, double& vq, double& cov) {
        mp = mq = vp = vq = cov = 0;
        for (Index u = 0; u < win; ++u)
          for (Index v = 0; v < win; ++v) {
            mp += p.at(y + u, x + v);
            mq += q.at(y + u, x + v);
          }
        mp /= win * win;
        mq /= win * win;
        for (Index u = 0; u < win; ++u)
          for (Index v = 0; v < win; ++v) {
            const double dp = p.at(y + u, x + v) - mp, dq = q.at(y + u, x + v) - mq;
            vp += dp * dp;
            vq += dq * dq;
            cov += dp * dq;
          }
        vp /= win * win;
        vq /= win * win;
        cov /= win * win;
      };
      double maf, mff, vaf, vff, caf;
      stats(a, f, maf, mff, vaf, vff, caf);
      double mbf, mff2, vbf, vff2, cbf;
      stats(b, f, mbf, mff2, vbf, vff2, cbf);
      const double ssim_af =
          ((2 * maf * mff + c1) * (2 * caf + c2)) / ((maf * maf + mff * mff + c1) * (vaf + vff + c2));
      const double ssim_bf = ((2 * mbf * mff2 + c1) * (2 * cbf + c2)) /
                             ((mbf * mbf + mff2 * mff2 + c1) * (vbf + vff2 + c2));
      const double lam = (vaf + vbf) == 0 ? 0.5 : vaf / (vaf + vbf);
      total += lam * ssim_af + (1 - lam) * ssim_bf;
      ++count;
    }
  return std::clamp(total / count, 0.0, 1.0);
}

Tensor<float> textured(Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<float> n = mav::detail::value_noise(h, w, 3, rng);
  Tensor<float> out(Shape{h, w});
  for (Index i = 0; i < out.numel(); ++i) out.data()[i] = 0.5f + 0.3f * n.at(i);
  return out;
}

}  // namespace

TEST_CASE("qabf: identical non-constant triple scores 1, constant fused scores ~0") {
  Tensor<float> img = textured(16, 16, 1);
  CHECK(qabf(img, img, img) == doctest::Approx(1.0).epsilon(1e-6));

  Tensor<float> flat(Shape{16, 16}, 0.5f);
  CHECK(qabf(img, textured(16, 16, 2), flat) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("qabf matches the reference formula on small random cases") {
  for (std::uint64_t seed = 3; seed < 8; ++seed) {
    Tensor<float> a = textured(8, 8, seed);
    Tensor<float> b = textured(8, 8, seed + 100);
    Tensor<float> f = textured(8, 8, seed + 200);
    CHECK(qabf(a, b, f) == doctest::Approx(qabf_reference(a, b, f)).epsilon(1e-9));
    CHECK(qabf(a, b, f) >= 0.0);
    CHECK(qabf(a, b, f) <= 1.0 + 1e-6);
  }
}

TEST_CASE("piella_qs: identity, source symmetry, reference formula") {
  Tensor<float> img = textured(16, 16, 9);
  CHECK(piella_qs(img, img, img) == doctest::Approx(1.0).epsilon(1e-6));

  Tensor<float> a = textured(12, 12, 10);
  Tensor<float> b = textured(12, 12, 11);
  Tensor<float> f = textured(12, 12, 12);
  CHECK(piella_qs(a, b, f) == doctest::Approx(piella_qs(b, a, f)).epsilon(1e-12));
  CHECK(piella_qs(a, b, f) == doctest::Approx(piella_reference(a, b, f)).epsilon(1e-9));
  CHECK(piella_qs(a, b, f) >= 0.0);
  CHECK(piella_qs(a, b, f) <= 1.0 + 1e-6);
}

TEST_CASE("ms2r: static sequences score 0 by the 0/0 convention") {
  Tensor<float> frame = textured(64, 64, 13);
  std::vector<Tensor<float>> seq(4, frame);
  CHECK(ms2r_proxy(seq, seq, seq) == doctest::Approx(0.0));
  CHECK_THROWS_AS(ms2r_proxy({frame}, {frame}, {frame}), ValueError);
}

TEST_CASE("ms2r: fused equal to one reference lands near 1 on symmetric content") {
  SceneSpec spec = default_scene();
  spec.frames = 6;
  SceneData data = generate(spec);
  const double score = ms2r_proxy(data.vis, data.ir, data.vis);
  CHECK(score > 0.0);
  CHECK(score < 2.5);  // same order as the references' own smoothness
}

TEST_CASE("ms2r strictly increases under injected flicker") {
  SceneSpec spec = default_scene();
  spec.frames = 6;
  SceneData data = generate(spec);
  std::vector<double> scores;
  for (double c : {0.0, 0.05, 0.1}) {
    std::vector<Tensor<float>> flickered;
    for (std::size_t t = 0; t < data.vis.size(); ++t) {
      const float off = static_cast<float>((t % 2 == 0 ? c : -c));
      Tensor<float> frame = add_scalar(data.vis[t], off);
      for (Index i = 0; i < frame.numel(); ++i)
        frame.data()[i] = std::clamp(frame.data()[i], 0.0f, 1.0f);
      flickered.push_back(frame);
    }
    scores.push_back(ms2r_proxy(flickered, data.ir, data.vis));
  }
  CHECK(scores[1] > scores[0]);
  CHECK(scores[2] > scores[1]);
}

TEST_CASE("metrics are stable under a small constant intensity offset") {
  Tensor<float> a = textured(24, 24, 20);
  Tensor<float> b = textured(24, 24, 21);
  Tensor<float> f = textured(24, 24, 22);
  auto shift = [](const Tensor<float>& img, float c) {
    Tensor<float> out = add_scalar(img, c);
    return out;
  };
  const float c = 0.1f;
  CHECK(std::abs(qabf(shift(a, c), shift(b, c), shift(f, c)) - qabf(a, b, f)) < 2e-2);
  CHECK(std::abs(piella_qs(shift(a, c), shift(b, c), shift(f, c)) - piella_qs(a, b, f)) < 2e-2);
}

TEST_CASE("report: identical 2-frame sequences give qabf 1.000000 and exact CSV round trip") {
  Tensor<float> frame = textured(32, 32, 30);
  std::vector<Tensor<float>> seq{frame, frame};
  MetricReport report = evaluate_metrics(seq, seq, seq);
  const MetricSeries* q = report.find("qabf");
  REQUIRE(q != nullptr);
  for (double v : q->values) CHECK(csv_value(v) == "1.000000");
  CHECK(q->mean() == doctest::Approx(1.0).epsilon(1e-9));

  const fs::path dir = fs::temp_directory_path() / "mav_metrics_test";
  fs::create_directories(dir);
  const std::string path = (dir / "report.csv").string();
  write_metric_csv(path, report);
  write_metric_csv((dir / "report2.csv").string(), report);
  std::ifstream f1(path, std::ios::binary), f2((dir / "report2.csv").string(), std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(s1.find("frame,metric,value\n") == 0);
  CHECK(s1.find("0,qabf,1.000000") != std::string::npos);
  CHECK(s1.find("mean,qabf,1.000000") != std::string::npos);

  // Re-reading the CSV reproduces the printed values exactly.
  std::istringstream in(s1);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto c1p = line.find(','), c2p = line.rfind(',');
    const std::string frame_s = line.substr(0, c1p);
    const std::string metric = line.substr(c1p + 1, c2p - c1p - 1);
    const std::string value = line.substr(c2p + 1);
    if (frame_s == "mean") {
      CHECK(value == csv_value(report.find(metric)->mean()));
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("report rejects mismatched sequences") {
  Tensor<float> frame = textured(16, 16, 31);
  std::vector<Tensor<float>> two{frame, frame}, three{frame, frame, frame};
  CHECK_THROWS_AS(evaluate_metrics(two, three, two), ShapeError);
}
