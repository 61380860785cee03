#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "neuroextract/core/stats.hpp"
#include "neuroextract/prequal/prequal.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace neuroextract;
using namespace neuroextract::prequal;
using volgrid::Geometry;

TEST_CASE("otsu equals exhaustive threshold search on 1000 random histograms") {
  std::mt19937_64 rng(2024);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int levels = 2 + static_cast<int>(rng() % 40);
    const int range = 1 + static_cast<int>(rng() % 1000);
    const int bins = (trial % 3 == 0) ? 256 : 2 + static_cast<int>(rng() % 64);
    std::vector<float> values;
    for (int l = 0; l < levels; ++l) {
      const int value = static_cast<int>(rng() % (range + 1));
      const int count = 1 + static_cast<int>(rng() % 50);
      values.insert(values.end(), count, static_cast<float>(value));
    }
    if (*std::max_element(values.begin(), values.end()) == *std::min_element(values.begin(), values.end()))
      values.push_back(values.front() + 1.0f);
    std::shuffle(values.begin(), values.end(), rng);
    if (otsu_threshold(values, bins) != oracle::otsu_oracle(values, bins)) ++mismatches;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("otsu separates two clusters and rejects degenerate input") {
  std::vector<float> v(100, 1.0f);
  v.insert(v.end(), 100, 9.0f);
  const double t = otsu_threshold(v);
  CHECK(t >= 1.0);
  CHECK(t < 9.0);
  CHECK_THROWS_AS(otsu_threshold(std::vector<float>(5, 2.0f)), Error);
  CHECK_THROWS_AS(otsu_threshold(std::vector<float>{}), Error);
  CHECK_THROWS_AS(otsu_threshold(v, 1), Error);
}

TEST_CASE("qa metrics follow their population-statistic definitions") {
  const Geometry g = testutil::grid(10, 10, 10);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> bg(5.0, 2.0), fg(100.0, 7.0);
  volgrid::Volume v(g);
  const auto inner = testutil::ellipsoid(g, 3.5, 3.5, 3.5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(inner[i] ? fg(rng) : bg(rng));
  const QAReport r = qa_metrics(v);

  const volgrid::Mask f = foreground_mask(v);
  double sf = 0, sb = 0, nf = 0, nb = 0;
  for (std::size_t i = 0; i < v.size(); ++i) (f[i] ? sf : sb) += v[i], (f[i] ? nf : nb) += 1;
  const double mf = sf / nf, mb = sb / nb;
  double vf = 0, vb = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = v[i] - (f[i] ? mf : mb);
    (f[i] ? vf : vb) += d * d;
  }
  vf /= nf;
  vb /= nb;
  CHECK(r.foreground_voxels == static_cast<std::size_t>(nf));
  CHECK(r.snr == doctest::Approx(mf / std::sqrt(vb)).epsilon(1e-9));
  CHECK(r.cnr == doctest::Approx((mf - mb) / std::sqrt(vb)).epsilon(1e-9));
  CHECK(r.svnr == doctest::Approx(vf / vb).epsilon(1e-9));

  const auto j = to_json(r);
  const QAReport back = qa_report_from_json(j);
  CHECK(back.snr == r.snr);
  CHECK(back.svnr == r.svnr);
}

TEST_CASE("qa on a noiseless background is infinite and serializes as inf") {
  const Geometry g = testutil::grid(8, 8, 8);
  volgrid::Volume v(g, 0.0f);
  const auto inner = testutil::ellipsoid(g, 2.5, 2.5, 2.5);
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (inner[i]) v[i] = 50.0f + static_cast<float>(rng() % 10);
  const QAReport r = qa_metrics(v);
  CHECK(std::isinf(r.snr));
  const auto j = to_json(r);
  CHECK(j["snr"] == "inf");
  CHECK(std::isinf(qa_report_from_json(j).snr));
}

TEST_CASE("qa snr drops as noise grows") {
  const Geometry g = testutil::grid(16, 16, 16);
  const auto inner = testutil::ellipsoid(g, 6, 6, 6);
  double previous = INFINITY;
  for (const double sigma : {1.0, 2.0, 4.0, 8.0}) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, sigma);
    volgrid::Volume v(g);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((inner[i] ? 100.0 : 10.0) + n(rng));
    const double snr = qa_metrics(v).snr;
    CHECK(snr < previous);
    previous = snr;
  }
}

TEST_CASE("noise map matches a brute-force MAD at sampled voxels") {
  const Geometry g = testutil::grid(9, 8, 7);
  std::mt19937_64 rng(12);
  const volgrid::Volume v = testutil::random_volume(g, rng, 0.0, 10.0);
  const int radius = 2;
  const NoiseMap nm = estimate_noise_map(v, radius);
  const auto& d = g.dims;
  auto residual = [&](int x, int y, int z) {
    double s = 0;
    int n = 0;
    const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (const auto& o : off) {
      const int X = x + o[0], Y = y + o[1], Z = z + o[2];
      if (X < 0 || Y < 0 || Z < 0 || X >= d[0] || Y >= d[1] || Z >= d[2]) continue;
      s += v.at(X, Y, Z);
      ++n;
    }
    return std::sqrt(n / (n + 1.0)) * (v.at(x, y, z) - s / n);
  };
  for (const auto& p : std::vector<std::array<int, 3>>{{4, 4, 3}, {0, 0, 0}, {8, 7, 6}, {2, 5, 1}}) {
    std::vector<float> abs_r;
    for (int z = std::max(0, p[2] - radius); z <= std::min(d[2] - 1, p[2] + radius); ++z)
      for (int y = std::max(0, p[1] - radius); y <= std::min(d[1] - 1, p[1] + radius); ++y)
        for (int x = std::max(0, p[0] - radius); x <= std::min(d[0] - 1, p[0] + radius); ++x)
          abs_r.push_back(static_cast<float>(std::abs(residual(x, y, z))));
    const double expected = 1.4826 * percentile(abs_r, 50.0);
    CHECK(nm.sigma.at(p[0], p[1], p[2]) == doctest::Approx(expected).epsilon(1e-5));
  }
}

TEST_CASE("adaptive NLM fixes constants, keeps distinct patches at zero noise, and reduces noise") {
  const Geometry g = testutil::grid(10, 10, 10);
  const volgrid::Volume c(g, 4.0f);
  const volgrid::Volume dc = denoise_nlm_adaptive(c, estimate_noise_map(c));
  for (std::size_t i = 0; i < dc.size(); ++i) CHECK(dc[i] == doctest::Approx(4.0f));

  std::mt19937_64 rng(5);
  const volgrid::Volume r = testutil::random_volume(g, rng);
  NoiseMap zero{volgrid::Volume(g, 0.0f)};
  const volgrid::Volume dr = denoise_nlm_adaptive(r, zero);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(dr[i] == r[i]);

  std::normal_distribution<double> n(0.0, 1.0);
  volgrid::Volume noisy(g);
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] = static_cast<float>(10.0 + n(rng));
  const volgrid::Volume dn = denoise_nlm_adaptive(noisy, estimate_noise_map(noisy), NlmParams{1, 2, 1.0});
  double e0 = 0, e1 = 0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    e0 += (noisy[i] - 10.0) * (noisy[i] - 10.0);
    e1 += (dn[i] - 10.0) * (dn[i] - 10.0);
  }
  CHECK(e1 < 0.5 * e0);
}
