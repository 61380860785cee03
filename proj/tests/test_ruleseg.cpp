#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <tuple>

#include "neuroextract/ruleseg/ruleseg.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace neuroextract;
using namespace neuroextract::ruleseg;
using volgrid::Geometry;

namespace {

std::vector<std::array<int, 3>> ball(int r) {
  std::vector<std::array<int, 3>> o;
  for (int z = -r; z <= r; ++z)
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x)
        if (x * x + y * y + z * z <= r * r) o.push_back({x, y, z});
  return o;
}

Mask brute_erode(const Mask& m, int r) {
  Mask out(m.geometry());
  const auto& d = m.dims();
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        bool all = true;
        for (const auto& o : ball(r)) {
          const int X = x + o[0], Y = y + o[1], Z = z + o[2];
          if (X < 0 || Y < 0 || Z < 0 || X >= d[0] || Y >= d[1] || Z >= d[2]) continue;
          all = all && m.at(X, Y, Z);
        }
        out.at(x, y, z) = all ? 1 : 0;
      }
  return out;
}

Mask brute_dilate(const Mask& m, int r) {
  Mask out(m.geometry());
  const auto& d = m.dims();
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        bool any = false;
        for (const auto& o : ball(r)) {
          const int X = x + o[0], Y = y + o[1], Z = z + o[2];
          if (X < 0 || Y < 0 || Z < 0 || X >= d[0] || Y >= d[1] || Z >= d[2]) continue;
          any = any || m.at(X, Y, Z);
        }
        out.at(x, y, z) = any ? 1 : 0;
      }
  return out;
}

}  // namespace

TEST_CASE("graph segmentation equals the reference algorithm on 20 random 16^3 volumes") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const Geometry g = testutil::grid(16, 16, 16);
    Volume v(g);
    // Quantized intensities produce many equal-weight edges, exercising the tie order.
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng() % (trial % 2 ? 8 : 1000)) / 10.0f;
    const double k = 0.5 + static_cast<double>(rng() % 400) / 10.0;
    const int min_size = 1 + static_cast<int>(rng() % 30);
    std::optional<Mask> region;
    if (trial % 4 == 3) region = testutil::ellipsoid(g, 7, 6, 5);
    const Mask* rp = region ? &*region : nullptr;
    const SegmentLabels got = felzenszwalb_segment(v, k, min_size, rp);
    CHECK(oracle::same_partition(got.labels, oracle::reference_segmentation(v, k, min_size, rp), -1));
    for (const auto s : got.sizes) CHECK(s >= static_cast<std::size_t>(std::min<std::size_t>(min_size, 1)));
  }
}

TEST_CASE("graph segmentation separates two flat regions") {
  const Geometry g = testutil::grid(8, 8, 8);
  Volume v(g);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) v.at(x, y, z) = x < 4 ? 0.0f : 10.0f;
  const auto s = felzenszwalb_segment(v, 1.0, 1);
  CHECK(s.count == 2);
  CHECK(s.mean_intensity[0] + s.mean_intensity[1] == doctest::Approx(10.0));
}

TEST_CASE("morphology matches brute-force ball erosion and dilation") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 6; ++trial) {
    const Mask m = testutil::random_mask(testutil::grid(11, 10, 9), 0.55, rng);
    const int r = 1 + trial % 2;
    CHECK(morphology(m, MorphologyOp::Open, r) == brute_dilate(brute_erode(m, r), r));
    CHECK(morphology(m, MorphologyOp::Close, r) == brute_erode(brute_dilate(m, r), r));
  }
  CHECK_THROWS_AS(morphology(Mask(testutil::grid(3, 3, 3)), MorphologyOp::Open, 0), Error);
}

TEST_CASE("hole filling closes a shell and leaves open cavities") {
  const Geometry g = testutil::grid(15, 15, 15);
  const Mask outer = testutil::ellipsoid(g, 6, 6, 6);
  const Mask inner = testutil::ellipsoid(g, 3, 3, 3);
  Mask shell(g);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) shell[i] = outer[i] && !inner[i];
  CHECK(morphology(shell, MorphologyOp::Fill, 1) == outer);
  Mask open = shell;
  for (int x = 7; x < 15; ++x) open.at(x, 7, 7) = 0;
  CHECK(morphology(open, MorphologyOp::Fill, 1) == open);
}

TEST_CASE("MRF energy is exact and never increases across sweeps") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const Volume p = testutil::random_volume(testutil::grid(9, 8, 7), rng);
    const double beta = 0.2 * trial;
    const MrfResult r = mrf_regularize(p, beta, 50);
    REQUIRE(r.energies.size() == static_cast<std::size_t>(r.sweeps) + 1);
    for (std::size_t i = 1; i < r.energies.size(); ++i) CHECK(r.energies[i] <= r.energies[i - 1]);
    CHECK(r.energies.back() == doctest::Approx(mrf_energy(p, r.mask, beta)));

    // Independent energy: unary -ln(p + 1e-6) for the chosen class, beta per
    // disagreeing 6-neighbour pair.
    double e = 0.0;
    const auto& d = p.dims();
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          const int l = r.mask.at(x, y, z);
          const double pl = l ? p.at(x, y, z) : 1.0 - p.at(x, y, z);
          e -= std::log(pl + 1e-6);
          if (x + 1 < d[0] && r.mask.at(x + 1, y, z) != l) e += beta;
          if (y + 1 < d[1] && r.mask.at(x, y + 1, z) != l) e += beta;
          if (z + 1 < d[2] && r.mask.at(x, y, z + 1) != l) e += beta;
        }
    CHECK(mrf_energy(p, r.mask, beta) == doctest::Approx(e).epsilon(1e-9));
  }
}

TEST_CASE("MRF with zero coupling is the 0.5 threshold") {
  std::mt19937_64 rng(2);
  const Volume p = testutil::random_volume(testutil::grid(6, 6, 6), rng);
  const MrfResult r = mrf_regularize(p, 0.0, 10);
  CHECK(r.mask == Mask::from_threshold(p, 0.5f));
  CHECK(r.converged);
  Volume bad = p;
  bad[0] = 1.5f;
  CHECK_THROWS_AS(mrf_regularize(bad, 1.0, 10), Error);
}

TEST_CASE("sobel returns the exact gradient of an affine field in the interior") {
  const Geometry g = Geometry::with_spacing({8, 8, 8}, {0.5, 0.25, 2.0});
  Volume v(g);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        v.at(x, y, z) = static_cast<float>(3.0 * x * 0.5 - 2.0 * y * 0.25 + 0.5 * z * 2.0);
  const Volume s = sobel_gradient_magnitude(v);
  const double expected = std::sqrt(9.0 + 4.0 + 0.25);
  for (int z = 1; z < 7; ++z)
    for (int y = 1; y < 7; ++y)
      for (int x = 1; x < 7; ++x) CHECK(s.at(x, y, z) == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("contrast normalization maps the percentiles onto [0, 1]") {
  Volume v(testutil::grid(101, 1, 1));
  for (int i = 0; i <= 100; ++i) v[i] = static_cast<float>(i);
  const Volume n = normalize_contrast(v, 10, 90);
  CHECK(n[0] == 0.0f);
  CHECK(n[10] == doctest::Approx(0.0));
  CHECK(n[50] == doctest::Approx(0.5));
  CHECK(n[90] == doctest::Approx(1.0));
  CHECK(n[100] == 1.0f);
  CHECK_THROWS_AS(normalize_contrast(Volume(testutil::grid(4, 4, 4), 1.0f), 1, 99), Error);
}

TEST_CASE("rule parameters validate and flat input fails extraction") {
  RuleParams p;
  CHECK_NOTHROW(p.validate());
  p.k_factor = 0.0;
  CHECK_THROWS_AS(p.validate(), Error);
  try {
    extract_brain_rule(Volume(testutil::grid(16, 16, 16), 2.0f));
    FAIL("expected extraction failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ExtractionFailed);
  }
}
