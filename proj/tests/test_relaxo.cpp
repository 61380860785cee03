#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "neuroextract/relaxo/relaxo.hpp"
#include "test_util.hpp"

using namespace neuroextract;
using namespace neuroextract::relaxo;

namespace {

std::vector<double> ten_echoes() {
  std::vector<double> x;
  for (int i = 0; i < 10; ++i) x.push_back(100.0 * i / 9.0);
  return x;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST_CASE("noiseless monoexponential recovery, scalar fits") {
  const std::vector<std::vector<double>> schemes = {{0, 45, 75}, ten_echoes()};
  for (const auto& x : schemes)
    for (const double t2 : {20.0, 35.0, 60.0, 150.0})
      for (const double s0 : {0.5, 1.0, 1234.0}) {
        std::vector<double> s;
        for (const double te : x) s.push_back(s0 * std::exp(-te / t2));
        const auto f = fit_monoexp(x, s);
        REQUIRE(f.has_value());
        CHECK(rel(f->rate, 1.0 / t2) < 1e-6);
        CHECK(rel(f->base, s0) < 1e-6);
      }
  const std::vector<double> b = {0, 500, 1000};
  for (const double adc : {0.3e-3, 0.8e-3, 2.5e-3}) {
    std::vector<double> s;
    for (const double bv : b) s.push_back(0.7 * std::exp(-bv * adc));
    const auto f = fit_monoexp(b, s);
    REQUIRE(f.has_value());
    CHECK(rel(f->rate, adc) < 1e-6);
    CHECK(rel(f->base, 0.7) < 1e-6);
  }
}

TEST_CASE("voxelwise fits on float volumes recover the maps") {
  const auto g = testutil::grid(4, 3, 2);
  for (const auto& x : std::vector<std::vector<double>>{{0, 45, 75}, ten_echoes(), {0, 500, 1000}}) {
    const bool dwi = x.back() > 200;
    DecaySeries s;
    s.x = x;
    std::vector<double> rate(g.voxel_count()), base(g.voxel_count());
    for (std::size_t i = 0; i < rate.size(); ++i) {
      rate[i] = dwi ? (0.4 + 0.1 * i) * 1e-3 : 1.0 / (25.0 + 3.0 * i);
      base[i] = 1.0 + 0.05 * i;
    }
    for (const double xv : x) {
      volgrid::Volume v(g);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(base[i] * std::exp(-xv * rate[i]));
      s.volumes.push_back(v);
    }
    const FitMaps m = fit_series(s);
    for (std::size_t i = 0; i < rate.size(); ++i) {
      CHECK(m.valid[i] == 1);
      // Inputs are float32, so recovery is bounded by single precision.
      CHECK(rel(m.rate[i], rate[i]) < 1e-5);
      CHECK(rel(m.base[i], base[i]) < 1e-6);
    }
  }
}

TEST_CASE("fit edge cases") {
  const std::vector<double> x = {0, 45, 75};
  SUBCASE("rising signal clamps the rate to zero") {
    const auto f = fit_monoexp(x, std::vector<double>{1.0, 2.0, 3.0});
    REQUIRE(f.has_value());
    CHECK(f->rate == 0.0);
  }
  SUBCASE("fewer than two usable samples") {
    CHECK_FALSE(fit_monoexp(x, std::vector<double>{1.0, 0.0, -1.0}).has_value());
    CHECK_FALSE(fit_monoexp(x, std::vector<double>{0.0, 0.0, 0.0}).has_value());
  }
  SUBCASE("invalid voxels are zero and flagged") {
    const auto g = testutil::grid(1, 1, 1);
    DecaySeries s{x, {volgrid::Volume(g, 0.0f), volgrid::Volume(g, 0.0f), volgrid::Volume(g, 0.0f)}};
    const FitMaps m = fit_series(s);
    CHECK(m.valid[0] == 0);
    CHECK(m.rate[0] == 0.0f);
    CHECK(m.base[0] == 0.0f);
  }
  SUBCASE("series validation") {
    const auto g = testutil::grid(2, 2, 2);
    DecaySeries bad{{0, 45}, {volgrid::Volume(g)}};
    CHECK_THROWS_AS(bad.validate(), Error);
    DecaySeries unordered{{45, 0}, {volgrid::Volume(g), volgrid::Volume(g)}};
    CHECK_THROWS_AS(unordered.validate(), Error);
    DecaySeries mixed{{0, 45}, {volgrid::Volume(g), volgrid::Volume(testutil::grid(2, 2, 3))}};
    CHECK_THROWS_AS(mixed.validate(), Error);
  }
}
