#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuroextract/phantom/phantom.hpp"
#include "neuroextract/prequal/prequal.hpp"
#include "neuroextract/relaxo/relaxo.hpp"
#include "neuroextract/volgrid/nifti.hpp"
#include "test_util.hpp"

using namespace neuroextract;
using namespace neuroextract::phantom;

namespace {

// Coarse grid with the default anatomy, for tests that only need the pipeline.
PhantomConfig coarse() {
  PhantomConfig c;
  c.dims = {48, 48, 32};
  c.spacing = {0.3, 0.3, 1.0};
  c.supersample = {1, 1, 2};
  return c;
}

SiteProfile clean(EchoScheme scheme) {
  SiteProfile s;
  s.id = "clean";
  s.noise_sigma = 0.0;
  s.echo_scheme = scheme;
  return s;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
  return r;
}

bool same(const volgrid::Volume& a, const volgrid::Volume& b) {
  return std::ranges::equal(a.data(), b.data());
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("default profiles are valid and F is the noisiest surface-coil site") {
  const auto sites = default_sites();
  REQUIRE(sites.size() == 6);
  for (const auto& s : sites) CHECK_NOTHROW(s.validate());
  const auto worst = std::max_element(sites.begin(), sites.end(),
                                      [](const auto& a, const auto& b) { return a.noise_sigma < b.noise_sigma; });
  CHECK(worst->id == "F");
  CHECK(worst->coil == Coil::Surface);
  CHECK(clean(EchoScheme::Three).echo_times_ms() == std::vector<double>{0, 45, 75});
  CHECK(clean(EchoScheme::Ten).echo_times_ms().size() == 10);
  CHECK(clean(EchoScheme::Ten).echo_times_ms().back() == doctest::Approx(100.0));
  SiteProfile bad = sites[5];
  bad.bias_decay_mm = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("case generation is deterministic per seed") {
  const auto site = default_sites()[1];
  const GeneratedCase a = generate_case(site, day2_profile(), 99, coarse());
  const GeneratedCase b = generate_case(site, day2_profile(), 99, coarse());
  const GeneratedCase c = generate_case(site, day2_profile(), 100, coarse());
  for (std::size_t e = 0; e < a.t2.volumes.size(); ++e) CHECK(same(a.t2.volumes[e], b.t2.volumes[e]));
  CHECK(same(a.dwi.volumes[2], b.dwi.volumes[2]));
  CHECK(a.truth.brain == b.truth.brain);
  CHECK_FALSE(same(a.t2.volumes[0], c.t2.volumes[0]));
  CHECK(a.truth.brain_volume_mm3 >= 300.0);
  CHECK(a.truth.brain_volume_mm3 <= 700.0);
  for (std::size_t i = 0; i < a.truth.lesion.size(); ++i)
    if (a.truth.lesion[i]) REQUIRE(a.truth.brain[i]);
}

TEST_CASE("closed loop: noiseless volume-coil phantoms fit back to their tissue constants") {
  for (const EchoScheme scheme : {EchoScheme::Three, EchoScheme::Ten})
    for (const TimeProfile& time : {day2_profile(), day30_profile()}) {
      const GeneratedCase g = generate_case(clean(scheme), time, 5, coarse());
      const relaxo::FitMaps t2 = relaxo::fit_series(g.t2);
      const relaxo::FitMaps dwi = relaxo::fit_series(g.dwi);
      double worst_r2 = 0.0, worst_adc = 0.0, worst_base = 0.0;
      std::size_t checked = 0;
      for (std::size_t i = 0; i < t2.rate.size(); ++i) {
        if (!g.truth.pure[i] || g.truth.t2[i] <= 0.0f) continue;
        ++checked;
        REQUIRE(t2.valid[i]);
        REQUIRE(dwi.valid[i]);
        worst_r2 = std::max(worst_r2, std::abs(t2.rate[i] * g.truth.t2[i] - 1.0));
        worst_adc = std::max(worst_adc, std::abs(dwi.rate[i] / g.truth.adc[i] - 1.0));
        // Brain proton density carries sub-voxel texture, so the baseline is
        // only compared where the tissue is homogeneous.
        if (!g.truth.brain[i]) worst_base = std::max(worst_base, std::abs(t2.base[i] / g.truth.s0[i] - 1.0));
      }
      CHECK(checked > 1000);
      CHECK(worst_r2 < 1e-4);
      CHECK(worst_adc < 1e-4);
      CHECK(worst_base < 1e-4);
    }
}

TEST_CASE("raw SNR falls in the order of the site noise levels") {
  const auto sites = default_sites();
  std::vector<double> noise, snr;
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const GeneratedCase g = generate_case(sites[s], day2_profile(), 31, coarse());
    noise.push_back(sites[s].noise_sigma);
    snr.push_back(prequal::qa_metrics(g.t2.volumes[0]).snr);
  }
  CHECK(spearman(noise, snr) == doctest::Approx(-1.0));
  CHECK(std::min_element(snr.begin(), snr.end()) - snr.begin() == 5);
}

TEST_CASE("cohort writes every case, a manifest, and resumes without regenerating") {
  testutil::TempDir tmp("cohort");
  CohortOptions o;
  o.sites = {default_sites()[0], default_sites()[5]};
  o.n_per_cell = 2;
  o.out_dir = tmp.path();
  o.iso_spacing_mm = 0.3;
  o.phantom = coarse();
  const auto rows = generate_cohort(o);
  REQUIRE(rows.size() == 2 * 2 * 2);
  const auto manifest = read_manifest(tmp / "manifest.jsonl");
  REQUIRE(manifest.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(manifest[i].case_id == rows[i].case_id);
    for (const Contrast c : kAllContrasts) CHECK(std::filesystem::exists(manifest[i].map_path(c)));
    REQUIRE(manifest[i].truth_mask_path);
    const auto truth = volgrid::read_mask(*manifest[i].truth_mask_path);
    CHECK(truth.geometry().spacing[2] == doctest::Approx(0.3));
    CHECK(truth.count() > 0);
  }
  CHECK(rows[0].case_id == "siteA_day2_c00");

  const auto stamp_time = std::filesystem::last_write_time(rows[3].map_path(Contrast::R2));
  const auto again = generate_cohort(o);
  CHECK(again.size() == rows.size());
  CHECK(std::filesystem::last_write_time(rows[3].map_path(Contrast::R2)) == stamp_time);
  CHECK(again[3].config_hash == rows[3].config_hash);

  // A changed seed invalidates the stamps.
  o.seed = 8;
  const auto reseeded = generate_cohort(o);
  CHECK(reseeded[3].config_hash != rows[3].config_hash);
}
