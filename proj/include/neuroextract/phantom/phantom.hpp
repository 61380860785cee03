#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "neuroextract/core/case_record.hpp"
#include "neuroextract/relaxo/relaxo.hpp"
#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::phantom {

using volgrid::Mask;
using volgrid::Volume;

enum class Coil { Volume, Surface };
enum class EchoScheme {
  /// TE = 0, 45, 75 ms
  Three,
  /// ten echoes equally spaced from 0 to 100 ms
  Ten,
};

/// Acquisition characteristics of one imaging centre.
struct SiteProfile {
  std::string id;
  /// Gaussian noise sd as a fraction of the reference tissue signal.
  double noise_sigma = 0.02;
  Coil coil = Coil::Volume;
  /// Surface-coil sensitivity falls off as exp(-depth / bias_decay_mm).
  double bias_decay_mm = 0.0;
  EchoScheme echo_scheme = EchoScheme::Three;
  std::vector<double> b_values{0.0, 500.0, 1000.0};

  std::vector<double> echo_times_ms() const;
  void validate() const;
};

enum class TimePoint { Day2, Day30 };

struct TimeProfile {
  TimePoint label = TimePoint::Day2;
  double lesion_radius_mm = 1.8;
  double lesion_adc_factor = 0.6;
  double lesion_t2_factor = 1.3;
  /// Day-30 lesions turn into fluid-filled cavities.
  bool cavity = false;
  /// Lesion radius multiplier (cavity contraction).
  double shrink_factor = 1.0;
  /// Fractional enlargement of the lesioned hemisphere (oedema).
  double swelling = 0.0;

  std::string name() const;
  void validate() const;
};

/// Six site analogs A-F. F is the surface-coil site with the highest noise.
std::vector<SiteProfile> default_sites();
TimeProfile day2_profile();
TimeProfile day30_profile();

struct Tissue {
  double pd = 0.0;
  double t2_ms = 1.0;
  double adc = 0.0;
};

/// Geometry and tissue constants of the synthetic head. None of these are
/// measured values; they are chosen to be physiologically plausible.
struct PhantomConfig {
  volgrid::Dims dims{96, 96, 64};
  volgrid::Spacing spacing{0.15, 0.15, 0.5};
  std::array<int, 3> supersample{2, 2, 4};
  std::array<double, 3> brain_semi_axes_mm{4.2, 3.2, 6.4};
  double brain_center_y_mm = 1.0;
  double axis_jitter = 0.10;
  double superellipse_exponent = 2.4;
  double skull_thickness_mm = 0.3;
  double scalp_thickness_mm = 1.0;
  double texture_amplitude = 0.05;
  double dwi_te_ms = 25.0;
  double brain_volume_min_mm3 = 300.0;
  double brain_volume_max_mm3 = 700.0;
  Tissue brain{1.0, 45.0, 0.7e-3};
  Tissue skull{0.12, 15.0, 0.3e-3};
  Tissue scalp{0.6, 35.0, 1.1e-3};
  Tissue muscle{0.5, 30.0, 1.4e-3};
  Tissue csf{1.0, 90.0, 2.5e-3};
};

nlohmann::json to_json(const SiteProfile& s);
nlohmann::json to_json(const TimeProfile& t);
nlohmann::json to_json(const PhantomConfig& c);

/// Ground truth on the native grid. `pure` marks voxels whose sub-samples all
/// belong to one tissue class (no partial volume).
struct PhantomTruth {
  Mask brain;
  Mask lesion;
  Volume s0;
  Volume t2;
  Volume adc;
  Mask pure;
  double brain_volume_mm3 = 0.0;
};

struct GeneratedCase {
  relaxo::DecaySeries t2;
  relaxo::DecaySeries dwi;
  PhantomTruth truth;
  CaseRecord record;
};

/// Deterministic per (profiles, seed, config).
GeneratedCase generate_case(const SiteProfile& site, const TimeProfile& time, std::uint64_t seed,
                            const PhantomConfig& config = {});

struct CohortOptions {
  std::vector<SiteProfile> sites = default_sites();
  std::vector<TimeProfile> times{day2_profile(), day30_profile()};
  int n_per_cell = 5;
  std::uint64_t seed = 7;
  std::filesystem::path out_dir;
  double iso_spacing_mm = 0.15;
  int threads = 1;
  /// Reuse case files whose stamp matches the current case hash.
  bool resume = true;
  PhantomConfig phantom;
};

/// Writes native series, native truth, and the isotropic relaxometry maps and
/// truth mask for every site x time x n_per_cell case, plus
/// `<out_dir>/manifest.jsonl`. Returns the manifest rows.
std::vector<CaseRecord> generate_cohort(const CohortOptions& options);

/// Per-case RNG seed derived from the cohort seed and the case index, so
/// results do not depend on generation order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace neuroextract::phantom
