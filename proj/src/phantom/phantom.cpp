#include "neuroextract/phantom/phantom.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "neuroextract/core/hash.hpp"
#include "neuroextract/core/parallel.hpp"
#include "neuroextract/core/seed.hpp"
#include "neuroextract/volgrid/nifti.hpp"
#include "neuroextract/volgrid/resample.hpp"

namespace neuroextract::phantom {
namespace fs = std::filesystem;

namespace {

enum TissueClass : int { kAir = 0, kBrain, kLesion, kSkull, kScalp, kMuscle, kClassCount };

// Smooth random multiplicative texture: trilinear interpolation of a coarse
// Gaussian lattice spanning the field of view.
class Texture {
 public:
  Texture(std::mt19937_64& rng, std::array<double, 3> extent_mm, double amplitude)
      : extent_(extent_mm), amplitude_(amplitude) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : lattice_) v = n(rng);
  }

  double operator()(double x, double y, double z) const {
    if (amplitude_ == 0.0) return 1.0;
    const double p[3] = {x, y, z};
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      const double u = std::clamp((p[a] / extent_[a] + 0.5) * (kN - 1), 0.0, kN - 1.000001);
      i0[a] = static_cast<int>(u);
      f[a] = u - i0[a];
    }
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
          acc += w * lattice_[((i0[2] + dz) * kN + (i0[1] + dy)) * kN + (i0[0] + dx)];
        }
    return 1.0 + amplitude_ * acc;
  }

 private:
  static constexpr int kN = 8;
  std::array<double, kN * kN * kN> lattice_{};
  std::array<double, 3> extent_;
  double amplitude_;
};

struct Anatomy {
  std::array<double, 3> axes{};  // brain semi-axes, mm
  double exponent = 2.0;
  double center_y = 0.0;
  int lesion_side = 1;  // +1: positive x hemisphere
  double swelling = 0.0;
  std::array<double, 3> lesion_center{};
  std::array<double, 3> lesion_radii{};
  double skull = 0.3;
  double scalp = 1.0;

  // Superellipsoid level with every semi-axis grown by `grow` mm.
  double level(double x, double y, double z, double grow) const {
    double ax = axes[0];
    if ((x >= 0.0 ? 1 : -1) == lesion_side) ax *= 1.0 + swelling;
    const double u = std::abs(x) / (ax + grow);
    const double v = std::abs(y - center_y) / (axes[1] + grow);
    const double w = std::abs(z) / (axes[2] + grow);
    return std::pow(u, exponent) + std::pow(v, exponent) + std::pow(w, exponent);
  }

  int classify(double x, double y, double z) const {
    if (level(x, y, z, 0.0) <= 1.0) {
      const double lx = (x - lesion_center[0]) / lesion_radii[0];
      const double ly = (y - lesion_center[1]) / lesion_radii[1];
      const double lz = (z - lesion_center[2]) / lesion_radii[2];
      return lx * lx + ly * ly + lz * lz <= 1.0 ? kLesion : kBrain;
    }
    if (level(x, y, z, skull) <= 1.0) return kSkull;
    if (level(x, y, z, skull + scalp) <= 1.0) return kScalp;
    // Ventral muscle mass under the skull.
    const double mx = x / (axes[0] * 0.95);
    const double my = (y - (center_y - axes[1] - skull - 2.0)) / 2.2;
    const double mz = z / (axes[2] * 1.1);
    if (mx * mx + my * my + mz * mz <= 1.0) return kMuscle;
    return kAir;
  }

  double analytic_volume_mm3() const {
    const double p = exponent;
    const double g = std::tgamma(1.0 + 1.0 / p);
    const double v = 8.0 * axes[0] * axes[1] * axes[2] * g * g * g / std::tgamma(1.0 + 3.0 / p);
    return v * (1.0 + 0.5 * swelling);
  }

  double head_top_y() const { return center_y + axes[1] + skull + scalp; }
};

std::array<Tissue, kClassCount> tissue_table(const PhantomConfig& c, const TimeProfile& t) {
  std::array<Tissue, kClassCount> tab{};
  tab[kAir] = Tissue{0.0, 1.0, 0.0};
  tab[kBrain] = c.brain;
  Tissue lesion = c.brain;
  lesion.t2_ms *= t.lesion_t2_factor;
  lesion.adc *= t.lesion_adc_factor;
  lesion.pd = t.cavity ? c.csf.pd : c.brain.pd * 1.1;
  tab[kLesion] = lesion;
  tab[kSkull] = c.skull;
  tab[kScalp] = c.scalp;
  tab[kMuscle] = c.muscle;
  return tab;
}

std::string format_number(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) { return neuroextract::derive_seed(seed, index); }

std::vector<double> SiteProfile::echo_times_ms() const {
  if (echo_scheme == EchoScheme::Three) return {0.0, 45.0, 75.0};
  std::vector<double> te(10);
  for (int i = 0; i < 10; ++i) te[i] = 100.0 * i / 9.0;
  return te;
}

void SiteProfile::validate() const {
  if (id.empty()) throw Error(ErrorKind::Config, "site id must not be empty");
  if (!(noise_sigma >= 0.0)) throw Error(ErrorKind::Config, "site " + id + ": noise_sigma must be >= 0");
  if (coil == Coil::Surface && !(bias_decay_mm > 0.0))
    throw Error(ErrorKind::Config, "site " + id + ": surface coil needs bias_decay_mm > 0");
  if (b_values.size() < 2) throw Error(ErrorKind::Config, "site " + id + ": need at least two b-values");
}

std::string TimeProfile::name() const { return label == TimePoint::Day2 ? "day2" : "day30"; }

void TimeProfile::validate() const {
  if (!(lesion_radius_mm > 0.0 && lesion_adc_factor > 0.0 && lesion_t2_factor > 0.0 && shrink_factor > 0.0))
    throw Error(ErrorKind::Config, "time profile factors must be positive");
  if (label == TimePoint::Day2 && !(lesion_adc_factor < 1.0))
    throw Error(ErrorKind::Config, "day-2 lesion ADC factor must be < 1");
  if (swelling < 0.0 || swelling > 0.5) throw Error(ErrorKind::Config, "swelling must lie in [0, 0.5]");
}

std::vector<SiteProfile> default_sites() {
  return {
      {"A", 0.020, Coil::Volume, 0.0, EchoScheme::Three, {0, 500, 1000}},
      {"B", 0.030, Coil::Volume, 0.0, EchoScheme::Ten, {0, 500, 1000}},
      {"C", 0.010, Coil::Volume, 0.0, EchoScheme::Three, {0, 500, 1000}},
      {"D", 0.040, Coil::Volume, 0.0, EchoScheme::Ten, {0, 500, 1000}},
      {"E", 0.050, Coil::Volume, 0.0, EchoScheme::Three, {0, 500, 1000}},
      {"F", 0.080, Coil::Surface, 6.0, EchoScheme::Ten, {0, 500, 1000}},
  };
}

TimeProfile day2_profile() { return {TimePoint::Day2, 1.8, 0.6, 1.3, false, 1.0, 0.08}; }

TimeProfile day30_profile() { return {TimePoint::Day30, 1.8, 3.5, 2.0, true, 0.6, 0.0}; }

nlohmann::json to_json(const SiteProfile& s) {
  return {{"id", s.id},
          {"noise_sigma", s.noise_sigma},
          {"coil", s.coil == Coil::Volume ? "volume" : "surface"},
          {"bias_decay_mm", s.bias_decay_mm},
          {"echo_scheme", s.echo_scheme == EchoScheme::Three ? "three" : "ten"},
          {"b_values", s.b_values}};
}

nlohmann::json to_json(const TimeProfile& t) {
  return {{"label", t.name()},
          {"lesion_radius_mm", t.lesion_radius_mm},
          {"lesion_adc_factor", t.lesion_adc_factor},
          {"lesion_t2_factor", t.lesion_t2_factor},
          {"cavity", t.cavity},
          {"shrink_factor", t.shrink_factor},
          {"swelling", t.swelling}};
}

nlohmann::json to_json(const PhantomConfig& c) {
  auto tissue = [](const Tissue& t) { return nlohmann::json{{"pd", t.pd}, {"t2_ms", t.t2_ms}, {"adc", t.adc}}; };
  return {{"dims", c.dims},
          {"spacing", c.spacing},
          {"supersample", c.supersample},
          {"brain_semi_axes_mm", c.brain_semi_axes_mm},
          {"brain_center_y_mm", c.brain_center_y_mm},
          {"axis_jitter", c.axis_jitter},
          {"superellipse_exponent", c.superellipse_exponent},
          {"skull_thickness_mm", c.skull_thickness_mm},
          {"scalp_thickness_mm", c.scalp_thickness_mm},
          {"texture_amplitude", c.texture_amplitude},
          {"dwi_te_ms", c.dwi_te_ms},
          {"brain_volume_range_mm3", {c.brain_volume_min_mm3, c.brain_volume_max_mm3}},
          {"brain", tissue(c.brain)},
          {"skull", tissue(c.skull)},
          {"scalp", tissue(c.scalp)},
          {"muscle", tissue(c.muscle)},
          {"csf", tissue(c.csf)}};
}

GeneratedCase generate_case(const SiteProfile& site, const TimeProfile& time, std::uint64_t seed,
                            const PhantomConfig& config) {
  site.validate();
  time.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const volgrid::Dims& dims = config.dims;
  const volgrid::Spacing& sp = config.spacing;
  std::array<double, 3> extent{};
  for (int a = 0; a < 3; ++a) extent[a] = dims[a] * sp[a];

  Anatomy anat;
  anat.exponent = config.superellipse_exponent;
  anat.center_y = config.brain_center_y_mm;
  anat.skull = config.skull_thickness_mm;
  anat.scalp = config.scalp_thickness_mm;
  anat.swelling = time.swelling;
  for (int attempt = 0;; ++attempt) {
    for (int a = 0; a < 3; ++a)
      anat.axes[a] = config.brain_semi_axes_mm[a] * (1.0 + config.axis_jitter * (2.0 * unit(rng) - 1.0));
    const double v = anat.analytic_volume_mm3();
    if (v > config.brain_volume_min_mm3 * 1.05 && v < config.brain_volume_max_mm3 * 0.95) break;
    if (attempt > 100) throw Error(ErrorKind::Config, "phantom brain volume range unreachable with this config");
  }
  anat.lesion_side = unit(rng) < 0.5 ? -1 : 1;
  const double r = time.lesion_radius_mm * time.shrink_factor;
  anat.lesion_radii = {r, 0.8 * r, 1.2 * r};
  anat.lesion_center = {anat.lesion_side * anat.axes[0] * (0.55 + 0.1 * unit(rng)),
                        anat.center_y + anat.axes[1] * (0.1 + 0.2 * unit(rng)),
                        anat.axes[2] * 0.3 * (2.0 * unit(rng) - 1.0)};
  const Texture texture(rng, extent, config.texture_amplitude);

  const auto tissues = tissue_table(config, time);
  const std::vector<double> echoes = site.echo_times_ms();
  const std::vector<double>& bvals = site.b_values;
  const volgrid::Geometry geom = volgrid::Geometry::with_spacing(dims, sp);
  const std::size_t n = geom.voxel_count();

  std::vector<Volume> t2_vols(echoes.size(), Volume(geom, 0.0f));
  std::vector<Volume> dwi_vols(bvals.size(), Volume(geom, 0.0f));
  PhantomTruth truth{Mask(geom, 0), Mask(geom, 0), Volume(geom, 0.0f), Volume(geom, 0.0f), Volume(geom, 0.0f),
                     Mask(geom, 0), 0.0};

  const auto& ss = config.supersample;
  const double inv_sub = 1.0 / (ss[0] * ss[1] * ss[2]);
  const double top = anat.head_top_y();
  auto world = [&](int a, double idx) { return (idx - 0.5 * (dims[a] - 1)) * sp[a]; };

  std::array<double, kClassCount> weight{};  // sum of pd * bias per class
  std::array<int, kClassCount> hits{};
  std::vector<double> t2_decay(kClassCount * echoes.size()), dwi_decay(kClassCount * bvals.size());
  for (int c = 0; c < kClassCount; ++c) {
    for (std::size_t e = 0; e < echoes.size(); ++e) t2_decay[c * echoes.size() + e] = std::exp(-echoes[e] / tissues[c].t2_ms);
    const double dwi_base = std::exp(-config.dwi_te_ms / tissues[c].t2_ms);
    for (std::size_t b = 0; b < bvals.size(); ++b)
      dwi_decay[c * bvals.size() + b] = dwi_base * std::exp(-bvals[b] * tissues[c].adc);
  }

  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        weight.fill(0.0);
        hits.fill(0);
        for (int k = 0; k < ss[2]; ++k)
          for (int j = 0; j < ss[1]; ++j)
            for (int i = 0; i < ss[0]; ++i) {
              const double px = world(0, x - 0.5 + (i + 0.5) / ss[0]);
              const double py = world(1, y - 0.5 + (j + 0.5) / ss[1]);
              const double pz = world(2, z - 0.5 + (k + 0.5) / ss[2]);
              const int cls = anat.classify(px, py, pz);
              ++hits[cls];
              if (cls == kAir) continue;
              double pd = tissues[cls].pd;
              if (cls == kBrain) pd *= texture(px, py, pz);
              const double bias = site.coil == Coil::Surface ? std::exp(-std::max(0.0, top - py) / site.bias_decay_mm) : 1.0;
              weight[cls] += pd * bias;
            }
        const std::size_t vi = geom.index(x, y, z);
        for (std::size_t e = 0; e < echoes.size(); ++e) {
          double s = 0.0;
          for (int c = 1; c < kClassCount; ++c) s += weight[c] * t2_decay[c * echoes.size() + e];
          t2_vols[e][vi] = static_cast<float>(s * inv_sub);
        }
        for (std::size_t b = 0; b < bvals.size(); ++b) {
          double s = 0.0;
          for (int c = 1; c < kClassCount; ++c) s += weight[c] * dwi_decay[c * bvals.size() + b];
          dwi_vols[b][vi] = static_cast<float>(s * inv_sub);
        }
        const int total = ss[0] * ss[1] * ss[2];
        const int brain_hits = hits[kBrain] + hits[kLesion];
        truth.brain[vi] = 2 * brain_hits >= total ? 1 : 0;
        truth.lesion[vi] = (truth.brain[vi] && 2 * hits[kLesion] >= total) ? 1 : 0;
        truth.pure[vi] = *std::max_element(hits.begin(), hits.end()) == total ? 1 : 0;
        const double cx = world(0, x), cy = world(1, y), cz = world(2, z);
        const int center_cls = anat.classify(cx, cy, cz);
        double pd = tissues[center_cls].pd;
        if (center_cls == kBrain) pd *= texture(cx, cy, cz);
        truth.s0[vi] = static_cast<float>(pd);
        truth.t2[vi] = center_cls == kAir ? 0.0f : static_cast<float>(tissues[center_cls].t2_ms);
        truth.adc[vi] = static_cast<float>(tissues[center_cls].adc);
      }

  truth.brain_volume_mm3 = static_cast<double>(truth.brain.count()) * geom.voxel_volume_mm3();
  if (truth.brain_volume_mm3 < config.brain_volume_min_mm3 || truth.brain_volume_mm3 > config.brain_volume_max_mm3)
    throw Error(ErrorKind::Config, "generated brain volume " + format_number(truth.brain_volume_mm3) +
                                       " mm^3 is outside the configured range");

  if (site.noise_sigma > 0.0) {
    const double sigma = site.noise_sigma * config.brain.pd;
    std::normal_distribution<double> noise(0.0, sigma);
    std::uint64_t stream = 0;
    auto add_noise = [&](Volume& v) {
      std::mt19937_64 nrng(derive_seed(seed, 1000 + stream++));
      for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(v[i] + noise(nrng));
    };
    for (auto& v : t2_vols) add_noise(v);
    for (auto& v : dwi_vols) add_noise(v);
  }

  GeneratedCase out;
  out.t2 = relaxo::DecaySeries{echoes, std::move(t2_vols)};
  out.dwi = relaxo::DecaySeries{bvals, std::move(dwi_vols)};
  out.truth = std::move(truth);
  out.record.site = site.id;
  out.record.timepoint = time.name();
  out.record.t2_echoes_ms = echoes;
  out.record.b_values = bvals;
  return out;
}

std::vector<CaseRecord> generate_cohort(const CohortOptions& options) {
  if (options.n_per_cell < 1) throw Error(ErrorKind::Config, "n_per_cell must be >= 1");
  if (options.sites.empty() || options.times.empty()) throw Error(ErrorKind::Config, "cohort needs sites and times");
  if (!(options.iso_spacing_mm > 0.0)) throw Error(ErrorKind::Config, "iso spacing must be > 0");
  std::error_code ec;
  fs::create_directories(options.out_dir / "cases", ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + (options.out_dir / "cases").string() + ": " + ec.message());

  struct Job {
    const SiteProfile* site;
    const TimeProfile* time;
    int k;
    std::size_t index;
  };
  std::vector<Job> jobs;
  for (const auto& s : options.sites)
    for (const auto& t : options.times)
      for (int k = 0; k < options.n_per_cell; ++k) jobs.push_back({&s, &t, k, jobs.size()});

  std::vector<CaseRecord> rows(jobs.size());
  const volgrid::Spacing iso{options.iso_spacing_mm, options.iso_spacing_mm, options.iso_spacing_mm};
  const fs::path case_dir = options.out_dir / "cases";

  parallel_for(jobs.size(), options.threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "site%s_%s_c%02d", job.site->id.c_str(), job.time->name().c_str(), job.k);
    const std::string id = idbuf;
    const std::uint64_t seed = derive_seed(options.seed, job.index);
    const nlohmann::json stamp_json = {{"site", to_json(*job.site)},   {"time", to_json(*job.time)},
                                       {"seed", seed},                 {"iso_spacing_mm", options.iso_spacing_mm},
                                       {"phantom", to_json(options.phantom)}, {"format", 1}};
    const std::string hash = short_hash(stamp_json.dump());

    CaseRecord rec;
    rec.case_id = id;
    rec.site = job.site->id;
    rec.timepoint = job.time->name();
    rec.t2_echoes_ms = job.site->echo_times_ms();
    rec.b_values = job.site->b_values;
    rec.config_hash = hash;
    for (std::size_t e = 0; e < rec.t2_echoes_ms.size(); ++e)
      rec.t2_echo_paths.push_back(case_dir / (id + "_t2_e" + std::to_string(e) + ".nii.gz"));
    for (const double b : rec.b_values)
      rec.dwi_paths.push_back(case_dir / (id + "_dwi_b" + std::to_string(static_cast<int>(b)) + ".nii.gz"));
    for (const Contrast c : kAllContrasts)
      rec.map_paths[static_cast<int>(c)] = case_dir / (id + "_" + to_string(c) + ".nii.gz");
    rec.truth_native_path = case_dir / (id + "_truth_native.nii.gz");
    rec.truth_mask_path = case_dir / (id + "_truth.nii.gz");

    const fs::path stamp = case_dir / (id + ".stamp");
    if (options.resume && fs::exists(stamp)) {
      std::ifstream in(stamp);
      std::string existing;
      std::getline(in, existing);
      if (existing == hash) {
        rows[j] = rec;
        return;
      }
    }

    GeneratedCase g = generate_case(*job.site, *job.time, seed, options.phantom);
    for (std::size_t e = 0; e < g.t2.volumes.size(); ++e) volgrid::write_nifti(g.t2.volumes[e], rec.t2_echo_paths[e]);
    for (std::size_t b = 0; b < g.dwi.volumes.size(); ++b) volgrid::write_nifti(g.dwi.volumes[b], rec.dwi_paths[b]);
    volgrid::write_mask(g.truth.brain, rec.truth_native_path);

    auto to_iso = [&](relaxo::DecaySeries& s) {
      for (auto& v : s.volumes) v = volgrid::resample_tricubic(v, iso);
    };
    to_iso(g.t2);
    to_iso(g.dwi);
    const relaxo::FitMaps t2_fit = relaxo::fit_series(g.t2);
    const relaxo::FitMaps dwi_fit = relaxo::fit_series(g.dwi);
    volgrid::write_nifti(t2_fit.base, rec.map_path(Contrast::T2Base));
    volgrid::write_nifti(t2_fit.rate, rec.map_path(Contrast::R2));
    volgrid::write_nifti(dwi_fit.base, rec.map_path(Contrast::AdcBase));
    volgrid::write_nifti(dwi_fit.rate, rec.map_path(Contrast::AdcRate));
    volgrid::write_mask(volgrid::resample_mask(g.truth.brain, iso), *rec.truth_mask_path);

    std::ofstream out(stamp);
    out << hash << '\n';
    rows[j] = rec;
  });

  write_manifest(rows, options.out_dir / "manifest.jsonl");
  return rows;
}

}  // namespace neuroextract::phantom
