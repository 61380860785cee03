#include "neuroextract/ruleseg/ruleseg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "neuroextract/core/stats.hpp"
#include "neuroextract/prequal/prequal.hpp"
#include "neuroextract/volgrid/components.hpp"

namespace neuroextract::ruleseg {
namespace {

using volgrid::Dims;
using volgrid::Geometry;

struct Edge {
  double w;
  std::uint32_t a;
  std::uint32_t b;
};

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), 0u);
  }
  std::uint32_t find(std::uint32_t x) {
    std::uint32_t root = x;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[x] != root) {
      const std::uint32_t next = parent_[x];
      parent_[x] = root;
      x = next;
    }
    return root;
  }
  std::uint32_t join(std::uint32_t a, std::uint32_t b) {
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    if (rank_[a] == rank_[b]) ++rank_[a];
    return a;
  }
  std::size_t size(std::uint32_t root) const { return size_[root]; }

 private:
  std::vector<std::uint32_t> parent_;
  std::vector<std::uint8_t> rank_;
  std::vector<std::size_t> size_;
};

std::vector<std::array<int, 3>> ball_offsets(int radius) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -radius; dz <= radius; ++dz)
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (dx * dx + dy * dy + dz * dz <= radius * radius) out.push_back({dx, dy, dz});
  return out;
}

// Ball erosion/dilation with out-of-volume voxels ignored; the pair is an
// adjunction so open/close are idempotent.
Mask erode(const Mask& m, const std::vector<std::array<int, 3>>& ball) {
  const Geometry& g = m.geometry();
  const Dims& d = g.dims;
  Mask out(g, 0);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        if (!m.at(x, y, z)) continue;
        bool keep = true;
        for (const auto& o : ball) {
          const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
          if (xx < 0 || yy < 0 || zz < 0 || xx >= d[0] || yy >= d[1] || zz >= d[2]) continue;
          if (!m.at(xx, yy, zz)) {
            keep = false;
            break;
          }
        }
        out.at(x, y, z) = keep ? 1 : 0;
      }
  return out;
}

Mask dilate(const Mask& m, const std::vector<std::array<int, 3>>& ball) {
  const Geometry& g = m.geometry();
  const Dims& d = g.dims;
  Mask out(g, 0);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        if (m.at(x, y, z)) {
          out.at(x, y, z) = 1;
          continue;
        }
        for (const auto& o : ball) {
          const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
          if (xx < 0 || yy < 0 || zz < 0 || xx >= d[0] || yy >= d[1] || zz >= d[2]) continue;
          if (m.at(xx, yy, zz)) {
            out.at(x, y, z) = 1;
            break;
          }
        }
      }
  return out;
}

Mask fill_holes(const Mask& m) {
  const Geometry& g = m.geometry();
  const Dims& d = g.dims;
  std::vector<std::uint8_t> outside(m.size(), 0);
  std::vector<std::size_t> queue;
  auto seed = [&](int x, int y, int z) {
    const std::size_t i = g.index(x, y, z);
    if (!m[i] && !outside[i]) {
      outside[i] = 1;
      queue.push_back(i);
    }
  };
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x)
        if (x == 0 || y == 0 || z == 0 || x == d[0] - 1 || y == d[1] - 1 || z == d[2] - 1) seed(x, y, z);
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const std::size_t i = queue[head];
    const int x = static_cast<int>(i % d[0]);
    const int y = static_cast<int>((i / d[0]) % d[1]);
    const int z = static_cast<int>(i / (static_cast<std::size_t>(d[0]) * d[1]));
    if (x > 0) seed(x - 1, y, z);
    if (x + 1 < d[0]) seed(x + 1, y, z);
    if (y > 0) seed(x, y - 1, z);
    if (y + 1 < d[1]) seed(x, y + 1, z);
    if (z > 0) seed(x, y, z - 1);
    if (z + 1 < d[2]) seed(x, y, z + 1);
  }
  std::vector<std::uint8_t> out(m.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = outside[i] ? 0 : 1;
  return Mask(g, std::move(out));
}

Volume box_blur(const Mask& m) {
  const Geometry& g = m.geometry();
  const Dims& d = g.dims;
  Volume out(g, 0.0f);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double acc = 0.0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              acc += m.at(std::clamp(x + dx, 0, d[0] - 1), std::clamp(y + dy, 0, d[1] - 1),
                          std::clamp(z + dz, 0, d[2] - 1));
        out.at(x, y, z) = static_cast<float>(acc / 27.0);
      }
  return out;
}

double boundary_coverage(const Mask& m) {
  const Dims& d = m.dims();
  std::size_t total = 0, hit = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        if (!(x == 0 || y == 0 || z == 0 || x == d[0] - 1 || y == d[1] - 1 || z == d[2] - 1)) continue;
        ++total;
        hit += m.at(x, y, z);
      }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

inline double unary(double p, int label) { return -std::log((label ? p : 1.0 - p) + 1e-6); }

}  // namespace

void RuleParams::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, "rule parameter " + what); };
  if (!(lo_percentile > 0.0 && lo_percentile < hi_percentile && hi_percentile < 100.0))
    fail("lo_percentile/hi_percentile must satisfy 0 < lo < hi < 100");
  if (!(k_factor > 0.0)) fail("k_factor must be > 0");
  if (min_segment_size < 1) fail("min_segment_size must be >= 1");
  if (morphology_radius < 1) fail("morphology_radius must be >= 1");
  if (!(mrf_beta >= 0.0)) fail("mrf_beta must be >= 0");
  if (mrf_max_iters < 1) fail("mrf_max_iters must be >= 1");
  if (!(brain_volume_min_mm3 < brain_volume_max_mm3)) fail("brain volume range must satisfy low < high");
  if (!(sobel_scale > 0.0)) fail("sobel_scale must be > 0");
  if (gradient_otsu_passes < 1) fail("gradient_otsu_passes must be >= 1");
  if (!(leak_boundary_fraction >= 0.0 && leak_boundary_fraction <= 1.0))
    fail("leak_boundary_fraction must lie in [0, 1]");
}

std::string to_string(RuleStatus s) { return s == RuleStatus::Ok ? "ok" : "leak-warning"; }

Volume normalize_contrast(const Volume& v, double lo, double hi) {
  std::vector<float> values(v.data().begin(), v.data().end());
  const double p_lo = percentile(values, lo);
  const double p_hi = percentile(std::move(values), hi);
  if (!(p_hi > p_lo)) throw Error(ErrorKind::DegenerateInput, "normalization percentiles coincide");
  Volume out(v.geometry(), 0.0f);
  const auto src = v.data();
  auto dst = out.data();
  const double scale = 1.0 / (p_hi - p_lo);
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = static_cast<float>(std::clamp((src[i] - p_lo) * scale, 0.0, 1.0));
  return out;
}

Volume sobel_gradient_magnitude(const Volume& v, double scale) {
  const Geometry& g = v.geometry();
  const Dims& d = g.dims;
  if (d[0] < 3 || d[1] < 3 || d[2] < 3) throw Error(ErrorKind::Dimension, "Sobel needs at least 3 voxels per axis");
  static constexpr double kSmooth[3] = {1.0, 2.0, 1.0};
  static constexpr double kDeriv[3] = {-1.0, 0.0, 1.0};
  const double norm[3] = {scale / (32.0 * g.spacing[0]), scale / (32.0 * g.spacing[1]), scale / (32.0 * g.spacing[2])};
  Volume out(g, 0.0f);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double gx = 0, gy = 0, gz = 0;
        for (int k = 0; k < 3; ++k) {
          const int zz = std::clamp(z + k - 1, 0, d[2] - 1);
          for (int j = 0; j < 3; ++j) {
            const int yy = std::clamp(y + j - 1, 0, d[1] - 1);
            for (int i = 0; i < 3; ++i) {
              const int xx = std::clamp(x + i - 1, 0, d[0] - 1);
              const double f = v.at(xx, yy, zz);
              gx += kDeriv[i] * kSmooth[j] * kSmooth[k] * f;
              gy += kSmooth[i] * kDeriv[j] * kSmooth[k] * f;
              gz += kSmooth[i] * kSmooth[j] * kDeriv[k] * f;
            }
          }
        }
        gx *= norm[0];
        gy *= norm[1];
        gz *= norm[2];
        out.at(x, y, z) = static_cast<float>(std::sqrt(gx * gx + gy * gy + gz * gz));
      }
  return out;
}

SegmentLabels felzenszwalb_segment(const Volume& v, double k, int min_size, const Mask* region) {
  const Geometry& g = v.geometry();
  const Dims& d = g.dims;
  if (region && !region->geometry().same_grid(g)) throw Error(ErrorKind::Shape, "segmentation region geometry mismatch");
  if (v.size() > std::numeric_limits<std::uint32_t>::max())
    throw Error(ErrorKind::Dimension, "volume too large for graph segmentation");
  const auto src = v.data();
  auto inside = [&](std::size_t i) { return region == nullptr || (*region)[i] != 0; };

  // Generation order is lexicographic in (a, b); stable_sort keeps it as the
  // tie-break.
  std::vector<Edge> edges;
  edges.reserve(3 * v.size());
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const std::size_t a = g.index(x, y, z);
        if (!inside(a)) continue;
        auto add = [&](std::size_t b) {
          if (inside(b))
            edges.push_back({std::abs(static_cast<double>(src[a]) - static_cast<double>(src[b])),
                             static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)});
        };
        if (x + 1 < d[0]) add(a + 1);
        if (y + 1 < d[1]) add(a + d[0]);
        if (z + 1 < d[2]) add(a + static_cast<std::size_t>(d[0]) * d[1]);
      }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) { return l.w < r.w; });

  DisjointSets sets(v.size());
  std::vector<double> threshold(v.size(), k);
  for (const Edge& e : edges) {
    std::uint32_t a = sets.find(e.a);
    std::uint32_t b = sets.find(e.b);
    if (a == b) continue;
    if (e.w <= threshold[a] && e.w <= threshold[b]) {
      const std::uint32_t root = sets.join(a, b);
      threshold[root] = e.w + k / static_cast<double>(sets.size(root));
    }
  }
  for (const Edge& e : edges) {
    const std::uint32_t a = sets.find(e.a);
    const std::uint32_t b = sets.find(e.b);
    if (a != b && (sets.size(a) < static_cast<std::size_t>(min_size) || sets.size(b) < static_cast<std::size_t>(min_size)))
      sets.join(a, b);
  }

  SegmentLabels out;
  out.geometry = g;
  out.labels.assign(v.size(), 0);
  std::vector<std::int32_t> root_label(v.size(), 0);
  std::vector<double> sums;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!inside(i)) continue;
    const std::uint32_t r = sets.find(static_cast<std::uint32_t>(i));
    if (root_label[r] == 0) {
      root_label[r] = ++out.count;
      out.sizes.push_back(0);
      sums.push_back(0.0);
    }
    const std::int32_t l = root_label[r];
    out.labels[i] = l;
    out.sizes[l - 1] += 1;
    sums[l - 1] += src[i];
  }
  out.mean_intensity.resize(out.count);
  for (int l = 0; l < out.count; ++l) out.mean_intensity[l] = sums[l] / static_cast<double>(out.sizes[l]);
  return out;
}

Mask morphology(const Mask& m, MorphologyOp op, int radius) {
  if (op == MorphologyOp::Fill) return fill_holes(m);
  if (radius < 1) throw Error(ErrorKind::Config, "morphology radius must be >= 1");
  const auto ball = ball_offsets(radius);
  if (op == MorphologyOp::Open) return dilate(erode(m, ball), ball);
  return erode(dilate(m, ball), ball);
}

double mrf_energy(const Volume& prob, const Mask& labels, double beta) {
  const Geometry& g = prob.geometry();
  const Dims& d = g.dims;
  double e = 0.0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const std::size_t i = g.index(x, y, z);
        const int l = labels[i];
        e += unary(prob[i], l);
        if (x + 1 < d[0] && labels[i + 1] != l) e += beta;
        if (y + 1 < d[1] && labels[i + d[0]] != l) e += beta;
        if (z + 1 < d[2] && labels[i + static_cast<std::size_t>(d[0]) * d[1]] != l) e += beta;
      }
  return e;
}

MrfResult mrf_regularize(const Volume& prob, double beta, int max_iters) {
  for (const float p : prob.data())
    if (!(p >= 0.0f && p <= 1.0f)) throw Error(ErrorKind::Domain, "foreground probabilities must lie in [0, 1]");
  if (beta < 0.0) throw Error(ErrorKind::Config, "MRF beta must be >= 0");
  const Geometry& g = prob.geometry();
  const Dims& d = g.dims;
  MrfResult r;
  r.mask = Mask::from_threshold(prob, 0.5f);
  Mask& lab = r.mask;
  r.energies.push_back(mrf_energy(prob, lab, beta));
  const std::size_t sy = d[0], sz = static_cast<std::size_t>(d[0]) * d[1];
  for (int sweep = 0; sweep < max_iters; ++sweep) {
    std::size_t flips = 0;
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          const std::size_t i = g.index(x, y, z);
          int fg_neighbors = 0, neighbors = 0;
          auto look = [&](bool ok, std::size_t j) {
            if (!ok) return;
            ++neighbors;
            fg_neighbors += lab[j];
          };
          look(x > 0, i - 1);
          look(x + 1 < d[0], i + 1);
          look(y > 0, i - sy);
          look(y + 1 < d[1], i + sy);
          look(z > 0, i - sz);
          look(z + 1 < d[2], i + sz);
          const double e0 = unary(prob[i], 0) + beta * fg_neighbors;
          const double e1 = unary(prob[i], 1) + beta * (neighbors - fg_neighbors);
          const int cur = lab[i];
          const int best = cur == 1 ? (e0 < e1 ? 0 : 1) : (e1 < e0 ? 1 : 0);
          if (best != cur) {
            lab[i] = static_cast<std::uint8_t>(best);
            ++flips;
          }
        }
    ++r.sweeps;
    r.energies.push_back(mrf_energy(prob, lab, beta));
    if (flips == 0) {
      r.converged = true;
      break;
    }
  }
  return r;
}

RuleResult extract_brain_rule(const Volume& adc_base, const RuleParams& params) {
  params.validate();
  const Geometry& g = adc_base.geometry();
  const double s0 = g.spacing[0];
  if (std::abs(g.spacing[1] - s0) > 1e-6 * s0 || std::abs(g.spacing[2] - s0) > 1e-6 * s0)
    throw Error(ErrorKind::Geometry, "rule-based extraction expects isotropic spacing");

  // (1) foreground, (2) normalization. Otsu runs on the percentile-clamped
  // intensities so isolated fit outliers in the background cannot dominate
  // the histogram.
  Volume normalized;
  Mask foreground;
  try {
    normalized = normalize_contrast(adc_base, params.lo_percentile, params.hi_percentile);
    foreground = prequal::foreground_mask(normalized);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::DegenerateInput) throw Error(ErrorKind::ExtractionFailed, "no foreground: " + std::string(e.what()));
    throw;
  }
  // (3) smoothing, (4) gradients
  const Volume smoothed = prequal::denoise_nlm_adaptive(normalized, prequal::estimate_noise_map(normalized));
  const Volume gradient = sobel_gradient_magnitude(smoothed, params.sobel_scale);

  // (5) low-gradient foreground -> graph segments -> bright candidates
  std::vector<float> fg_grad, fg_int;
  for (std::size_t i = 0; i < foreground.size(); ++i)
    if (foreground[i]) {
      fg_grad.push_back(gradient[i]);
      fg_int.push_back(smoothed[i]);
    }
  double grad_level = params.gradient_threshold;
  double intensity_level = 0.0;
  try {
    if (params.gradient_mode == GradientThresholdMode::Otsu) {
      std::vector<float> pool = fg_grad;
      for (int pass = 0; pass < params.gradient_otsu_passes; ++pass) {
        grad_level = prequal::otsu_threshold(pool);
        std::erase_if(pool, [&](float g) { return g > grad_level; });
      }
    }
    intensity_level = prequal::otsu_threshold(fg_int);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::DegenerateInput) throw Error(ErrorKind::ExtractionFailed, "flat foreground");
    throw;
  }
  Mask region(g, 0);
  std::size_t region_size = 0;
  for (std::size_t i = 0; i < region.size(); ++i)
    if (foreground[i] && gradient[i] <= grad_level) {
      region[i] = 1;
      ++region_size;
    }
  if (region_size == 0) throw Error(ErrorKind::ExtractionFailed, "no low-gradient foreground");
  const SegmentLabels segments =
      felzenszwalb_segment(smoothed, params.k_factor * static_cast<double>(region_size), params.min_segment_size, &region);

  RuleResult result;
  std::vector<std::uint8_t> selected(segments.count + 1, 0);
  for (int l = 0; l < segments.count; ++l)
    if (segments.mean_intensity[l] > intensity_level) {
      selected[l + 1] = 1;
      ++result.candidate_segments;
    }
  if (result.candidate_segments == 0) throw Error(ErrorKind::ExtractionFailed, "no candidate segments");

  Mask candidates(g, 0);
  double cand_sum = 0.0;
  std::size_t cand_n = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (selected[segments.labels[i]] && segments.labels[i] != 0) {
      candidates[i] = 1;
      cand_sum += smoothed[i];
      ++cand_n;
    }
  // Reclaim the partial-volume rim that the gradient threshold removed: grow
  // through high-gradient foreground voxels at least half as bright as the
  // candidates (dark skull sits near zero after normalization).
  const float rim_level = static_cast<float>(0.5 * cand_sum / static_cast<double>(cand_n));
  const Dims& d = g.dims;
  for (int pass = 0; pass < params.morphology_radius + 1; ++pass) {
    std::vector<std::size_t> grow;
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          const std::size_t i = g.index(x, y, z);
          if (candidates[i] || region[i] || !foreground[i] || smoothed[i] < rim_level) continue;
          const bool touches = (x > 0 && candidates[i - 1]) || (x + 1 < d[0] && candidates[i + 1]) ||
                               (y > 0 && candidates[i - d[0]]) || (y + 1 < d[1] && candidates[i + d[0]]) ||
                               (z > 0 && candidates[i - static_cast<std::size_t>(d[0]) * d[1]]) ||
                               (z + 1 < d[2] && candidates[i + static_cast<std::size_t>(d[0]) * d[1]]);
          if (touches) grow.push_back(i);
        }
    if (grow.empty()) break;
    for (const std::size_t i : grow) candidates[i] = 1;
  }

  // (6) morphology
  Mask cleaned = morphology(candidates, MorphologyOp::Open, params.morphology_radius);
  cleaned = morphology(cleaned, MorphologyOp::Close, params.morphology_radius);
  cleaned = morphology(cleaned, MorphologyOp::Fill, 0);

  // (7) MRF regularization
  MrfResult mrf = mrf_regularize(box_blur(cleaned), params.mrf_beta, params.mrf_max_iters);
  result.mrf_energies = std::move(mrf.energies);

  const volgrid::ComponentLabels cc = volgrid::connected_components(mrf.mask, 6);
  if (cc.count() == 0) throw Error(ErrorKind::ExtractionFailed, "empty mask after regularization");
  const double voxel_mm3 = g.voxel_volume_mm3();
  std::int32_t chosen = 1;
  for (std::size_t c = 0; c < cc.count(); ++c) {
    const double vol = static_cast<double>(cc.sizes[c]) * voxel_mm3;
    if (vol >= params.brain_volume_min_mm3 && vol <= params.brain_volume_max_mm3) {
      chosen = static_cast<std::int32_t>(c) + 1;
      break;
    }
  }
  result.brain_volume_mm3 = static_cast<double>(cc.sizes[chosen - 1]) * voxel_mm3;
  if (result.brain_volume_mm3 < params.brain_volume_min_mm3 || result.brain_volume_mm3 > params.brain_volume_max_mm3)
    result.status = RuleStatus::LeakWarning;
  std::vector<std::uint8_t> out(cc.labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cc.labels[i] == chosen ? 1 : 0;
  result.mask = Mask(g, std::move(out));
  if (boundary_coverage(result.mask) > params.leak_boundary_fraction)
    throw Error(ErrorKind::ExtractionFailed, "mask leaks to the volume boundary");
  return result;
}

}  // namespace neuroextract::ruleseg
