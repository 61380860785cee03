#include "neuroextract/prequal/prequal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace neuroextract::prequal {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

nlohmann::json ratio_json(double v) {
  if (std::isinf(v)) return "inf";
  return v;
}

double ratio_from_json(const nlohmann::json& j) {
  if (j.is_string()) return kInf;
  return j.get<double>();
}

struct Moments {
  double n = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;

  void add(double v) {
    n += 1.0;
    sum += v;
    sum_sq += v * v;
  }
  double mean() const { return n > 0 ? sum / n : 0.0; }
  double variance() const {
    if (n <= 0) return 0.0;
    const double m = mean();
    return std::max(0.0, sum_sq / n - m * m);
  }
};

// Replicate-boundary running box mean along one axis.
void box_mean_axis(std::vector<float>& buf, std::vector<float>& tmp, const volgrid::Dims& d, int axis, int radius) {
  const int n = d[axis];
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d[0] : static_cast<std::size_t>(d[0]) * d[1];
  const int a1 = axis == 0 ? 1 : 0;
  const int a2 = axis == 2 ? 1 : 2;
  const float inv = 1.0f / static_cast<float>(2 * radius + 1);
  tmp.resize(buf.size());
  for (int j2 = 0; j2 < d[a2]; ++j2)
    for (int j1 = 0; j1 < d[a1]; ++j1) {
      std::array<int, 3> p{0, 0, 0};
      p[a1] = j1;
      p[a2] = j2;
      const std::size_t base = (static_cast<std::size_t>(p[2]) * d[1] + p[1]) * d[0] + p[0];
      for (int i = 0; i < n; ++i) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += buf[base + std::clamp(i + k, 0, n - 1) * stride];
        tmp[base + i * stride] = acc * inv;
      }
    }
  buf.swap(tmp);
}

}  // namespace

nlohmann::json to_json(const QAReport& r) {
  return {{"snr", ratio_json(r.snr)},
          {"cnr", ratio_json(r.cnr)},
          {"svnr", ratio_json(r.svnr)},
          {"foreground_voxels", r.foreground_voxels},
          {"otsu_threshold", r.otsu_threshold}};
}

QAReport qa_report_from_json(const nlohmann::json& j) {
  QAReport r;
  r.snr = ratio_from_json(j.at("snr"));
  r.cnr = ratio_from_json(j.at("cnr"));
  r.svnr = ratio_from_json(j.at("svnr"));
  r.foreground_voxels = j.at("foreground_voxels").get<std::size_t>();
  r.otsu_threshold = j.at("otsu_threshold").get<double>();
  return r;
}

double otsu_threshold(std::span<const float> values, int bins) {
  if (bins < 2) throw Error(ErrorKind::Config, "otsu needs at least 2 bins");
  if (values.empty()) throw Error(ErrorKind::DegenerateInput, "otsu on empty input");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw Error(ErrorKind::DegenerateInput, "otsu needs at least two distinct values");

  const double width = (hi - lo) / bins;
  std::vector<double> edges(bins - 1);
  for (int k = 1; k < bins; ++k) edges[k - 1] = lo + k * width;

  std::vector<double> count(bins, 0.0), sum(bins, 0.0);
  for (const float fv : values) {
    const double v = fv;
    // bin = number of edges strictly below v.
    int b = std::clamp(static_cast<int>(std::floor((v - lo) / width)), 0, bins - 1);
    while (b > 0 && edges[b - 1] >= v) --b;
    while (b < bins - 1 && edges[b] < v) ++b;
    count[b] += 1.0;
    sum[b] += v;
  }

  const double total_n = static_cast<double>(values.size());
  double total_s = 0.0;
  for (int b = 0; b < bins; ++b) total_s += sum[b];

  double best = -1.0;
  int best_k = 1;
  double n0 = 0.0, s0 = 0.0;
  for (int k = 1; k < bins; ++k) {
    n0 += count[k - 1];
    s0 += sum[k - 1];
    const double n1 = total_n - n0;
    if (n0 <= 0.0 || n1 <= 0.0) continue;
    const double mu0 = s0 / n0, mu1 = (total_s - s0) / n1;
    const double between = (n0 / total_n) * (n1 / total_n) * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return edges[best_k - 1];
}

Mask foreground_mask(const Volume& v) {
  return Mask::from_threshold(v, static_cast<float>(otsu_threshold(v.data())));
}

QAReport qa_metrics(const Volume& v) {
  QAReport r;
  r.otsu_threshold = otsu_threshold(v.data());
  Moments fg, bg;
  for (const float x : v.data()) {
    if (x > static_cast<float>(r.otsu_threshold))
      fg.add(x);
    else
      bg.add(x);
  }
  r.foreground_voxels = static_cast<std::size_t>(fg.n);
  const double sd_b = std::sqrt(bg.variance());
  if (sd_b > 0.0) {
    r.snr = std::max(0.0, fg.mean() / sd_b);
    r.cnr = std::max(0.0, (fg.mean() - bg.mean()) / sd_b);
    r.svnr = fg.variance() / bg.variance();
  } else {
    r.snr = r.cnr = r.svnr = kInf;
  }
  return r;
}

NoiseMap estimate_noise_map(const Volume& v, int radius) {
  if (radius < 1) throw Error(ErrorKind::Config, "noise radius must be >= 1");
  const volgrid::Geometry& g = v.geometry();
  const volgrid::Dims& d = g.dims;
  const auto src = v.data();

  std::vector<float> residual(v.size());
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double acc = 0.0;
        int n = 0;
        auto take = [&](int xx, int yy, int zz) {
          if (xx < 0 || yy < 0 || zz < 0 || xx >= d[0] || yy >= d[1] || zz >= d[2]) return;
          acc += src[g.index(xx, yy, zz)];
          ++n;
        };
        take(x - 1, y, z);
        take(x + 1, y, z);
        take(x, y - 1, z);
        take(x, y + 1, z);
        take(x, y, z - 1);
        take(x, y, z + 1);
        const std::size_t i = g.index(x, y, z);
        residual[i] = n == 0 ? 0.0f
                             : static_cast<float>(std::abs(std::sqrt(n / (n + 1.0)) * (src[i] - acc / n)));
      }

  Volume sigma(g, 0.0f);
  auto out = sigma.data();
  std::vector<float> window;
  window.reserve(static_cast<std::size_t>(2 * radius + 1) * (2 * radius + 1) * (2 * radius + 1));
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        window.clear();
        for (int zz = std::max(0, z - radius); zz <= std::min(d[2] - 1, z + radius); ++zz)
          for (int yy = std::max(0, y - radius); yy <= std::min(d[1] - 1, y + radius); ++yy) {
            const std::size_t row = g.index(0, yy, zz);
            for (int xx = std::max(0, x - radius); xx <= std::min(d[0] - 1, x + radius); ++xx)
              window.push_back(residual[row + xx]);
          }
        const std::size_t m = window.size() / 2;
        std::nth_element(window.begin(), window.begin() + m, window.end());
        double median = window[m];
        if (window.size() % 2 == 0) {
          const float lower = *std::max_element(window.begin(), window.begin() + m);
          median = 0.5 * (median + lower);
        }
        out[g.index(x, y, z)] = static_cast<float>(1.4826 * median);
      }
  return NoiseMap{std::move(sigma)};
}

Volume denoise_nlm_adaptive(const Volume& v, const NoiseMap& noise, const NlmParams& params) {
  if (params.patch_radius < 1 || params.search_radius < 1)
    throw Error(ErrorKind::Config, "NLM radii must be >= 1");
  if (!v.geometry().same_grid(noise.sigma.geometry()))
    throw Error(ErrorKind::Shape, "noise map geometry does not match volume");

  const volgrid::Geometry& g = v.geometry();
  const volgrid::Dims& d = g.dims;
  const auto src = v.data();
  const auto sig = noise.sigma.data();
  const std::size_t n = v.size();
  const int s = params.search_radius;

  std::vector<double> acc_w(n, 0.0), acc_v(n, 0.0);
  std::vector<float> dist(n), tmp;
  std::vector<float> inv_h2(n), two_sig2(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double h = params.h_factor * sig[i];
    inv_h2[i] = h > 0.0 ? static_cast<float>(1.0 / (h * h)) : 0.0f;
    two_sig2[i] = static_cast<float>(2.0 * sig[i] * sig[i]);
  }

  std::vector<std::size_t> shifted(n);
  for (int oz = -s; oz <= s; ++oz)
    for (int oy = -s; oy <= s; ++oy)
      for (int ox = -s; ox <= s; ++ox) {
        for (int z = 0; z < d[2]; ++z) {
          const int zz = std::clamp(z + oz, 0, d[2] - 1);
          for (int y = 0; y < d[1]; ++y) {
            const int yy = std::clamp(y + oy, 0, d[1] - 1);
            const std::size_t row = g.index(0, y, z);
            const std::size_t row_shift = g.index(0, yy, zz);
            for (int x = 0; x < d[0]; ++x) {
              const std::size_t j = row_shift + std::clamp(x + ox, 0, d[0] - 1);
              shifted[row + x] = j;
              const float diff = src[row + x] - src[j];
              dist[row + x] = diff * diff;
            }
          }
        }
        for (int a = 0; a < 3; ++a) box_mean_axis(dist, tmp, d, a, params.patch_radius);
        for (std::size_t i = 0; i < n; ++i) {
          double w;
          if (inv_h2[i] > 0.0f) {
            const float excess = std::max(0.0f, dist[i] - two_sig2[i]);
            w = std::exp(-static_cast<double>(excess * inv_h2[i]));
          } else {
            w = dist[i] == 0.0f ? 1.0 : 0.0;
          }
          acc_w[i] += w;
          acc_v[i] += w * src[shifted[i]];
        }
      }

  Volume out(g, 0.0f);
  auto dst = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    dst[i] = static_cast<float>(acc_v[i] / acc_w[i]);
  }
  return out;
}

}  // namespace neuroextract::prequal
