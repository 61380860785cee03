#include "neuroextract/relaxo/relaxo.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace neuroextract::relaxo {

void DecaySeries::validate() const {
  if (x.size() < 2) throw Error(ErrorKind::Domain, "decay series needs at least two samples");
  if (x.size() != volumes.size())
    throw Error(ErrorKind::Shape, "decay series has " + std::to_string(x.size()) + " positions but " +
                                      std::to_string(volumes.size()) + " volumes");
  for (std::size_t i = 1; i < x.size(); ++i)
    if (!(x[i] > x[i - 1])) throw Error(ErrorKind::Domain, "decay series positions must be strictly increasing");
  for (std::size_t i = 1; i < volumes.size(); ++i)
    if (!volumes[i].geometry().same_grid(volumes[0].geometry()))
      throw Error(ErrorKind::Shape, "decay series volume " + std::to_string(i) + " has a different geometry");
}

std::optional<MonoexpFit> fit_monoexp(std::span<const double> x, std::span<const double> s) {
  if (x.size() != s.size()) throw Error(ErrorKind::Shape, "fit_monoexp: x and s lengths differ");
  if (x.size() < 2) return std::nullopt;
  const double peak = *std::max_element(s.begin(), s.end());
  if (!(peak > 0.0)) return std::nullopt;
  const double eps = 1e-6 * peak;

  double n = 0, sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (s[i] > eps) {
      n += 1;
      sx += x[i];
      sy += std::log(s[i]);
    }
  }
  if (n < 2) return std::nullopt;
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (s[i] > eps) {
      const double dx = x[i] - mx;
      sxx += dx * dx;
      sxy += dx * (std::log(s[i]) - my);
    }
  }
  if (!(sxx > 0.0)) return std::nullopt;
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  return MonoexpFit{std::exp(intercept), std::max(0.0, -slope)};
}

FitMaps fit_series(const DecaySeries& series) {
  series.validate();
  const volgrid::Geometry& g = series.volumes.front().geometry();
  FitMaps out{Volume(g, 0.0f), Volume(g, 0.0f), Mask(g, 0)};
  const std::size_t n = g.voxel_count();
  const std::size_t m = series.x.size();
  std::vector<double> s(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) s[k] = series.volumes[k][i];
    const auto fit = fit_monoexp(series.x, s);
    if (!fit || !std::isfinite(fit->base) || !std::isfinite(fit->rate)) continue;
    out.base[i] = static_cast<float>(fit->base);
    out.rate[i] = static_cast<float>(fit->rate);
    out.valid[i] = 1;
  }
  return out;
}

}  // namespace neuroextract::relaxo
