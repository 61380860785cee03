#include "neuroextract/volgrid/resample.hpp"

#include <algorithm>
#include <cmath>

namespace neuroextract::volgrid {
namespace {

struct Taps {
  int base = 0;
  double w[4] = {0, 0, 0, 0};
};

Taps catmull_rom(double u) {
  Taps t;
  const double f = std::floor(u);
  const double s = u - f;
  const double s2 = s * s, s3 = s2 * s;
  t.base = static_cast<int>(f) - 1;
  t.w[0] = 0.5 * (-s3 + 2.0 * s2 - s);
  t.w[1] = 0.5 * (3.0 * s3 - 5.0 * s2 + 2.0);
  t.w[2] = 0.5 * (-3.0 * s3 + 4.0 * s2 + s);
  t.w[3] = 0.5 * (s3 - s2);
  return t;
}

// Resamples along one axis; dims of `in` are `in_dims`, output length `n_out`.
std::vector<float> resample_axis(const std::vector<float>& in, const Dims& in_dims, int axis, int n_out,
                                 double step) {
  Dims out_dims = in_dims;
  out_dims[axis] = n_out;
  const int n_in = in_dims[axis];
  std::vector<Taps> taps(n_out);
  for (int i = 0; i < n_out; ++i) taps[i] = catmull_rom(i * step);

  const std::size_t stride_in = axis == 0 ? 1 : axis == 1 ? in_dims[0] : static_cast<std::size_t>(in_dims[0]) * in_dims[1];
  const std::size_t stride_out = axis == 0 ? 1 : axis == 1 ? out_dims[0] : static_cast<std::size_t>(out_dims[0]) * out_dims[1];
  std::vector<float> out(static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2]);

  // Iterate over every line parallel to `axis`.
  const int a1 = axis == 0 ? 1 : 0;
  const int a2 = axis == 2 ? 1 : 2;
  for (int j2 = 0; j2 < in_dims[a2]; ++j2) {
    for (int j1 = 0; j1 < in_dims[a1]; ++j1) {
      std::array<int, 3> pos{0, 0, 0};
      pos[a1] = j1;
      pos[a2] = j2;
      const std::size_t in0 = (static_cast<std::size_t>(pos[2]) * in_dims[1] + pos[1]) * in_dims[0] + pos[0];
      const std::size_t out0 = (static_cast<std::size_t>(pos[2]) * out_dims[1] + pos[1]) * out_dims[0] + pos[0];
      for (int i = 0; i < n_out; ++i) {
        const Taps& t = taps[i];
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int idx = std::clamp(t.base + k, 0, n_in - 1);
          acc += t.w[k] * in[in0 + idx * stride_in];
        }
        out[out0 + i * stride_out] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

}  // namespace

Volume resample_tricubic(const Volume& v, const Spacing& target_spacing) {
  const Geometry& g = v.geometry();
  g.validate();
  for (double s : target_spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorKind::Geometry, "target spacing must be > 0");

  Geometry out_g = g;
  std::vector<float> data(v.data().begin(), v.data().end());
  Dims cur = g.dims;
  for (int a = 0; a < 3; ++a) {
    const double ratio = target_spacing[a] / g.spacing[a];
    const int n_out = static_cast<int>(std::floor((g.dims[a] - 1) / ratio + 1e-9)) + 1;
    out_g.dims[a] = n_out;
    out_g.spacing[a] = target_spacing[a];
    out_g.affine.col(a).head<3>() *= ratio;
    if (n_out == g.dims[a] && std::abs(ratio - 1.0) < 1e-12) continue;
    data = resample_axis(data, cur, a, n_out, ratio);
    cur[a] = n_out;
  }
  return Volume(out_g, std::move(data));
}

Mask resample_mask(const Mask& m, const Spacing& target_spacing) {
  return Mask::from_threshold(resample_tricubic(m.to_volume(), target_spacing), 0.5f);
}

}  // namespace neuroextract::volgrid
