#include "neuroextract/volgrid/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/LU>

namespace neuroextract::volgrid {

Geometry Geometry::with_spacing(Dims dims, Spacing spacing) {
  Geometry g;
  g.dims = dims;
  g.spacing = spacing;
  g.affine = Eigen::Matrix4d::Identity();
  for (int a = 0; a < 3; ++a) g.affine(a, a) = spacing[a];
  return g;
}

void Geometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1)
      throw Error(ErrorKind::Geometry, "dimension " + std::to_string(a) + " must be >= 1");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw Error(ErrorKind::Geometry, "spacing " + std::to_string(a) + " must be > 0");
  }
  const double det = affine.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12)
    throw Error(ErrorKind::Geometry, "affine has a singular 3x3 block");
}

bool Geometry::same_grid(const Geometry& other, double affine_tol) const {
  if (dims != other.dims) return false;
  for (int a = 0; a < 3; ++a)
    if (std::abs(spacing[a] - other.spacing[a]) > affine_tol * std::max(1.0, spacing[a])) return false;
  return (affine - other.affine).cwiseAbs().maxCoeff() <= affine_tol * std::max(1.0, affine.cwiseAbs().maxCoeff());
}

Volume::Volume(Geometry geometry, float fill) : geometry_(std::move(geometry)) {
  geometry_.validate();
  data_.assign(geometry_.voxel_count(), fill);
}

Volume::Volume(Geometry geometry, std::vector<float> data)
    : geometry_(std::move(geometry)), data_(std::move(data)) {
  geometry_.validate();
  if (data_.size() != geometry_.voxel_count())
    throw Error(ErrorKind::Shape, "volume data length " + std::to_string(data_.size()) +
                                      " does not match dims (" + std::to_string(geometry_.voxel_count()) + ")");
}

Mask::Mask(Geometry geometry, std::uint8_t fill) : geometry_(std::move(geometry)) {
  geometry_.validate();
  if (fill > 1) throw Error(ErrorKind::Domain, "mask fill must be 0 or 1");
  data_.assign(geometry_.voxel_count(), fill);
}

Mask::Mask(Geometry geometry, std::vector<std::uint8_t> data)
    : geometry_(std::move(geometry)), data_(std::move(data)) {
  geometry_.validate();
  if (data_.size() != geometry_.voxel_count())
    throw Error(ErrorKind::Shape, "mask data length does not match dims");
  if (std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v > 1; }))
    throw Error(ErrorKind::Domain, "mask values must be 0 or 1");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

Volume Mask::to_volume() const {
  std::vector<float> v(data_.begin(), data_.end());
  return Volume(geometry_, std::move(v));
}

Mask Mask::from_threshold(const Volume& v, float threshold) {
  std::vector<std::uint8_t> out(v.size());
  const auto src = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] > threshold ? 1 : 0;
  return Mask(v.geometry(), std::move(out));
}

}  // namespace neuroextract::volgrid
