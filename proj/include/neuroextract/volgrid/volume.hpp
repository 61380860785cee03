#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "neuroextract/core/error.hpp"

namespace neuroextract::volgrid {

using Dims = std::array<int, 3>;
using Spacing = std::array<double, 3>;

/// Voxel grid shared by volumes, masks and label maps. Data layout is x
/// fastest, then y, then z.
struct Geometry {
  Dims dims{1, 1, 1};
  Spacing spacing{1.0, 1.0, 1.0};
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();

  /// Diagonal voxel-to-world transform built from the spacing.
  static Geometry with_spacing(Dims dims, Spacing spacing);

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

  /// Throws Geometry error when dims/spacing/affine break the invariants.
  void validate() const;

  bool same_grid(const Geometry& other, double affine_tol = 1e-5) const;
};

class Volume {
 public:
  Volume() = default;
  explicit Volume(Geometry geometry, float fill = 0.0f);
  Volume(Geometry geometry, std::vector<float> data);

  const Geometry& geometry() const { return geometry_; }
  const Dims& dims() const { return geometry_.dims; }
  const Spacing& spacing() const { return geometry_.spacing; }
  std::size_t size() const { return data_.size(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  std::vector<float>& storage() { return data_; }

  float at(int x, int y, int z) const { return data_[geometry_.index(x, y, z)]; }
  float& at(int x, int y, int z) { return data_[geometry_.index(x, y, z)]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

 private:
  Geometry geometry_;
  std::vector<float> data_;
};

/// Binary volume; every voxel is 0 or 1.
class Mask {
 public:
  Mask() = default;
  explicit Mask(Geometry geometry, std::uint8_t fill = 0);
  Mask(Geometry geometry, std::vector<std::uint8_t> data);

  const Geometry& geometry() const { return geometry_; }
  const Dims& dims() const { return geometry_.dims; }
  std::size_t size() const { return data_.size(); }

  std::span<const std::uint8_t> data() const { return data_; }
  std::span<std::uint8_t> data() { return data_; }

  std::uint8_t at(int x, int y, int z) const { return data_[geometry_.index(x, y, z)]; }
  std::uint8_t& at(int x, int y, int z) { return data_[geometry_.index(x, y, z)]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  std::uint8_t& operator[](std::size_t i) { return data_[i]; }

  std::size_t count() const;
  Volume to_volume() const;
  /// Voxels strictly greater than `threshold`.
  static Mask from_threshold(const Volume& v, float threshold);

  bool operator==(const Mask& other) const { return data_ == other.data_; }

 private:
  Geometry geometry_;
  std::vector<std::uint8_t> data_;
};

/// One orthogonal slice of a volume. Width runs along the lower of the two
/// remaining axes.
struct Image2D {
  int width = 0;
  int height = 0;
  std::vector<float> data;
  int axis = 2;
  int index = 0;

  Image2D() = default;
  Image2D(int w, int h, float fill = 0.0f) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
};

}  // namespace neuroextract::volgrid
