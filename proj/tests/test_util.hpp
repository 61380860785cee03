#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "neuroextract/volgrid/volume.hpp"

namespace testutil {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("neuroextract_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline neuroextract::volgrid::Geometry grid(int nx, int ny, int nz, double s = 1.0) {
  return neuroextract::volgrid::Geometry::with_spacing({nx, ny, nz}, {s, s, s});
}

inline neuroextract::volgrid::Mask random_mask(const neuroextract::volgrid::Geometry& g, double p,
                                               std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  neuroextract::volgrid::Mask m(g);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = b(rng) ? 1 : 0;
  return m;
}

inline neuroextract::volgrid::Volume random_volume(const neuroextract::volgrid::Geometry& g, std::mt19937_64& rng,
                                                   double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  neuroextract::volgrid::Volume v(g);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(u(rng));
  return v;
}

// Filled ellipsoid mask centred in the grid, semi-axes in voxels.
inline neuroextract::volgrid::Mask ellipsoid(const neuroextract::volgrid::Geometry& g, double ax, double ay,
                                             double az) {
  neuroextract::volgrid::Mask m(g);
  const auto& d = g.dims;
  const double cx = (d[0] - 1) / 2.0, cy = (d[1] - 1) / 2.0, cz = (d[2] - 1) / 2.0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const double q = (x - cx) * (x - cx) / (ax * ax) + (y - cy) * (y - cy) / (ay * ay) +
                         (z - cz) * (z - cz) / (az * az);
        m.at(x, y, z) = q <= 1.0 ? 1 : 0;
      }
  return m;
}

}  // namespace testutil
