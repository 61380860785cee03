#pragma once

#include <cstdint>
#include <vector>

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::volgrid {

struct ComponentLabels {
  Geometry geometry;
  /// 0 for background, 1..K for components, ordered by descending size.
  std::vector<std::int32_t> labels;
  /// sizes[k] is the voxel count of label k + 1.
  std::vector<std::size_t> sizes;

  std::size_t count() const { return sizes.size(); }
};

/// Labels foreground components under 6- or 26-connectivity. Equal-sized
/// components are ordered by their smallest member linear index.
ComponentLabels connected_components(const Mask& m, int connectivity = 6);

/// Mask holding only label 1 of connected_components (empty input stays empty).
Mask largest_component(const Mask& m, int connectivity = 6);

}  // namespace neuroextract::volgrid
