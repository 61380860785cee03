#pragma once

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::evalharness {

/// 2|A n B| / (|A| + |B|); two empty masks score 1. Throws Shape when the
/// grids differ.
double dice(const volgrid::Mask& a, const volgrid::Mask& b);

}  // namespace neuroextract::evalharness
