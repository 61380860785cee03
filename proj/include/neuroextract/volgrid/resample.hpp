#pragma once

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::volgrid {

/// Default isotropic target grid, millimetres.
inline constexpr double kIsotropicSpacingMm = 0.15;

/// Separable Catmull-Rom resampling onto a grid with the requested spacing.
/// The first voxel centre stays fixed and the output covers the same physical
/// extent (n_out = floor((n_in - 1) * s_in / s_out) + 1). Samples outside the
/// input support are edge-clamped.
Volume resample_tricubic(const Volume& v, const Spacing& target_spacing);

/// Resamples a mask through the same kernel and re-binarizes at 0.5.
Mask resample_mask(const Mask& m, const Spacing& target_spacing);

}  // namespace neuroextract::volgrid
