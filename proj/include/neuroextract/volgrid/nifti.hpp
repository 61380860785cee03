#pragma once

#include <filesystem>
#include <string_view>

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::volgrid {

/// Reads a single-file NIfTI-1 volume (.nii or .nii.gz). uint8, int16 and
/// float32 payloads are accepted and returned as float with scl_slope and
/// scl_inter applied. Orientation precedence is sform, then qform, then a
/// diagonal built from pixdim.
Volume read_nifti(const std::filesystem::path& path);

/// Writes little-endian NIfTI-1 with float32 data and the sform set from the
/// volume affine. A ".gz" suffix selects gzip output. `description` goes
/// into the 80-byte descrip field (truncated to 79 characters).
void write_nifti(const Volume& v, const std::filesystem::path& path, std::string_view description = {});

/// Convenience wrappers storing masks as float 0/1.
void write_mask(const Mask& m, const std::filesystem::path& path, std::string_view description = {});
/// Voxels > 0.5 become foreground.
Mask read_mask(const std::filesystem::path& path);

}  // namespace neuroextract::volgrid
