#pragma once

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::volgrid {

/// In-plane shape (width, height) of slices orthogonal to `axis`.
std::array<int, 2> slice_shape(const Dims& dims, int axis);

/// Orthogonal slice. Axis 0 yields (ny, nz), axis 1 (nx, nz), axis 2 (nx, ny).
Image2D extract_slice(const Volume& v, int axis, int index);
/// Mask slice as 0/1 floats.
Image2D extract_slice(const Mask& m, int axis, int index);

/// Copy of `v` with one slice replaced.
Volume insert_slice(const Volume& v, int axis, int index, const Image2D& img);

/// In-place variant used when reassembling whole volumes slice by slice.
void insert_slice_into(Volume& v, int axis, int index, const Image2D& img);

}  // namespace neuroextract::volgrid
