#include "neuroextract/volgrid/slice.hpp"

#include <string>

namespace neuroextract::volgrid {
namespace {

void check_axis_index(const Dims& dims, int axis, int index) {
  if (axis < 0 || axis > 2) throw Error(ErrorKind::Bounds, "axis must be 0, 1 or 2");
  if (index < 0 || index >= dims[axis])
    throw Error(ErrorKind::Bounds, "slice index " + std::to_string(index) + " outside [0, " +
                                       std::to_string(dims[axis]) + ")");
}

// Maps in-plane (u, w) of a slice to the voxel linear index.
struct SliceAddress {
  std::size_t origin = 0;
  std::size_t du = 0;
  std::size_t dw = 0;
};

SliceAddress address(const Dims& d, int axis, int index) {
  const std::size_t sx = 1, sy = d[0], sz = static_cast<std::size_t>(d[0]) * d[1];
  switch (axis) {
    case 0: return {index * sx, sy, sz};
    case 1: return {index * sy, sx, sz};
    default: return {index * sz, sx, sy};
  }
}

}  // namespace

std::array<int, 2> slice_shape(const Dims& dims, int axis) {
  switch (axis) {
    case 0: return {dims[1], dims[2]};
    case 1: return {dims[0], dims[2]};
    case 2: return {dims[0], dims[1]};
  }
  throw Error(ErrorKind::Bounds, "axis must be 0, 1 or 2");
}

Image2D extract_slice(const Volume& v, int axis, int index) {
  check_axis_index(v.dims(), axis, index);
  const auto [w, h] = slice_shape(v.dims(), axis);
  const SliceAddress a = address(v.dims(), axis, index);
  Image2D img(w, h);
  img.axis = axis;
  img.index = index;
  const auto src = v.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = src[a.origin + x * a.du + y * a.dw];
  return img;
}

Image2D extract_slice(const Mask& m, int axis, int index) {
  check_axis_index(m.dims(), axis, index);
  const auto [w, h] = slice_shape(m.dims(), axis);
  const SliceAddress a = address(m.dims(), axis, index);
  Image2D img(w, h);
  img.axis = axis;
  img.index = index;
  const auto src = m.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = src[a.origin + x * a.du + y * a.dw];
  return img;
}

void insert_slice_into(Volume& v, int axis, int index, const Image2D& img) {
  check_axis_index(v.dims(), axis, index);
  const auto [w, h] = slice_shape(v.dims(), axis);
  if (img.width != w || img.height != h || img.data.size() != static_cast<std::size_t>(w) * h)
    throw Error(ErrorKind::Shape, "slice is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                      ", expected " + std::to_string(w) + "x" + std::to_string(h));
  const SliceAddress a = address(v.dims(), axis, index);
  auto dst = v.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) dst[a.origin + x * a.du + y * a.dw] = img.at(x, y);
}

Volume insert_slice(const Volume& v, int axis, int index, const Image2D& img) {
  Volume out = v;
  insert_slice_into(out, axis, index, img);
  return out;
}

}  // namespace neuroextract::volgrid
