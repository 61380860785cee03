#include "neuroextract/volgrid/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <string>

namespace neuroextract::volgrid {
namespace {

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

enum : std::int16_t { kUInt8 = 2, kInt16 = 4, kFloat32 = 16 };

bool has_gz_suffix(const std::filesystem::path& path) {
  const std::string s = path.string();
  return s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::Io, "no such file: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<unsigned char> bytes;
  unsigned char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw Error(ErrorKind::Io, "read error in " + path.string());
  return bytes;
}

class HeaderReader {
 public:
  HeaderReader(const unsigned char* p, bool swap) : p_(p), swap_(swap) {}

  template <typename T>
  T get(int offset) const {
    T v;
    std::memcpy(&v, p_ + offset, sizeof(T));
    if (swap_) {
      auto* b = reinterpret_cast<unsigned char*>(&v);
      std::reverse(b, b + sizeof(T));
    }
    return v;
  }

 private:
  const unsigned char* p_;
  bool swap_;
};

template <typename T>
T swap_if(T v, bool swap) {
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

Eigen::Matrix4d qform_affine(const HeaderReader& h, const Spacing& spacing) {
  const double b = h.get<float>(256), c = h.get<float>(260), d = h.get<float>(264);
  const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
  double qfac = h.get<float>(76);
  if (qfac == 0.0) qfac = 1.0;
  Eigen::Matrix3d r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r * Eigen::Vector3d(spacing[0], spacing[1], qfac * spacing[2]).asDiagonal();
  m(0, 3) = h.get<float>(268);
  m(1, 3) = h.get<float>(272);
  m(2, 3) = h.get<float>(276);
  return m;
}

template <typename T>
void put(unsigned char* hdr, int offset, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  std::memcpy(hdr + offset, &v, sizeof(T));
}

}  // namespace

Volume read_nifti(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = slurp(path);
  if (bytes.size() < kHeaderSize) throw Error(ErrorKind::Format, "file too short for a NIfTI-1 header: " + path.string());

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    if (swap_if(sizeof_hdr, true) != kHeaderSize)
      throw Error(ErrorKind::Format, "bad sizeof_hdr in " + path.string());
    swap = true;
  }
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
    throw Error(ErrorKind::Format, "bad NIfTI-1 magic in " + path.string());

  const HeaderReader h(bytes.data(), swap);
  const int ndim = h.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw Error(ErrorKind::Dimension, "dim[0] out of range in " + path.string());
  Dims dims{1, 1, 1};
  Spacing spacing{1.0, 1.0, 1.0};
  for (int a = 0; a < ndim; ++a) {
    const int n = h.get<std::int16_t>(42 + 2 * a);
    if (n < 1) throw Error(ErrorKind::Dimension, "non-positive dimension in " + path.string());
    if (a < 3) {
      dims[a] = n;
      const double px = std::abs(h.get<float>(80 + 4 * a));
      spacing[a] = px > 0.0 && std::isfinite(px) ? px : 1.0;
    } else if (n != 1) {
      throw Error(ErrorKind::Dimension, "only 3D volumes are supported (trailing dimension " + std::to_string(a + 1) +
                                            " = " + std::to_string(n) + ")");
    }
  }

  const std::int16_t datatype = h.get<std::int16_t>(70);
  std::size_t bytes_per_voxel = 0;
  switch (datatype) {
    case kUInt8: bytes_per_voxel = 1; break;
    case kInt16: bytes_per_voxel = 2; break;
    case kFloat32: bytes_per_voxel = 4; break;
    default: throw Error(ErrorKind::Unsupported, "unsupported NIfTI datatype " + std::to_string(datatype));
  }

  const double vox_offset = h.get<float>(108);
  const std::size_t offset = static_cast<std::size_t>(std::max<double>(vox_offset, kHeaderSize));
  const std::size_t count = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (bytes.size() < offset + count * bytes_per_voxel)
    throw Error(ErrorKind::Format, "truncated voxel data in " + path.string());

  double slope = h.get<float>(112);
  double inter = h.get<float>(116);
  const bool scaled = std::isfinite(slope) && slope != 0.0 && (slope != 1.0 || inter != 0.0);
  if (!std::isfinite(inter)) inter = 0.0;

  std::vector<float> data(count);
  const unsigned char* src = bytes.data() + offset;
  for (std::size_t i = 0; i < count; ++i) {
    double raw = 0.0;
    switch (datatype) {
      case kUInt8: raw = src[i]; break;
      case kInt16: {
        std::int16_t v;
        std::memcpy(&v, src + 2 * i, 2);
        raw = swap_if(v, swap);
        break;
      }
      case kFloat32: {
        float v;
        std::memcpy(&v, src + 4 * i, 4);
        raw = swap_if(v, swap);
        break;
      }
    }
    data[i] = static_cast<float>(scaled ? raw * slope + inter : raw);
  }

  Geometry g;
  g.dims = dims;
  g.spacing = spacing;
  const int sform_code = h.get<std::int16_t>(254);
  const int qform_code = h.get<std::int16_t>(252);
  if (sform_code > 0) {
    g.affine = Eigen::Matrix4d::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) g.affine(r, c) = h.get<float>(280 + 16 * r + 4 * c);
  } else if (qform_code > 0) {
    g.affine = qform_affine(h, spacing);
  } else {
    g = Geometry::with_spacing(dims, spacing);
  }
  return Volume(g, std::move(data));
}

void write_nifti(const Volume& v, const std::filesystem::path& path, std::string_view description) {
  const Geometry& g = v.geometry();
  unsigned char hdr[kDataOffset] = {};
  put<std::int32_t>(hdr, 0, kHeaderSize);
  put<std::int16_t>(hdr, 40, 3);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(hdr, 42 + 2 * a, static_cast<std::int16_t>(g.dims[a]));
  for (int a = 3; a < 7; ++a) put<std::int16_t>(hdr, 42 + 2 * a, 1);
  put<std::int16_t>(hdr, 70, kFloat32);
  put<std::int16_t>(hdr, 72, 32);
  put<float>(hdr, 76, 1.0f);
  for (int a = 0; a < 3; ++a) put<float>(hdr, 80 + 4 * a, static_cast<float>(g.spacing[a]));
  put<float>(hdr, 108, static_cast<float>(kDataOffset));
  put<float>(hdr, 112, 1.0f);
  put<float>(hdr, 116, 0.0f);
  hdr[123] = 2 | 8;  // mm, seconds
  put<std::int16_t>(hdr, 252, 0);
  put<std::int16_t>(hdr, 254, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(hdr, 280 + 16 * r + 4 * c, static_cast<float>(g.affine(r, c)));
  std::memcpy(hdr + 344, "n+1\0", 4);
  std::memcpy(hdr + 148, description.data(), std::min<std::size_t>(description.size(), 79));

  std::vector<unsigned char> payload(v.size() * 4);
  std::memcpy(payload.data(), v.data().data(), payload.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < payload.size(); i += 4) std::reverse(payload.begin() + i, payload.begin() + i + 4);
  }

  const std::string fname = path.string();
  gzFile f = gzopen(fname.c_str(), has_gz_suffix(path) ? "wb1" : "wbT");
  if (f == nullptr) throw Error(ErrorKind::Io, "cannot open " + fname + " for writing");
  bool ok = gzwrite(f, hdr, kDataOffset) == kDataOffset;
  std::size_t done = 0;
  while (ok && done < payload.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(payload.size() - done, 1u << 24));
    ok = gzwrite(f, payload.data() + done, chunk) == static_cast<int>(chunk);
    done += chunk;
  }
  ok = (gzclose(f) == Z_OK) && ok;
  if (!ok) throw Error(ErrorKind::Io, "write failed for " + fname);
}

void write_mask(const Mask& m, const std::filesystem::path& path, std::string_view description) {
  write_nifti(m.to_volume(), path, description);
}

Mask read_mask(const std::filesystem::path& path) { return Mask::from_threshold(read_nifti(path), 0.5f); }

}  // namespace neuroextract::volgrid
