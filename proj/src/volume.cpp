#include "volflow/volume.hpp"

#include <cmath>

#include "volflow/binio.hpp"

namespace volflow {

namespace {
constexpr int64_t kMaxDim = 1 << 24;  // dims beyond this are a corrupt header
}

Volume Volume::make_u8(int64_t d, int64_t h, int64_t w, std::array<double, 3> spacing) {
  Volume v;
  v.dtype = VoxelType::u8;
  v.d = d;
  v.h = h;
  v.w = w;
  v.spacing = spacing;
  v.data_u8.assign(d * h * w, 0);
  v.validate("volume");
  return v;
}

Volume Volume::make_i16(int64_t d, int64_t h, int64_t w, std::array<double, 3> spacing) {
  Volume v;
  v.dtype = VoxelType::i16;
  v.d = d;
  v.h = h;
  v.w = w;
  v.spacing = spacing;
  v.data_i16.assign(d * h * w, 0);
  v.validate("volume");
  return v;
}

Volume Volume::make_f32(int64_t d, int64_t h, int64_t w, std::array<double, 3> spacing) {
  Volume v;
  v.dtype = VoxelType::f32;
  v.d = d;
  v.h = h;
  v.w = w;
  v.spacing = spacing;
  v.data_f32.assign(d * h * w, 0.0f);
  v.validate("volume");
  return v;
}

void Volume::validate(const char* what) const {
  if (d < 1 || h < 1 || w < 1)
    throw ContractError(cat(what, ": dims must be >= 1, got (", d, ",", h, ",", w, ")"));
  for (double s : spacing)
    if (!(s > 0.0)) throw ContractError(cat(what, ": voxel spacing must be > 0, got ", s));
  const size_t n = static_cast<size_t>(count());
  const size_t have = dtype == VoxelType::u8   ? data_u8.size()
                      : dtype == VoxelType::i16 ? data_i16.size()
                                                : data_f32.size();
  if (have != n)
    throw ContractError(cat(what, ": payload size ", have, " does not match dims (", d, ",",
                            h, ",", w, ")"));
}

void write_volume(const std::string& path, const Volume& v) {
  v.validate("write_volume");
  auto os = binio::open_out(path);
  binio::put_bytes(os, "VVOL", 4);
  binio::put_le<uint32_t>(os, 1);
  binio::put_le<uint8_t>(os, static_cast<uint8_t>(v.dtype));
  binio::put_le<uint8_t>(os, 0);
  binio::put_le<uint8_t>(os, 0);
  binio::put_le<uint8_t>(os, 0);
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(v.d));
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(v.h));
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(v.w));
  for (double s : v.spacing) binio::put_f64(os, s);
  switch (v.dtype) {
    case VoxelType::u8:
      binio::put_bytes(os, v.data_u8.data(), v.data_u8.size());
      break;
    case VoxelType::i16:
      for (int16_t x : v.data_i16) binio::put_le<uint16_t>(os, static_cast<uint16_t>(x));
      break;
    case VoxelType::f32:
      for (float x : v.data_f32) binio::put_f32(os, x);
      break;
  }
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

Volume read_volume(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "VVOL", path);
  uint32_t version = 0;
  uint8_t dtype = 0, pad0 = 0, pad1 = 0, pad2 = 0;
  uint32_t dims[3] = {0, 0, 0};
  if (!binio::get_le(is, &version) || !binio::get_le(is, &dtype) || !binio::get_le(is, &pad0) ||
      !binio::get_le(is, &pad1) || !binio::get_le(is, &pad2) || !binio::get_le(is, &dims[0]) ||
      !binio::get_le(is, &dims[1]) || !binio::get_le(is, &dims[2]))
    throw IoError(cat("truncated header in '", path, "'"));
  if (version != 1) throw IoError(cat("unsupported VVOL version ", version, " in '", path, "'"));
  if (dtype > 2) throw IoError(cat("unknown voxel type ", int(dtype), " in '", path, "'"));
  for (uint32_t dim : dims)
    if (dim == 0 || dim > kMaxDim)
      throw IoError(cat("dim overflow in '", path, "': ", dim, " outside [1, ", kMaxDim, "]"));
  Volume v;
  v.dtype = static_cast<VoxelType>(dtype);
  v.d = dims[0];
  v.h = dims[1];
  v.w = dims[2];
  for (double& s : v.spacing) {
    if (!binio::get_f64(is, &s)) throw IoError(cat("truncated header in '", path, "'"));
    if (!(s > 0.0)) throw IoError(cat("non-positive spacing in '", path, "'"));
  }
  const int64_t n = v.count();
  switch (v.dtype) {
    case VoxelType::u8:
      v.data_u8.resize(n);
      if (!binio::get_bytes(is, v.data_u8.data(), n))
        throw IoError(cat("truncated payload in '", path, "'"));
      break;
    case VoxelType::i16:
      v.data_i16.resize(n);
      for (auto& x : v.data_i16) {
        uint16_t u;
        if (!binio::get_le(is, &u)) throw IoError(cat("truncated payload in '", path, "'"));
        x = static_cast<int16_t>(u);
      }
      break;
    case VoxelType::f32:
      v.data_f32.resize(n);
      for (auto& x : v.data_f32) {
        if (!binio::get_f32(is, &x)) throw IoError(cat("truncated payload in '", path, "'"));
        if (!std::isfinite(x)) throw IoError(cat("non-finite voxel in '", path, "'"));
      }
      break;
  }
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0)
    throw IoError(cat("trailing bytes after payload in '", path, "'"));
  return v;
}

}  // namespace volflow
