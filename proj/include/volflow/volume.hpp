#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "volflow/common.hpp"

// Single-channel cubic-or-rectangular voxel grids and the "VVOL" on-disk
// format. Voxel order is depth-major, then height, then width.

namespace volflow {

enum class VoxelType : uint8_t { u8 = 0, i16 = 1, f32 = 2 };

struct Volume {
  VoxelType dtype = VoxelType::u8;
  int64_t d = 0, h = 0, w = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per axis
  std::vector<uint8_t> data_u8;
  std::vector<int16_t> data_i16;
  std::vector<float> data_f32;

  int64_t count() const { return d * h * w; }
  int64_t index(int64_t id, int64_t ih, int64_t iw) const { return (id * h + ih) * w + iw; }

  static Volume make_u8(int64_t d, int64_t h, int64_t w,
                        std::array<double, 3> spacing = {1.0, 1.0, 1.0});
  static Volume make_i16(int64_t d, int64_t h, int64_t w,
                         std::array<double, 3> spacing = {1.0, 1.0, 1.0});
  static Volume make_f32(int64_t d, int64_t h, int64_t w,
                         std::array<double, 3> spacing = {1.0, 1.0, 1.0});

  void validate(const char* what) const;
};

// Bit-exact round trip. Distinct failures: bad magic, truncation, dim
// overflow (each a distinct IoError message prefix).
Volume read_volume(const std::string& path);
void write_volume(const std::string& path, const Volume& v);

}  // namespace volflow
