#pragma once

#include <array>
#include <string>
#include <vector>

#include "volflow/volume.hpp"

// Preprocessing: intensity windowing to bytes, center-of-gravity head
// extraction, mean-pool downsampling, and the line-oriented dataset manifest.

namespace volflow {

// clip(v + 80, 0, 255) per voxel.
Volume window_hu(const Volume& src);

// Intensity-weighted mean index per axis. Errors on an all-zero volume.
std::array<double, 3> center_of_gravity(const Volume& v);

// Cubic crop of edge `size` centered at `center` (rounded to nearest integer,
// ties toward the lower index). Out-of-bounds voxels are zero-filled.
Volume crop_centered(const Volume& v, const std::array<double, 3>& center, int64_t size);

// k x k x k mean pooling; u8 output rounds half up. Dims must divide by k.
Volume downsample(const Volume& v, int64_t k);

struct ManifestEntry {
  std::string subject;
  double age = 0.0;
  std::string path;  // relative to the manifest file's directory
};

struct DatasetManifest {
  std::string split;  // "train" / "test" / free-form tag
  std::vector<ManifestEntry> entries;

  // Entries grouped by subject in first-appearance order.
  std::vector<std::vector<const ManifestEntry*>> by_subject() const;
};

// Format: comments (#) and blank lines ignored; first payload line is
// "split <tag>"; every other line is "subject_id age_years path".
DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& m);

// Ages strictly increasing per subject; referenced files exist and share dims.
// Returns the common dims.
std::array<int64_t, 3> validate_manifest(const DatasetManifest& m, const std::string& manifest_path);

// Resolve an entry path relative to its manifest location.
std::string manifest_relative(const std::string& manifest_path, const std::string& entry_path);

}  // namespace volflow
