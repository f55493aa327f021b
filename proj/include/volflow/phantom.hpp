#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "volflow/ingest.hpp"
#include "volflow/volume.hpp"

// Synthetic longitudinal head phantoms: a spherical skull shell, textured
// brain, and a centered ellipsoidal ventricle whose semi-axes grow
// multiplicatively per year with analytically known volume.

namespace volflow {

struct PhantomSpec {
  int64_t resolution = 32;
  double skull_outer = 15.0;  // voxels
  double skull_inner = 13.0;
  double vent_a = 4.0, vent_b = 3.5, vent_c = 3.0;  // base semi-axes, voxels
  uint8_t skull_intensity = 255;
  uint8_t brain_intensity = 150;
  uint8_t ventricle_intensity = 30;
  double noise_sigma = 6.0;        // brain texture, fixed per subject
  double growth_per_year = 1.026;  // multiplicative semi-axis growth g
  double growth_jitter = 0.0;      // lognormal sigma on per-subject g
  double shape_jitter = 0.04;      // lognormal sigma on per-subject semi-axes
  double accel_year = -1.0;        // if >= 0, growth accelerates from this year
  double accel_factor = 1.0;

  // Scale the default geometry to a resolution.
  static PhantomSpec for_resolution(int64_t r);
  void validate() const;
};

struct SubjectSample {
  double age = 0.0;
  Volume volume;               // windowed u8
  double analytic_ventricle;   // voxels
  double analytic_brain;       // voxels
};

struct SubjectSeries {
  std::string subject;
  std::vector<SubjectSample> samples;
};

// Deterministic given (spec, subject_seed). Semi-axes at year t are
// base * g^t (with optional acceleration); the analytic ellipsoid volume is
// (4/3) pi a b c. Errors if the ventricle no longer fits inside the brain.
SubjectSeries gen_subject(const PhantomSpec& spec, uint64_t subject_seed, int years,
                          const std::string& subject_id);

struct PhantomDataset {
  std::string train_manifest;  // paths to written manifest files
  std::string test_manifest;
  std::string truth_csv;
};

// Writes VVOL volumes plus train/test manifests (disjoint subject ids, the
// last n_test subjects form the test split) and a ground-truth CSV
// (subject, year, analytic_ventricle_vox, analytic_brain_vox).
PhantomDataset gen_dataset(const PhantomSpec& spec, int n_subjects, int n_test, int years,
                           uint64_t seed, const std::string& out_dir);

}  // namespace volflow
