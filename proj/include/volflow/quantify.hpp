#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "volflow/volume.hpp"

// Threshold + connected-component ventricle segmentation, normalized volume
// curves, and the per-year mean-absolute-error summary.

namespace volflow {

struct SegmentationMask {
  int64_t d = 0, h = 0, w = 0;
  std::vector<uint8_t> mask;  // 0/1
  std::string method;
  double threshold = 0.0;

  int64_t count() const;
  int64_t index(int64_t id, int64_t ih, int64_t iw) const { return (id * h + ih) * w + iw; }
};

struct QuantifyParams {
  double t_ventricle = 80.0;       // voxels below this (inside the brain) are fluid
  double t_air = 40.0;             // voxels at or below this are air
  double t_skull = 200.0;          // voxels at or above this are bone
  double min_component_frac = 0.01;  // keep components >= this fraction of brain volume
};

// Largest 6-connected component of the (t_air, t_skull) band, holes filled
// (so enclosed fluid counts as brain). Errors when empty.
SegmentationMask brain_mask(const Volume& v, const QuantifyParams& p = {});

// Voxels below t_ventricle inside the brain mask; 6-connected components at or
// above min_component_frac of the brain volume are kept. An empty result is a
// valid zero-volume mask, not an error.
SegmentationMask segment_ventricles(const Volume& v, const SegmentationMask& brain,
                                    const QuantifyParams& p = {});

struct CurvePoint {
  std::string subject;
  double year = 0.0;
  int64_t ventricle_vox = 0;
  int64_t brain0_vox = 0;  // denominator: brain volume at year 0
  double percent = 0.0;    // 100 * ventricle / brain0
};
using VolumeCurve = std::vector<CurvePoint>;

// percent = 100 * ventricle(t) / brain(0) for one subject's series.
VolumeCurve normalized_volume_curve(const std::string& subject,
                                    const std::vector<std::pair<double, int64_t>>& vent_by_year,
                                    int64_t brain0);

struct MaePoint {
  double year = 0.0;
  double mae_percent = 0.0;
  int n_subjects = 0;
};

// MAE(t) = mean over subjects of |pred%(t) - gt%(t)|; keys must match.
std::vector<MaePoint> mae_by_year(const VolumeCurve& pred, const VolumeCurve& gt);

// CSV schemas: curves "subject,year,ventricle_vox,brain0_vox,percent";
// MAE "year,mae_percent,n_subjects".
void write_curves_csv(const std::string& path, const VolumeCurve& curve);
VolumeCurve read_curves_csv(const std::string& path);
void write_mae_csv(const std::string& path, const std::vector<MaePoint>& mae);

// Central slice (axis 0) of a mask over its source volume as a binary PGM.
void write_mask_slice_pgm(const std::string& path, const Volume& v, const SegmentationMask& m);

}  // namespace volflow
