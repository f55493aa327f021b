#pragma once

#include <string>
#include <vector>

#include "volflow/temporal.hpp"
#include "volflow/volume.hpp"

// The aging step operator: encode -> normalize -> predict -> clip ->
// denormalize -> decode, and its N-step recursion. The recursive
// (decode/re-encode each step) path is the reference semantics; the
// latent-only telescoped path is evaluated alongside and the per-step volume
// discrepancy reported.

namespace volflow {

template <class T>
struct ForecastStepRecord {
  int index = 0;
  Var<T> volume;           // real-valued model-domain volume
  LatentPyramid<T> latents;  // raw latents this volume decodes from
  double telescoped_max_abs = 0.0;  // |recursive - telescoped| per voxel, max
};

template <class T>
struct ForecastResult {
  std::vector<ForecastStepRecord<T>> steps;  // N+1 records; step 0 = reconstruction
  std::string flow_id, temporal_id;
  uint64_t seed = 0;
};

// One aging interval.
template <class T>
Var<T> forecast_step(const Var<T>& x, FlowModel<T>& flow, const TemporalModel<T>& temporal);

template <class T>
ForecastResult<T> forecast_n(const Var<T>& x, int n, FlowModel<T>& flow,
                             const TemporalModel<T>& temporal);

// Map a model-domain volume (values near [-0.5, 0.5)) back to display bytes:
// round((x + 0.5) * 256 - 0.5) clamped to [0, 255].
Volume to_u8_volume(const std::vector<float>& data, int64_t r);
Volume to_u8_volume(const std::vector<double>& data, int64_t r);

// Center-of-bin model-domain values for a u8 volume at full depth.
template <class T>
Var<T> volume_to_model_input(const Volume& v, int64_t channels = 1);

}  // namespace volflow
