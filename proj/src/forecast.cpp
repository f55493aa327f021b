#include "volflow/forecast.hpp"

#include <algorithm>
#include <cmath>

#include "volflow/trainer.hpp"

namespace volflow {

namespace {

template <class T>
LatentPyramid<T> advance_latents(const LatentPyramid<T>& z, const TemporalModel<T>& temporal) {
  const auto& norm = temporal.config().norm;
  auto zn = normalize_latent(z, norm);
  auto zp = temporal.predict(zn);
  LatentPyramid<T> clipped;
  for (const auto& lv : zp.levels) clipped.levels.push_back(ops::clip(lv, 0.0, 1.0));
  return denormalize_latent(clipped, norm);
}

template <class T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace

template <class T>
Var<T> forecast_step(const Var<T>& x, FlowModel<T>& flow, const TemporalModel<T>& temporal) {
  NoGradGuard ng;
  Var<T> out;
  try {
    auto [z, logdet] = flow.encode(x);
    (void)logdet;
    auto zp = advance_latents(z, temporal);
    out = flow.decode(zp);
  } catch (const ContractError& e) {
    throw ContractError(cat("forecast step: ", e.what()));
  }
  return out;
}

template <class T>
ForecastResult<T> forecast_n(const Var<T>& x, int n, FlowModel<T>& flow,
                             const TemporalModel<T>& temporal) {
  if (n < 0) throw ContractError(cat("forecast_n: steps must be >= 0, got ", n));
  NoGradGuard ng;
  ForecastResult<T> out;

  auto [z0, logdet0] = flow.encode(x);
  (void)logdet0;

  ForecastStepRecord<T> rec0;
  rec0.index = 0;
  rec0.latents = z0;
  rec0.volume = flow.decode(z0);
  out.steps.push_back(rec0);

  // The recursion applies the step operator to the original input, then to
  // each successive output; the step-0 reconstruction is reporting only.
  LatentPyramid<T> telescoped = z0;
  Var<T> current = x;
  for (int step = 1; step <= n; ++step) {
    // Reference path: full decode / re-encode each step.
    auto [z, ld] = flow.encode(current);
    (void)ld;
    auto zp = advance_latents(z, temporal);
    Var<T> vol = flow.decode(zp);
    // Telescoped path: stay in latent space, decode only for the comparison.
    telescoped = advance_latents(telescoped, temporal);
    Var<T> tel_vol = flow.decode(telescoped);

    ForecastStepRecord<T> rec;
    rec.index = step;
    rec.latents = zp;
    rec.volume = vol;
    rec.telescoped_max_abs = max_abs_diff(vol.value(), tel_vol.value());
    out.steps.push_back(rec);
    current = vol;
  }
  return out;
}

Volume to_u8_volume(const std::vector<float>& data, int64_t r) {
  Volume v = Volume::make_u8(r, r, r);
  for (size_t i = 0; i < data.size(); ++i) {
    const double raw = (static_cast<double>(data[i]) + 0.5) * 256.0 - 0.5;
    v.data_u8[i] = static_cast<uint8_t>(std::clamp<int64_t>(
        static_cast<int64_t>(std::floor(raw + 0.5)), 0, 255));
  }
  return v;
}

Volume to_u8_volume(const std::vector<double>& data, int64_t r) {
  std::vector<float> f(data.begin(), data.end());
  return to_u8_volume(f, r);
}

template <class T>
Var<T> volume_to_model_input(const Volume& v, int64_t channels) {
  if (v.dtype != VoxelType::u8)
    throw ContractError("volume_to_model_input: expected an 8-bit volume");
  if (channels != 1) throw ContractError("volume_to_model_input: only 1 channel supported");
  return Var<T>::leaf(Shape(v.d, v.h, v.w, 1), dequantize_center<T>(v, 8));
}

#define VOLFLOW_INST(T)                                                                    \
  template Var<T> forecast_step<T>(const Var<T>&, FlowModel<T>&, const TemporalModel<T>&); \
  template ForecastResult<T> forecast_n<T>(const Var<T>&, int, FlowModel<T>&,              \
                                           const TemporalModel<T>&);                       \
  template Var<T> volume_to_model_input<T>(const Volume&, int64_t);
VOLFLOW_INST(float)
VOLFLOW_INST(double)
#undef VOLFLOW_INST

}  // namespace volflow
