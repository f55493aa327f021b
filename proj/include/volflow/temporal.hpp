#pragma once

#include <string>
#include <utility>
#include <vector>

#include "volflow/flow.hpp"

// Latent-space aging predictor: per-level residual conv stacks operating on
// normalized latents, trained by MSE with plain SGD. Levels are independent.

namespace volflow {

struct NormalizationParams {
  double offset = 24.0;  // a
  double range = 48.0;   // b

  void validate() const {
    if (!(range > 0.0)) throw ContractError(cat("normalization: range must be > 0, got ", range));
  }
};

struct TemporalConfig {
  std::vector<int64_t> level_channels;  // filter width = channel law per level
  std::vector<int> level_layers;        // min(2^(l-1), 4) at level l
  bool final_linear = false;  // alternative to the relu-terminated stack
  NormalizationParams norm;

  static TemporalConfig from_flow(const FlowConfig& flow, bool final_linear = false);
  void validate() const;
};

// Elementwise clip((z + a)/b, 0, 1) per level.
template <class T>
LatentPyramid<T> normalize_latent(const LatentPyramid<T>& z, const NormalizationParams& p);
// z = zn*b - a; inputs must lie in [0, 1].
template <class T>
LatentPyramid<T> denormalize_latent(const LatentPyramid<T>& zn, const NormalizationParams& p);

template <class T>
struct TemporalLayer {
  Var<T> w, b;
};

template <class T>
class TemporalModel {
 public:
  // init_sigma > 0 gives small random weights (training); 0 gives the exact
  // identity map.
  TemporalModel(const TemporalConfig& cfg, uint64_t seed, double init_sigma = 0.05);

  const TemporalConfig& config() const { return cfg_; }

  // Residual stack on one normalized level tensor; output shape = input shape.
  Var<T> predict_level(int level, const Var<T>& zn) const;
  // All levels independently; stays in normalized space (not clipped here,
  // callers clip to [0,1] before denormalizing).
  LatentPyramid<T> predict(const LatentPyramid<T>& zn) const;

  std::vector<Var<T>> parameters() const;
  std::vector<Var<T>> level_parameters(int level) const;

 private:
  TemporalConfig cfg_;
  std::vector<std::vector<TemporalLayer<T>>> levels_;
};

struct TemporalTrainResult {
  // [level][epoch] mean squared error over the epoch's pairs.
  std::vector<std::vector<double>> level_losses;
  bool aborted = false;
  std::string abort_reason;
};

// Pairs must already be normalized. Plain SGD, one pair per step, pairs
// reshuffled per epoch; deterministic given the seed.
template <class T>
TemporalTrainResult train_temporal(
    TemporalModel<T>& model,
    const std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>& pairs, double lr,
    int epochs, uint64_t seed);

// Mean squared error per level of predicting tgt from src with `model`
// (clip applied), and of the identity map, over a pair set.
template <class T>
struct TemporalEval {
  std::vector<double> model_mse;     // per level
  std::vector<double> identity_mse;  // per level
  double model_total = 0.0;          // element-weighted over all levels
  double identity_total = 0.0;
};
template <class T>
TemporalEval<T> evaluate_temporal(
    const TemporalModel<T>& model,
    const std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>& pairs);

// Checkpoint ("VFTP"): magic, version, level count, per-level (layers, width),
// normalization params, final-activation flag, parameters as LE f32.
template <class T>
void save_temporal(const TemporalModel<T>& model, const std::string& path);
template <class T>
TemporalModel<T> load_temporal(const std::string& path);

}  // namespace volflow
