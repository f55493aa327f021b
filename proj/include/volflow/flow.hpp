#pragma once

#include <string>
#include <utility>
#include <vector>

#include "volflow/ops.hpp"
#include "volflow/rng.hpp"

// Invertible multiscale volumetric generator: per level, squeeze then K steps
// of (per-channel affine -> invertible 1x1x1 channel mix -> affine coupling),
// splitting off half the channels with a learned prior at every level below
// the top. Exact log-likelihood = prior log-density + accumulated log-det.

namespace volflow {

struct FlowConfig {
  int64_t resolution = 32;  // cubic edge length R
  int64_t channels = 1;     // input channels C
  int levels = 3;           // L
  int depth = 2;            // K steps per level
  int width = 64;           // coupling net filter width
  bool learn_top = true;

  void validate() const;
  bool operator==(const FlowConfig&) const = default;
};

// Shape law: level l < L has spatial R/2^l and C*4^l channels; the top level
// has spatial R/2^L and 2*C*4^L channels. Total elements always R^3*C.
std::vector<Shape> pyramid_level_shapes(const FlowConfig& cfg);

template <class T>
struct LatentPyramid {
  std::vector<Var<T>> levels;
};

template <class T>
struct CouplingNet {
  Var<T> w1, b1, w2, b2, w3, b3;
};

template <class T>
struct FlowStep {
  Var<T> actnorm_scale, actnorm_bias;  // (1,1,1,C)
  Var<T> mix;                          // (1,1,C,C), row-major
  CouplingNet<T> net;
};

template <class T>
struct FlowLevelParams {
  std::vector<FlowStep<T>> steps;
  Var<T> prior_w, prior_b;  // split prior below top; top prior at the top
};

template <class T>
class FlowModel {
 public:
  FlowModel(const FlowConfig& cfg, uint64_t seed);

  const FlowConfig& config() const { return cfg_; }

  struct EncodeResult {
    LatentPyramid<T> pyramid;
    Var<T> logdet;      // scalar
    Var<T> prior_logp;  // scalar, sum over levels
  };

  // Full forward pass. With init_actnorm, per-channel scale/bias are set from
  // this batch's activation statistics (done once, on the first batch of
  // training).
  EncodeResult encode_full(const Var<T>& x, bool init_actnorm = false);

  std::pair<LatentPyramid<T>, double> encode(const Var<T>& x);
  Var<T> decode(const LatentPyramid<T>& z) const;

  // log p(x) = prior log-density + log|det dz/dx| as a graph node (training)
  // or a plain value.
  Var<T> log_likelihood_var(const Var<T>& x);
  double log_likelihood(const Var<T>& x);

  // Draw a pyramid from the learned priors at the given temperature
  // (temperature 0 returns the prior means).
  LatentPyramid<T> sample(double temperature, Rng& rng) const;

  // Trainable leaves in checkpoint order. Handles share storage with the
  // model; optimizers mutate them in place between steps.
  std::vector<Var<T>> parameters() const;

  bool actnorm_initialized() const { return actnorm_initialized_; }
  void set_actnorm_initialized(bool v) { actnorm_initialized_ = v; }

  std::vector<FlowLevelParams<T>>& levels() { return levels_; }
  const std::vector<FlowLevelParams<T>>& levels() const { return levels_; }

 private:
  void validate_pyramid(const LatentPyramid<T>& z) const;

  FlowConfig cfg_;
  std::vector<FlowLevelParams<T>> levels_;
  bool actnorm_initialized_ = false;
};

// Checkpoint file ("VFCK"): magic, version, config, actnorm flag, then all
// parameters as little-endian 32-bit floats in parameters() order. Byte-exact
// save/load round trip.
template <class T>
void save_flow(const FlowModel<T>& model, const std::string& path);
template <class T>
FlowModel<T> load_flow(const std::string& path);

// Latent pyramid file ("VFLT"): magic, version, level count, per-level dims,
// then per-level little-endian f32 data.
template <class T>
void save_pyramid(const LatentPyramid<T>& z, const std::string& path);
template <class T>
LatentPyramid<T> load_pyramid(const std::string& path);

}  // namespace volflow
