#pragma once

#include <functional>
#include <string>
#include <vector>

#include "volflow/flow.hpp"
#include "volflow/volume.hpp"

// Likelihood training with the progressive bit-depth curriculum: stages of
// increasing quantization depth, weights carried verbatim between stages, a
// single linear learning-rate warmup at the start of stage 1.

namespace volflow {

struct TrainStage {
  int bits = 8;
  int epochs = 1;
  double lr = 1e-3;
};

struct TrainSchedule {
  std::vector<TrainStage> stages;
  // < 0 selects the default: the reference 100-epoch warmup scaled by this
  // schedule's share of the reference 360 total epochs.
  double warmup_epochs = -1.0;

  void validate() const;
  int total_epochs() const;
  double resolved_warmup() const;
};

// One stage per line: "bits epochs lr"; '#' comments and blank lines ignored.
TrainSchedule parse_schedule(const std::string& text);
TrainSchedule read_schedule_file(const std::string& path);

// floor(v / 2^(8-n)) per voxel; result values lie in [0, 2^n - 1].
Volume quantize_bits(const Volume& v, int bits);

// x = (v + u) / 2^n - 0.5 with u ~ Uniform[0,1) per voxel; output in [-0.5, 0.5).
template <class T>
std::vector<T> dequantize(const Volume& q, int bits, Rng& rng);
// Deterministic variant with u = 0.5 (bin centers); used wherever an encode
// must be reproducible (latent pairs, forecasting).
template <class T>
std::vector<T> dequantize_center(const Volume& q, int bits);

// nll is in nats for one volume of `dims` elements dequantized at depth n.
double bits_per_dim(double nll, int bits, int64_t dims);

template <class T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Var<T>> params, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Var<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
  double beta1_, beta2_, eps_;
};

struct EpochMetric {
  int epoch = 0;  // 1-based, global across stages
  int stage_bits = 0;
  double nll = 0.0;  // mean per-volume negative log-likelihood, nats
  double bpd = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct SpatialTrainResult {
  std::vector<EpochMetric> metrics;
  bool aborted = false;       // non-finite loss; parameters restored to the
  std::string abort_reason;   // last epoch-end snapshot
};

// Runs the schedule in order, re-quantizing per stage. Deterministic given
// the seed. Performs data-dependent actnorm init on the first volume.
template <class T>
SpatialTrainResult train_spatial(FlowModel<T>& model, const std::vector<Volume>& dataset,
                                 const TrainSchedule& schedule, uint64_t seed,
                                 const std::function<void(const EpochMetric&)>& on_epoch = {});

void write_metrics_csv(const std::string& path, const std::vector<EpochMetric>& metrics);

}  // namespace volflow
