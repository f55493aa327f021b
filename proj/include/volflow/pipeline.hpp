#pragma once

#include <string>
#include <vector>

#include "volflow/flow.hpp"
#include "volflow/phantom.hpp"
#include "volflow/quantify.hpp"
#include "volflow/verify.hpp"

// Stage runners behind the CLI subcommands and the shared-library API. Every
// runner writes its artifacts plus a machine-readable run_manifest.json into
// the output directory. Manifests carry no timestamps so identical
// configurations produce identical artifact trees.

namespace volflow::pipeline {

struct PhantomGenOpts {
  int subjects = 16;
  int test_subjects = 0;
  int years = 4;
  int64_t resolution = 32;
  double growth_per_year = 1.026;
  double growth_jitter = 0.0;
  double shape_jitter = 0.04;
  double noise_sigma = 6.0;
  double accel_year = -1.0;
  double accel_factor = 1.0;
  uint64_t seed = 0;
};

struct PhantomGenOutputs {
  std::string train_manifest;
  std::string test_manifest;  // empty when no test subjects
  std::string truth_csv;
};

PhantomGenOutputs run_phantom_gen(const PhantomGenOpts& opts, const std::string& out_dir);

struct IngestOpts {
  std::string src_manifest;  // 16-bit CT-number volumes
  int64_t crop_size = 256;
  int64_t downsample_factor = 2;
};

struct IngestOutputs {
  std::string manifest;
  int volumes = 0;
};

IngestOutputs run_ingest(const IngestOpts& opts, const std::string& out_dir);

struct TrainSpatialOpts {
  std::string manifest;
  std::string schedule_path;
  int levels = 2;
  int depth = 2;
  int width = 32;
  bool learn_top = true;
  double warmup_epochs = -1.0;  // < 0: proportional default
  uint64_t seed = 0;
  Precision precision = Precision::f32;
};

struct TrainSpatialOutputs {
  std::string checkpoint;
  std::string metrics_csv;
  bool aborted = false;
  std::string abort_reason;
  double first_bpd = 0.0;
  double final_bpd = 0.0;
};

TrainSpatialOutputs run_train_spatial(const TrainSpatialOpts& opts, const std::string& out_dir);

struct EncodeOpts {
  std::string manifest;
  std::string flow_checkpoint;
  Precision precision = Precision::f32;
};

struct EncodeOutputs {
  std::string latents_manifest;
  int encoded = 0;
};

EncodeOutputs run_encode(const EncodeOpts& opts, const std::string& out_dir);

struct TrainTemporalOpts {
  std::string latents_manifest;
  double lr = 1.0;  // reference-scale default is 10.0, exposed via the CLI
  int epochs = 20;
  double holdout_fraction = 0.25;  // fraction of subjects held out
  bool final_linear = false;
  double init_sigma = 0.05;
  uint64_t seed = 0;
  Precision precision = Precision::f32;
};

struct TrainTemporalOutputs {
  std::string checkpoint;
  std::string metrics_csv;
  bool aborted = false;
  std::string abort_reason;
  int train_pairs = 0;
  int holdout_pairs = 0;
  double holdout_model_mse = 0.0;
  double holdout_identity_mse = 0.0;
};

TrainTemporalOutputs run_train_temporal(const TrainTemporalOpts& opts,
                                        const std::string& out_dir);

struct ForecastOpts {
  std::string input_volume;
  int steps = 3;
  std::string flow_checkpoint;
  std::string temporal_checkpoint;
  Precision precision = Precision::f32;
};

struct ForecastOutputs {
  std::string manifest;  // one "step path" line per written volume
  std::vector<double> telescoped_max_abs;
};

ForecastOutputs run_forecast(const ForecastOpts& opts, const std::string& out_dir);

struct QuantifyOpts {
  std::string manifest;
  QuantifyParams params;
  bool export_slices = false;
};

struct QuantifyOutputs {
  std::string curves_csv;
  int series = 0;
};

QuantifyOutputs run_quantify(const QuantifyOpts& opts, const std::string& out_dir);

struct EvaluateOpts {
  std::string pred_curves;
  std::string gt_curves;
  bool frozen_baseline = false;  // also score year-0-forever prediction
};

struct EvaluateOutputs {
  std::string mae_csv;
  std::string baseline_mae_csv;  // empty unless requested
};

EvaluateOutputs run_evaluate(const EvaluateOpts& opts, const std::string& out_dir);

struct VerifyOpts {
  int64_t resolution = 8;
  int levels = 2;
  Precision precision = Precision::f32;
  uint64_t seed = 0;
};

VerifyReport run_verify_stage(const VerifyOpts& opts, const std::string& out_dir);

}  // namespace volflow::pipeline
