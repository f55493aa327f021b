/* volflow - volumetric normalizing flows with latent-space aging forecasts.
 *
 * C interface to the shared library. All functions return vf_status; on
 * failure vf_last_error() describes the problem for the calling thread.
 * Handles are opaque; every *_free accepts NULL.
 */

#ifndef VOLFLOW_H
#define VOLFLOW_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  VF_OK = 0,
  VF_ERR_CONTRACT = 1, /* precondition or invariant violated */
  VF_ERR_IO = 2,       /* file missing, corrupt, or unwritable */
  VF_ERR_VERIFY = 3    /* a verification check failed */
} vf_status;

typedef enum { VF_PRECISION_F32 = 0, VF_PRECISION_F64 = 1 } vf_precision;

const char* vf_last_error(void);
const char* vf_version(void);

/* ---------- volumes (VVOL files) ---------- */

typedef struct vf_volume vf_volume;

vf_status vf_volume_read(const char* path, vf_volume** out);
vf_status vf_volume_write(const vf_volume* vol, const char* path);
void vf_volume_free(vf_volume* vol);
vf_status vf_volume_dims(const vf_volume* vol, uint32_t dims[3]);
/* 0 = u8, 1 = i16, 2 = f32 */
vf_status vf_volume_dtype(const vf_volume* vol, int* dtype);

/* ---------- latent pyramids (VFLT files) ---------- */

typedef struct vf_pyramid vf_pyramid;

vf_status vf_pyramid_read(const char* path, vf_precision precision, vf_pyramid** out);
vf_status vf_pyramid_write(const vf_pyramid* z, const char* path);
void vf_pyramid_free(vf_pyramid* z);
vf_status vf_pyramid_levels(const vf_pyramid* z, uint32_t* levels);
/* dims = (depth, height, width, channels) of one level */
vf_status vf_pyramid_level_dims(const vf_pyramid* z, uint32_t level, uint32_t dims[4]);

/* ---------- flow model (VFCK checkpoints) ---------- */

typedef struct vf_flow vf_flow;

vf_status vf_flow_create(uint32_t resolution, uint32_t channels, uint32_t levels,
                         uint32_t depth, uint32_t width, int learn_top, uint64_t seed,
                         vf_precision precision, vf_flow** out);
vf_status vf_flow_load(const char* path, vf_precision precision, vf_flow** out);
vf_status vf_flow_save(const vf_flow* flow, const char* path);
void vf_flow_free(vf_flow* flow);

/* Encode an 8-bit volume (deterministic center-of-bin dequantization). */
vf_status vf_flow_encode(vf_flow* flow, const vf_volume* vol, vf_pyramid** out_z,
                         double* out_logdet);
/* Decode to an 8-bit volume in the display domain. */
vf_status vf_flow_decode(vf_flow* flow, const vf_pyramid* z, vf_volume** out_vol);
vf_status vf_flow_log_likelihood(vf_flow* flow, const vf_volume* vol, double* out_ll);

/* ---------- temporal model (VFTP checkpoints) ---------- */

typedef struct vf_temporal vf_temporal;

vf_status vf_temporal_load(const char* path, vf_precision precision, vf_temporal** out);
void vf_temporal_free(vf_temporal* t);

/* One aging interval: encode, predict in normalized latent space, decode. */
vf_status vf_step(vf_flow* flow, const vf_temporal* temporal, const vf_volume* vol,
                  vf_volume** out);

/* ---------- pipeline stages ----------
 * Each runner writes its artifacts plus run_manifest.json into out_dir and
 * mirrors one CLI subcommand. *_opts_init fills defaults.
 */

typedef struct {
  uint32_t subjects, test_subjects, years, resolution;
  double growth_per_year, growth_jitter, shape_jitter, noise_sigma;
  double accel_year, accel_factor;
  uint64_t seed;
} vf_phantom_opts;
void vf_phantom_opts_init(vf_phantom_opts* opts);
vf_status vf_run_phantom_gen(const vf_phantom_opts* opts, const char* out_dir);

typedef struct {
  const char* src_manifest;
  uint32_t crop_size, downsample_factor;
} vf_ingest_opts;
void vf_ingest_opts_init(vf_ingest_opts* opts);
vf_status vf_run_ingest(const vf_ingest_opts* opts, const char* out_dir);

typedef struct {
  const char* manifest;
  const char* schedule; /* text file, one "bits epochs lr" stage per line */
  uint32_t levels, depth, width;
  int learn_top;
  double warmup_epochs; /* < 0 selects the proportional default */
  uint64_t seed;
  vf_precision precision;
} vf_train_spatial_opts;
typedef struct {
  int aborted;
  double first_bpd, final_bpd;
} vf_train_spatial_result;
void vf_train_spatial_opts_init(vf_train_spatial_opts* opts);
vf_status vf_run_train_spatial(const vf_train_spatial_opts* opts, const char* out_dir,
                               vf_train_spatial_result* result /* nullable */);

typedef struct {
  const char* manifest;
  const char* flow;
  vf_precision precision;
} vf_encode_opts;
void vf_encode_opts_init(vf_encode_opts* opts);
vf_status vf_run_encode(const vf_encode_opts* opts, const char* out_dir);

typedef struct {
  const char* latents;
  double lr;
  uint32_t epochs;
  double holdout_fraction;
  int final_linear;
  double init_sigma;
  uint64_t seed;
  vf_precision precision;
} vf_train_temporal_opts;
typedef struct {
  int aborted;
  uint32_t train_pairs, holdout_pairs;
  double holdout_model_mse, holdout_identity_mse;
} vf_train_temporal_result;
void vf_train_temporal_opts_init(vf_train_temporal_opts* opts);
vf_status vf_run_train_temporal(const vf_train_temporal_opts* opts, const char* out_dir,
                                vf_train_temporal_result* result /* nullable */);

typedef struct {
  const char* input;
  uint32_t steps;
  const char* flow;
  const char* temporal;
  vf_precision precision;
} vf_forecast_opts;
void vf_forecast_opts_init(vf_forecast_opts* opts);
vf_status vf_run_forecast(const vf_forecast_opts* opts, const char* out_dir);

typedef struct {
  const char* manifest;
  double t_ventricle, t_air, t_skull, min_component_frac;
  int export_slices;
} vf_quantify_opts;
void vf_quantify_opts_init(vf_quantify_opts* opts);
vf_status vf_run_quantify(const vf_quantify_opts* opts, const char* out_dir);

typedef struct {
  const char* pred_curves;
  const char* gt_curves;
  int frozen_baseline;
} vf_evaluate_opts;
void vf_evaluate_opts_init(vf_evaluate_opts* opts);
vf_status vf_run_evaluate(const vf_evaluate_opts* opts, const char* out_dir);

typedef struct {
  uint32_t resolution, levels;
  vf_precision precision;
  uint64_t seed;
} vf_verify_opts;
void vf_verify_opts_init(vf_verify_opts* opts);
/* Returns VF_ERR_VERIFY if any invariant check fails; prints one line per
 * check to stdout when verbose is nonzero. */
vf_status vf_run_verify(const vf_verify_opts* opts, const char* out_dir, int verbose);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VOLFLOW_H */
