#include "volflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "volflow/forecast.hpp"
#include "volflow/temporal.hpp"
#include "volflow/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace volflow::pipeline {

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(cat("cannot create directory '", dir, "': ", ec.message()));
}

void write_run_manifest(const std::string& out_dir, json j) {
  const auto path = (fs::path(out_dir) / "run_manifest.json").string();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot write '", path, "'"));
  os << j.dump(2) << "\n";
}

const char* precision_tag(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

std::vector<Volume> load_cubic_volumes(const DatasetManifest& m, const std::string& manifest_path,
                                       int64_t* resolution) {
  std::vector<Volume> out;
  out.reserve(m.entries.size());
  int64_t r = 0;
  for (const auto& e : m.entries) {
    Volume v = read_volume(manifest_relative(manifest_path, e.path));
    if (v.d != v.h || v.h != v.w)
      throw ContractError(cat("volume '", e.path, "' is not cubic: (", v.d, ",", v.h, ",", v.w,
                              ")"));
    if (r == 0) r = v.d;
    if (v.d != r)
      throw ContractError(cat("volume '", e.path, "' resolution ", v.d,
                              " differs from the dataset's ", r));
    out.push_back(std::move(v));
  }
  *resolution = r;
  return out;
}

}  // namespace

PhantomGenOutputs run_phantom_gen(const PhantomGenOpts& opts, const std::string& out_dir) {
  ensure_dir(out_dir);
  PhantomSpec spec = PhantomSpec::for_resolution(opts.resolution);
  spec.growth_per_year = opts.growth_per_year;
  spec.growth_jitter = opts.growth_jitter;
  spec.shape_jitter = opts.shape_jitter;
  spec.noise_sigma = opts.noise_sigma;
  spec.accel_year = opts.accel_year;
  spec.accel_factor = opts.accel_factor;
  auto ds = gen_dataset(spec, opts.subjects, opts.test_subjects, opts.years, opts.seed, out_dir);

  PhantomGenOutputs out;
  out.train_manifest = ds.train_manifest;
  out.test_manifest = opts.test_subjects > 0 ? ds.test_manifest : "";
  out.truth_csv = ds.truth_csv;
  write_run_manifest(out_dir,
                     json{{"subcommand", "phantom-gen"},
                          {"options",
                           {{"subjects", opts.subjects},
                            {"test_subjects", opts.test_subjects},
                            {"years", opts.years},
                            {"resolution", opts.resolution},
                            {"growth_per_year", opts.growth_per_year},
                            {"growth_jitter", opts.growth_jitter},
                            {"shape_jitter", opts.shape_jitter},
                            {"noise_sigma", opts.noise_sigma},
                            {"accel_year", opts.accel_year},
                            {"accel_factor", opts.accel_factor},
                            {"seed", opts.seed}}},
                          {"artifacts", {"train.txt", "test.txt", "truth.csv", "vols/"}}});
  return out;
}

IngestOutputs run_ingest(const IngestOpts& opts, const std::string& out_dir) {
  ensure_dir((fs::path(out_dir) / "vols").string());
  auto src = read_manifest(opts.src_manifest);
  DatasetManifest dst;
  dst.split = src.split;
  int n = 0;
  for (const auto& e : src.entries) {
    Volume raw = read_volume(manifest_relative(opts.src_manifest, e.path));
    Volume windowed = window_hu(raw);
    auto cog = center_of_gravity(windowed);
    Volume cropped = crop_centered(windowed, cog, opts.crop_size);
    Volume small = opts.downsample_factor > 1 ? downsample(cropped, opts.downsample_factor)
                                              : cropped;
    const std::string rel = cat("vols/", fs::path(e.path).stem().string(), "_ingested.vvol");
    write_volume((fs::path(out_dir) / rel).string(), small);
    dst.entries.push_back({e.subject, e.age, rel});
    ++n;
  }
  IngestOutputs out;
  out.manifest = (fs::path(out_dir) / "manifest.txt").string();
  out.volumes = n;
  write_manifest(out.manifest, dst);
  write_run_manifest(out_dir, json{{"subcommand", "ingest"},
                                   {"options",
                                    {{"src_manifest", opts.src_manifest},
                                     {"crop_size", opts.crop_size},
                                     {"downsample_factor", opts.downsample_factor}}},
                                   {"volumes", n},
                                   {"artifacts", {"manifest.txt", "vols/"}}});
  return out;
}

namespace {

template <class T>
TrainSpatialOutputs train_spatial_impl(const TrainSpatialOpts& opts,
                                       const std::string& out_dir) {
  auto manifest = read_manifest(opts.manifest);
  int64_t resolution = 0;
  auto volumes = load_cubic_volumes(manifest, opts.manifest, &resolution);

  FlowConfig cfg;
  cfg.resolution = resolution;
  cfg.channels = 1;
  cfg.levels = opts.levels;
  cfg.depth = opts.depth;
  cfg.width = opts.width;
  cfg.learn_top = opts.learn_top;

  TrainSchedule schedule = read_schedule_file(opts.schedule_path);
  schedule.warmup_epochs = opts.warmup_epochs;

  FlowModel<T> model(cfg, derive_seed(opts.seed, "flow-init"));
  auto result = train_spatial(model, volumes, schedule, derive_seed(opts.seed, "flow-train"));

  TrainSpatialOutputs out;
  out.checkpoint = (fs::path(out_dir) / "flow.vfck").string();
  out.metrics_csv = (fs::path(out_dir) / "metrics.csv").string();
  out.aborted = result.aborted;
  out.abort_reason = result.abort_reason;
  if (!result.metrics.empty()) {
    out.first_bpd = result.metrics.front().bpd;
    out.final_bpd = result.metrics.back().bpd;
  }
  save_flow(model, out.checkpoint);
  write_metrics_csv(out.metrics_csv, result.metrics);
  write_run_manifest(out_dir, json{{"subcommand", "train-spatial"},
                                   {"options",
                                    {{"manifest", opts.manifest},
                                     {"schedule", opts.schedule_path},
                                     {"resolution", resolution},
                                     {"levels", opts.levels},
                                     {"depth", opts.depth},
                                     {"width", opts.width},
                                     {"learn_top", opts.learn_top},
                                     {"warmup_epochs", schedule.resolved_warmup()},
                                     {"precision", precision_tag(opts.precision)},
                                     {"seed", opts.seed}}},
                                   {"aborted", result.aborted},
                                   {"abort_reason", result.abort_reason},
                                   {"first_bpd", out.first_bpd},
                                   {"final_bpd", out.final_bpd},
                                   {"artifacts", {"flow.vfck", "metrics.csv"}}});
  return out;
}

}  // namespace

TrainSpatialOutputs run_train_spatial(const TrainSpatialOpts& opts, const std::string& out_dir) {
  ensure_dir(out_dir);
  if (opts.precision == Precision::f32) return train_spatial_impl<float>(opts, out_dir);
  return train_spatial_impl<double>(opts, out_dir);
}

namespace {

template <class T>
EncodeOutputs encode_impl(const EncodeOpts& opts, const std::string& out_dir) {
  auto model = load_flow<T>(opts.flow_checkpoint);
  auto manifest = read_manifest(opts.manifest);
  NoGradGuard ng;

  DatasetManifest latents;
  latents.split = "latents";
  int n = 0;
  for (const auto& e : manifest.entries) {
    Volume v = read_volume(manifest_relative(opts.manifest, e.path));
    if (v.dtype != VoxelType::u8)
      throw ContractError(cat("encode: '", e.path, "' is not an 8-bit volume"));
    auto x = volume_to_model_input<T>(v);
    auto [z, logdet] = model.encode(x);
    (void)logdet;
    const std::string rel = cat("latents/", e.subject, "_y", e.age, ".vflt");
    save_pyramid(z, (fs::path(out_dir) / rel).string());
    latents.entries.push_back({e.subject, e.age, rel});
    ++n;
  }
  EncodeOutputs out;
  out.latents_manifest = (fs::path(out_dir) / "latents.txt").string();
  out.encoded = n;
  write_manifest(out.latents_manifest, latents);
  write_run_manifest(out_dir, json{{"subcommand", "encode"},
                                   {"options",
                                    {{"manifest", opts.manifest},
                                     {"flow", opts.flow_checkpoint},
                                     {"precision", precision_tag(opts.precision)}}},
                                   {"encoded", n},
                                   {"artifacts", {"latents.txt", "latents/"}}});
  return out;
}

}  // namespace

EncodeOutputs run_encode(const EncodeOpts& opts, const std::string& out_dir) {
  ensure_dir((fs::path(out_dir) / "latents").string());
  if (opts.precision == Precision::f32) return encode_impl<float>(opts, out_dir);
  return encode_impl<double>(opts, out_dir);
}

namespace {

template <class T>
TrainTemporalOutputs train_temporal_impl(const TrainTemporalOpts& opts,
                                         const std::string& out_dir) {
  auto manifest = read_manifest(opts.latents_manifest);
  auto subjects = manifest.by_subject();
  if (subjects.empty()) throw ContractError("train-temporal: no subjects in latents manifest");

  NormalizationParams norm;
  using PairVec = std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>;
  auto load_pairs = [&](const std::vector<const ManifestEntry*>& series) {
    PairVec pairs;
    for (size_t i = 0; i + 1 < series.size(); ++i) {
      auto a = load_pyramid<T>(manifest_relative(opts.latents_manifest, series[i]->path));
      auto b = load_pyramid<T>(manifest_relative(opts.latents_manifest, series[i + 1]->path));
      pairs.emplace_back(normalize_latent(a, norm), normalize_latent(b, norm));
    }
    return pairs;
  };

  const int n_holdout =
      opts.holdout_fraction > 0.0 && subjects.size() > 1
          ? std::max<int>(1, static_cast<int>(std::floor(opts.holdout_fraction *
                                                          double(subjects.size()))))
          : 0;
  PairVec train_pairs, holdout_pairs;
  for (size_t s = 0; s < subjects.size(); ++s) {
    auto pairs = load_pairs(subjects[s]);
    auto& dst = (s + n_holdout >= subjects.size()) ? holdout_pairs : train_pairs;
    for (auto& p : pairs) dst.push_back(std::move(p));
  }
  if (train_pairs.empty()) throw ContractError("train-temporal: no training pairs");

  TemporalConfig cfg;
  cfg.final_linear = opts.final_linear;
  cfg.norm = norm;
  for (size_t l = 0; l < train_pairs[0].first.levels.size(); ++l) {
    cfg.level_channels.push_back(train_pairs[0].first.levels[l].shape().c);
    cfg.level_layers.push_back(static_cast<int>(std::min<int64_t>(int64_t(1) << l, 4)));
  }
  TemporalModel<T> model(cfg, derive_seed(opts.seed, "temporal-init"), opts.init_sigma);
  auto result = train_temporal(model, train_pairs, opts.lr, opts.epochs,
                               derive_seed(opts.seed, "temporal-train"));

  TrainTemporalOutputs out;
  out.checkpoint = (fs::path(out_dir) / "temporal.vftp").string();
  out.metrics_csv = (fs::path(out_dir) / "temporal_metrics.csv").string();
  out.aborted = result.aborted;
  out.abort_reason = result.abort_reason;
  out.train_pairs = static_cast<int>(train_pairs.size());
  out.holdout_pairs = static_cast<int>(holdout_pairs.size());
  save_temporal(model, out.checkpoint);

  {
    std::ofstream os(out.metrics_csv, std::ios::trunc);
    if (!os) throw IoError(cat("cannot write '", out.metrics_csv, "'"));
    os << "epoch,level,mse\n";
    os.precision(10);
    for (size_t l = 0; l < result.level_losses.size(); ++l)
      for (size_t e = 0; e < result.level_losses[l].size(); ++e)
        os << e + 1 << "," << l + 1 << "," << result.level_losses[l][e] << "\n";
  }

  json holdout_json = json::object();
  if (!holdout_pairs.empty()) {
    auto ev = evaluate_temporal(model, holdout_pairs);
    out.holdout_model_mse = ev.model_total;
    out.holdout_identity_mse = ev.identity_total;
    holdout_json = json{{"model_mse", ev.model_total},
                        {"identity_mse", ev.identity_total},
                        {"per_level_model_mse", ev.model_mse},
                        {"per_level_identity_mse", ev.identity_mse}};
  }
  write_run_manifest(out_dir, json{{"subcommand", "train-temporal"},
                                   {"options",
                                    {{"latents", opts.latents_manifest},
                                     {"lr", opts.lr},
                                     {"epochs", opts.epochs},
                                     {"holdout_fraction", opts.holdout_fraction},
                                     {"final_linear", opts.final_linear},
                                     {"init_sigma", opts.init_sigma},
                                     {"precision", precision_tag(opts.precision)},
                                     {"seed", opts.seed}}},
                                   {"aborted", result.aborted},
                                   {"abort_reason", result.abort_reason},
                                   {"train_pairs", out.train_pairs},
                                   {"holdout_pairs", out.holdout_pairs},
                                   {"holdout", holdout_json},
                                   {"artifacts", {"temporal.vftp", "temporal_metrics.csv"}}});
  return out;
}

}  // namespace

TrainTemporalOutputs run_train_temporal(const TrainTemporalOpts& opts,
                                        const std::string& out_dir) {
  ensure_dir(out_dir);
  if (opts.precision == Precision::f32) return train_temporal_impl<float>(opts, out_dir);
  return train_temporal_impl<double>(opts, out_dir);
}

namespace {

template <class T>
ForecastOutputs forecast_impl(const ForecastOpts& opts, const std::string& out_dir) {
  auto flow = load_flow<T>(opts.flow_checkpoint);
  auto temporal = load_temporal<T>(opts.temporal_checkpoint);
  Volume input = read_volume(opts.input_volume);
  if (input.dtype != VoxelType::u8)
    throw ContractError("forecast: input must be an 8-bit volume");
  auto x = volume_to_model_input<T>(input);
  auto result = forecast_n(x, opts.steps, flow, temporal);

  ForecastOutputs out;
  out.manifest = (fs::path(out_dir) / "forecast_steps.txt").string();
  std::ofstream ms(out.manifest, std::ios::trunc);
  if (!ms) throw IoError(cat("cannot write '", out.manifest, "'"));
  json steps_json = json::array();
  for (const auto& step : result.steps) {
    char name[32];
    std::snprintf(name, sizeof(name), "step_%03d.vvol", step.index);
    Volume v = to_u8_volume(step.volume.value(), input.d);
    v.spacing = input.spacing;
    write_volume((fs::path(out_dir) / name).string(), v);
    ms << step.index << " " << name << "\n";
    out.telescoped_max_abs.push_back(step.telescoped_max_abs);
    steps_json.push_back(json{{"step", step.index},
                              {"file", name},
                              {"telescoped_max_abs", step.telescoped_max_abs}});
  }
  write_run_manifest(out_dir, json{{"subcommand", "forecast"},
                                   {"options",
                                    {{"input", opts.input_volume},
                                     {"steps", opts.steps},
                                     {"flow", opts.flow_checkpoint},
                                     {"temporal", opts.temporal_checkpoint},
                                     {"precision", precision_tag(opts.precision)}}},
                                   {"steps", steps_json},
                                   {"artifacts", {"forecast_steps.txt"}}});
  return out;
}

}  // namespace

ForecastOutputs run_forecast(const ForecastOpts& opts, const std::string& out_dir) {
  ensure_dir(out_dir);
  if (opts.precision == Precision::f32) return forecast_impl<float>(opts, out_dir);
  return forecast_impl<double>(opts, out_dir);
}

QuantifyOutputs run_quantify(const QuantifyOpts& opts, const std::string& out_dir) {
  ensure_dir(out_dir);
  auto manifest = read_manifest(opts.manifest);
  auto subjects = manifest.by_subject();
  VolumeCurve all;
  int series = 0;
  for (const auto& subj : subjects) {
    std::vector<std::pair<double, int64_t>> vents;
    int64_t brain0 = 0;
    for (size_t t = 0; t < subj.size(); ++t) {
      Volume v = read_volume(manifest_relative(opts.manifest, subj[t]->path));
      auto brain = brain_mask(v, opts.params);
      if (t == 0) brain0 = brain.count();
      auto vent = segment_ventricles(v, brain, opts.params);
      vents.emplace_back(subj[t]->age, vent.count());
      if (opts.export_slices) {
        const std::string stem = cat(subj[t]->subject, "_y", subj[t]->age);
        write_mask_slice_pgm((fs::path(out_dir) / (stem + "_vent.pgm")).string(), v, vent);
        write_mask_slice_pgm((fs::path(out_dir) / (stem + "_brain.pgm")).string(), v, brain);
      }
    }
    auto curve = normalized_volume_curve(subj.front()->subject, vents, brain0);
    all.insert(all.end(), curve.begin(), curve.end());
    ++series;
  }
  QuantifyOutputs out;
  out.curves_csv = (fs::path(out_dir) / "curves.csv").string();
  out.series = series;
  write_curves_csv(out.curves_csv, all);
  write_run_manifest(out_dir, json{{"subcommand", "quantify"},
                                   {"options",
                                    {{"manifest", opts.manifest},
                                     {"t_ventricle", opts.params.t_ventricle},
                                     {"t_air", opts.params.t_air},
                                     {"t_skull", opts.params.t_skull},
                                     {"min_component_frac", opts.params.min_component_frac},
                                     {"export_slices", opts.export_slices}}},
                                   {"series", series},
                                   {"artifacts", {"curves.csv"}}});
  return out;
}

EvaluateOutputs run_evaluate(const EvaluateOpts& opts, const std::string& out_dir) {
  ensure_dir(out_dir);
  auto pred = read_curves_csv(opts.pred_curves);
  auto gt = read_curves_csv(opts.gt_curves);
  auto mae = mae_by_year(pred, gt);

  EvaluateOutputs out;
  out.mae_csv = (fs::path(out_dir) / "mae.csv").string();
  write_mae_csv(out.mae_csv, mae);

  json baseline_json = json::array();
  if (opts.frozen_baseline) {
    // Year-0 anatomy carried forward: each subject's earliest value predicted
    // at every year.
    std::map<std::string, std::pair<double, double>> anchor;
    for (const auto& g : gt) {
      auto it = anchor.find(g.subject);
      if (it == anchor.end() || g.year < it->second.first)
        anchor[g.subject] = {g.year, g.percent};
    }
    VolumeCurve frozen;
    for (const auto& g : gt) {
      CurvePoint p = g;
      p.percent = anchor[g.subject].second;
      frozen.push_back(p);
    }
    auto base_mae = mae_by_year(frozen, gt);
    out.baseline_mae_csv = (fs::path(out_dir) / "baseline_mae.csv").string();
    write_mae_csv(out.baseline_mae_csv, base_mae);
    for (const auto& m : base_mae)
      baseline_json.push_back(json{{"year", m.year}, {"mae_percent", m.mae_percent}});
  }
  json mae_json = json::array();
  for (const auto& m : mae)
    mae_json.push_back(json{{"year", m.year},
                            {"mae_percent", m.mae_percent},
                            {"n_subjects", m.n_subjects}});
  write_run_manifest(out_dir, json{{"subcommand", "evaluate"},
                                   {"options",
                                    {{"pred", opts.pred_curves},
                                     {"gt", opts.gt_curves},
                                     {"frozen_baseline", opts.frozen_baseline}}},
                                   {"mae", mae_json},
                                   {"baseline_mae", baseline_json},
                                   {"artifacts", {"mae.csv"}}});
  return out;
}

VerifyReport run_verify_stage(const VerifyOpts& opts, const std::string& out_dir) {
  auto report = run_verify(opts.resolution, opts.levels, opts.precision, opts.seed);
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    json checks = json::array();
    for (const auto& c : report.checks)
      checks.push_back(json{{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    write_run_manifest(out_dir, json{{"subcommand", "verify"},
                                     {"options",
                                      {{"resolution", opts.resolution},
                                       {"levels", opts.levels},
                                       {"precision", precision_tag(opts.precision)},
                                       {"seed", opts.seed}}},
                                     {"all_pass", report.all_pass()},
                                     {"checks", checks}});
  }
  return report;
}

}  // namespace volflow::pipeline
