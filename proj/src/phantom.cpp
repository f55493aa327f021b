#include "volflow/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "volflow/rng.hpp"

namespace fs = std::filesystem;

namespace volflow {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

PhantomSpec PhantomSpec::for_resolution(int64_t r) {
  PhantomSpec s;
  s.resolution = r;
  s.skull_outer = 0.47 * static_cast<double>(r);
  s.skull_inner = 0.41 * static_cast<double>(r);
  s.vent_a = 0.125 * static_cast<double>(r);
  s.vent_b = 0.110 * static_cast<double>(r);
  s.vent_c = 0.095 * static_cast<double>(r);
  return s;
}

void PhantomSpec::validate() const {
  if (resolution < 8) throw ContractError(cat("phantom: resolution too small: ", resolution));
  const double max_axis = std::max({vent_a, vent_b, vent_c});
  if (!(skull_outer > skull_inner && skull_inner > max_axis))
    throw ContractError(cat("phantom: need skull_outer > skull_inner > max semi-axis, got ",
                            skull_outer, " / ", skull_inner, " / ", max_axis));
  if (!(growth_per_year > 0.0))
    throw ContractError(cat("phantom: growth rate must be > 0, got ", growth_per_year));
  if (2.0 * skull_outer > static_cast<double>(resolution))
    throw ContractError(cat("phantom: skull (radius ", skull_outer,
                            ") does not fit in resolution ", resolution));
}

SubjectSeries gen_subject(const PhantomSpec& spec, uint64_t subject_seed, int years,
                          const std::string& subject_id) {
  spec.validate();
  if (years < 1) throw ContractError(cat("phantom: years must be >= 1, got ", years));
  Rng shape_rng(derive_seed(subject_seed, "shape"));
  const double g_subject = spec.growth_per_year * std::exp(spec.growth_jitter * shape_rng.normal());
  const double a0 = spec.vent_a * std::exp(spec.shape_jitter * shape_rng.normal());
  const double b0 = spec.vent_b * std::exp(spec.shape_jitter * shape_rng.normal());
  const double c0 = spec.vent_c * std::exp(spec.shape_jitter * shape_rng.normal());

  // Anatomy texture is fixed for the subject across years.
  const int64_t R = spec.resolution;
  Rng tex_rng(derive_seed(subject_seed, "texture"));
  std::vector<uint8_t> texture(R * R * R);
  for (auto& t : texture) {
    double v = spec.brain_intensity + spec.noise_sigma * tex_rng.normal();
    t = static_cast<uint8_t>(std::clamp(v, 100.0, 195.0));
  }

  const double center = (static_cast<double>(R) - 1.0) / 2.0;
  const double inner2 = spec.skull_inner * spec.skull_inner;
  const double outer2 = spec.skull_outer * spec.skull_outer;

  SubjectSeries series;
  series.subject = subject_id;
  double ga = a0, gb = b0, gc = c0;
  for (int t = 0; t < years; ++t) {
    const double max_axis = std::max({ga, gb, gc});
    if (!(spec.skull_inner > max_axis + 1.0))
      throw ContractError(cat("phantom: ventricle of subject '", subject_id,
                              "' escapes the brain at year ", t, " (semi-axis ", max_axis,
                              " vs inner radius ", spec.skull_inner, ")"));
    SubjectSample sample;
    sample.age = static_cast<double>(t);
    sample.analytic_ventricle = 4.0 / 3.0 * kPi * ga * gb * gc;
    sample.analytic_brain =
        4.0 / 3.0 * kPi * spec.skull_inner * spec.skull_inner * spec.skull_inner;
    sample.volume = Volume::make_u8(R, R, R);
    const double ia2 = 1.0 / (ga * ga), ib2 = 1.0 / (gb * gb), ic2 = 1.0 / (gc * gc);
    int64_t i = 0;
    for (int64_t zd = 0; zd < R; ++zd) {
      const double dz = static_cast<double>(zd) - center;
      for (int64_t zh = 0; zh < R; ++zh) {
        const double dy = static_cast<double>(zh) - center;
        for (int64_t zw = 0; zw < R; ++zw, ++i) {
          const double dx = static_cast<double>(zw) - center;
          const double r2 = dz * dz + dy * dy + dx * dx;
          uint8_t v = 0;
          if (r2 <= outer2) {
            if (r2 >= inner2) {
              v = spec.skull_intensity;
            } else if (dz * dz * ia2 + dy * dy * ib2 + dx * dx * ic2 <= 1.0) {
              v = spec.ventricle_intensity;
            } else {
              v = texture[i];
            }
          }
          sample.volume.data_u8[i] = v;
        }
      }
    }
    series.samples.push_back(std::move(sample));
    double g_eff = g_subject;
    if (spec.accel_year >= 0.0 && static_cast<double>(t) >= spec.accel_year)
      g_eff *= spec.accel_factor;
    ga *= g_eff;
    gb *= g_eff;
    gc *= g_eff;
  }
  return series;
}

PhantomDataset gen_dataset(const PhantomSpec& spec, int n_subjects, int n_test, int years,
                           uint64_t seed, const std::string& out_dir) {
  spec.validate();
  if (n_subjects < 1) throw ContractError(cat("phantom: need >= 1 subject, got ", n_subjects));
  if (n_test < 0 || n_test >= n_subjects)
    throw ContractError(cat("phantom: test subjects ", n_test, " must be in [0, ", n_subjects,
                            ")"));
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "vols", ec);
  if (ec) throw IoError(cat("cannot create output dir '", out_dir, "': ", ec.message()));

  DatasetManifest train, test;
  train.split = "train";
  test.split = "test";
  std::ofstream truth(fs::path(out_dir) / "truth.csv");
  if (!truth) throw IoError(cat("cannot write truth.csv under '", out_dir, "'"));
  truth << "subject,year,analytic_ventricle_vox,analytic_brain_vox\n";
  truth.precision(12);

  for (int s = 0; s < n_subjects; ++s) {
    char name[16];
    std::snprintf(name, sizeof(name), "s%04d", s);
    const uint64_t subject_seed = derive_seed(seed, "phantom-subject", static_cast<uint64_t>(s));
    SubjectSeries series = gen_subject(spec, subject_seed, years, name);
    const bool is_test = s >= n_subjects - n_test;
    for (const auto& sample : series.samples) {
      char fname[48];
      std::snprintf(fname, sizeof(fname), "vols/%s_y%02d.vvol", name,
                    static_cast<int>(sample.age));
      write_volume((fs::path(out_dir) / fname).string(), sample.volume);
      ManifestEntry e{series.subject, sample.age, fname};
      (is_test ? test : train).entries.push_back(e);
      truth << series.subject << "," << sample.age << "," << sample.analytic_ventricle << ","
            << sample.analytic_brain << "\n";
    }
  }

  PhantomDataset out;
  out.train_manifest = (fs::path(out_dir) / "train.txt").string();
  out.test_manifest = (fs::path(out_dir) / "test.txt").string();
  out.truth_csv = (fs::path(out_dir) / "truth.csv").string();
  write_manifest(out.train_manifest, train);
  if (n_test > 0) write_manifest(out.test_manifest, test);
  if (!truth) throw IoError("write failed: truth.csv");
  return out;
}

}  // namespace volflow
