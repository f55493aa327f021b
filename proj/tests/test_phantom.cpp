#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "volflow/phantom.hpp"
#include "volflow/quantify.hpp"
#include "volflow/rng.hpp"

using namespace volflow;

TEST_CASE("analytic sphere volume formula") {
  PhantomSpec spec = PhantomSpec::for_resolution(32);
  spec.vent_a = spec.vent_b = spec.vent_c = 4.0;
  spec.shape_jitter = 0.0;
  spec.growth_jitter = 0.0;
  auto series = gen_subject(spec, 1, 1, "s");
  CHECK(series.samples[0].analytic_ventricle ==
        doctest::Approx(4.0 / 3.0 * 3.14159265358979 * 64.0).epsilon(1e-9));
}

TEST_CASE("no growth means identical analytic volumes at all years") {
  PhantomSpec spec = PhantomSpec::for_resolution(16);
  spec.growth_per_year = 1.0;
  spec.growth_jitter = 0.0;
  auto series = gen_subject(spec, 3, 4, "s");
  for (const auto& s : series.samples)
    CHECK(s.analytic_ventricle == series.samples[0].analytic_ventricle);
}

TEST_CASE("voxelized ventricle count tracks the analytic volume within 10%") {
  PhantomSpec spec = PhantomSpec::for_resolution(32);
  spec.shape_jitter = 0.0;
  spec.noise_sigma = 5.0;
  for (double a : {4.0, 5.0, 6.0}) {
    spec.vent_a = a;
    spec.vent_b = a * 0.9;
    spec.vent_c = a * 1.05;
    auto series = gen_subject(spec, 3, 1, "s");
    const auto& sample = series.samples[0];
    int64_t count = 0;
    for (uint8_t v : sample.volume.data_u8)
      if (v == spec.ventricle_intensity) ++count;
    const double ratio = static_cast<double>(count) / sample.analytic_ventricle;
    CHECK(ratio > 0.9);
    CHECK(ratio < 1.1);
  }
}

TEST_CASE("voxel/analytic ratio approaches 1 as resolution grows") {
  auto ratio_at = [](int64_t r) {
    PhantomSpec spec = PhantomSpec::for_resolution(r);
    spec.shape_jitter = 0.0;
    auto series = gen_subject(spec, 5, 1, "s");
    int64_t count = 0;
    for (uint8_t v : series.samples[0].volume.data_u8)
      if (v == spec.ventricle_intensity) ++count;
    return std::abs(static_cast<double>(count) / series.samples[0].analytic_ventricle - 1.0);
  };
  CHECK(ratio_at(64) < ratio_at(16));
}

TEST_CASE("intensities stay in range and the skull is the brightest structure") {
  PhantomSpec spec = PhantomSpec::for_resolution(24);
  auto series = gen_subject(spec, 9, 2, "s");
  for (const auto& s : series.samples) {
    uint8_t max_v = 0;
    for (uint8_t v : s.volume.data_u8) max_v = std::max(max_v, v);
    CHECK(max_v == spec.skull_intensity);
  }
}

TEST_CASE("growth escaping the brain raises an error") {
  PhantomSpec spec = PhantomSpec::for_resolution(16);
  spec.growth_per_year = 1.5;
  spec.growth_jitter = 0.0;
  CHECK_THROWS_AS(gen_subject(spec, 2, 12, "s"), ContractError);
}

TEST_CASE("gen_dataset writes volumes, manifests and deterministic files") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "vf_phantom_ds";
  fs::remove_all(dir);
  PhantomSpec spec = PhantomSpec::for_resolution(16);
  auto ds = gen_dataset(spec, 2, 0, 3, 99, dir.string());

  auto m = read_manifest(ds.train_manifest);
  CHECK(m.split == "train");
  CHECK(m.entries.size() == 6);  // n=2 subjects, years 0,1,2
  auto subjects = m.by_subject();
  REQUIRE(subjects.size() == 2);
  for (const auto& subj : subjects) {
    REQUIRE(subj.size() == 3);
    for (int y = 0; y < 3; ++y) CHECK(subj[y]->age == double(y));
  }
  validate_manifest(m, ds.train_manifest);

  // same seed reproduces identical bytes
  const auto dir2 = fs::temp_directory_path() / "vf_phantom_ds2";
  fs::remove_all(dir2);
  gen_dataset(spec, 2, 0, 3, 99, dir2.string());
  for (const auto& e : m.entries) {
    std::ifstream f1(manifest_relative(ds.train_manifest, e.path), std::ios::binary);
    std::ifstream f2((dir2 / e.path).string(), std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK_FALSE(b1.empty());
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("train/test subject ids are disjoint") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "vf_phantom_split";
  fs::remove_all(dir);
  PhantomSpec spec = PhantomSpec::for_resolution(16);
  auto ds = gen_dataset(spec, 5, 2, 2, 7, dir.string());
  auto train = read_manifest(ds.train_manifest);
  auto test = read_manifest(ds.test_manifest);
  CHECK(test.split == "test");
  std::set<std::string> train_ids, test_ids;
  for (const auto& e : train.entries) train_ids.insert(e.subject);
  for (const auto& e : test.entries) test_ids.insert(e.subject);
  CHECK(train_ids.size() == 3);
  CHECK(test_ids.size() == 2);
  for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);
  fs::remove_all(dir);
}

TEST_CASE("empirical growth of analytic volumes matches g^3") {
  PhantomSpec spec = PhantomSpec::for_resolution(16);
  spec.growth_per_year = 1.026;
  spec.growth_jitter = 0.02;
  const double g3 = 1.026 * 1.026 * 1.026;
  double sum_ratio = 0.0;
  const int n = 32;
  for (int s = 0; s < n; ++s) {
    auto series = gen_subject(spec, derive_seed(123, "phantom-subject", s), 2, "s");
    sum_ratio += series.samples[1].analytic_ventricle / series.samples[0].analytic_ventricle;
  }
  const double mean_ratio = sum_ratio / n;
  CHECK(std::abs(mean_ratio - g3) / g3 < 0.02);
}

TEST_CASE("analytic volumes strictly increase when g > 1") {
  PhantomSpec spec = PhantomSpec::for_resolution(16);
  spec.growth_per_year = 1.026;
  spec.growth_jitter = 0.0;
  auto series = gen_subject(spec, 17, 5, "s");
  for (size_t t = 1; t < series.samples.size(); ++t)
    CHECK(series.samples[t].analytic_ventricle > series.samples[t - 1].analytic_ventricle);
}

TEST_CASE("late-onset acceleration kicks in at the configured year") {
  PhantomSpec spec = PhantomSpec::for_resolution(24);
  spec.growth_per_year = 1.02;
  spec.growth_jitter = 0.0;
  spec.shape_jitter = 0.0;
  spec.accel_year = 2.0;
  spec.accel_factor = 1.5;
  auto series = gen_subject(spec, 3, 5, "s");
  auto ratio = [&](int t) {
    return series.samples[t + 1].analytic_ventricle / series.samples[t].analytic_ventricle;
  };
  CHECK(ratio(0) == doctest::Approx(std::pow(1.02, 3.0)));
  CHECK(ratio(1) == doctest::Approx(std::pow(1.02, 3.0)));
  CHECK(ratio(2) == doctest::Approx(std::pow(1.02 * 1.5, 3.0)));
  CHECK(ratio(3) == doctest::Approx(std::pow(1.02 * 1.5, 3.0)));
}
