#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "volflow/oracles.hpp"
#include "volflow/temporal.hpp"

using namespace volflow;

namespace {

TemporalConfig small_cfg() {
  TemporalConfig cfg;
  cfg.level_channels = {4, 16};
  cfg.level_layers = {1, 2};
  return cfg;
}

template <class T>
LatentPyramid<T> rand_pyramid(const std::vector<Shape>& shapes, Rng& rng, double lo = 0.2,
                              double hi = 0.8) {
  LatentPyramid<T> out;
  for (const auto& s : shapes) {
    std::vector<T> v(s.count());
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    out.levels.push_back(Var<T>::leaf(s, std::move(v)));
  }
  return out;
}

}  // namespace

TEST_CASE("normalization endpoints are bit-exact") {
  NormalizationParams p;  // a=24, b=48
  auto z = Var<double>::leaf(Shape(1, 1, 1, 4), {-24.0, 0.0, 24.0, 100.0});
  LatentPyramid<double> pyr;
  pyr.levels.push_back(z);
  auto n = normalize_latent(pyr, p);
  CHECK(n.levels[0].value()[0] == 0.0);
  CHECK(n.levels[0].value()[1] == 0.5);
  CHECK(n.levels[0].value()[2] == 1.0);
  CHECK(n.levels[0].value()[3] == 1.0);  // saturated

  auto back = denormalize_latent(n, p);
  CHECK(back.levels[0].value()[0] == -24.0);
  CHECK(back.levels[0].value()[1] == 0.0);  // 0.5 -> 0
  CHECK(back.levels[0].value()[2] == 24.0);
  // clipping loss is documented: -30 normalizes to 0, denormalizes to -24
  LatentPyramid<double> pyr2;
  pyr2.levels.push_back(Var<double>::leaf(Shape(1, 1, 1, 1), {-30.0}));
  auto round = denormalize_latent(normalize_latent(pyr2, p), p);
  CHECK(round.levels[0].value()[0] == -24.0);
}

TEST_CASE("denormalize and normalize invert exactly on the unclipped region") {
  NormalizationParams p;
  Rng rng(3);
  LatentPyramid<double> pyr;
  std::vector<double> v(64);
  for (auto& x : v) x = rng.uniform(-23.9, 23.9);
  pyr.levels.push_back(Var<double>::leaf(Shape(4, 4, 4, 1), std::vector<double>(v)));
  auto round = denormalize_latent(normalize_latent(pyr, p), p);
  for (size_t i = 0; i < v.size(); ++i)
    CHECK(round.levels[0].value()[i] == doctest::Approx(v[i]).epsilon(1e-12));
}

TEST_CASE("denormalize rejects out-of-range input") {
  NormalizationParams p;
  LatentPyramid<double> pyr;
  pyr.levels.push_back(Var<double>::leaf(Shape(1, 1, 1, 1), {1.5}));
  CHECK_THROWS_AS(denormalize_latent(pyr, p), ContractError);
}

TEST_CASE("zero-initialized temporal params give the exact identity") {
  TemporalModel<double> m(small_cfg(), 1, /*init_sigma=*/0.0);
  Rng rng(2);
  auto pyr = rand_pyramid<double>({Shape(4, 4, 4, 4), Shape(2, 2, 2, 16)}, rng);
  auto out = m.predict(pyr);
  for (size_t l = 0; l < pyr.levels.size(); ++l) {
    CHECK(out.levels[l].shape() == pyr.levels[l].shape());
    for (size_t i = 0; i < pyr.levels[l].value().size(); ++i)
      CHECK(out.levels[l].value()[i] == pyr.levels[l].value()[i]);
  }
}

TEST_CASE("relu-terminated residual stack never decreases an element") {
  TemporalModel<float> m(small_cfg(), 7, /*init_sigma=*/0.3);
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto pyr = rand_pyramid<float>({Shape(4, 4, 4, 4), Shape(2, 2, 2, 16)}, rng);
    auto out = m.predict(pyr);
    for (size_t l = 0; l < pyr.levels.size(); ++l)
      for (size_t i = 0; i < pyr.levels[l].value().size(); ++i)
        CHECK(out.levels[l].value()[i] >= pyr.levels[l].value()[i]);
  }
}

TEST_CASE("final-linear variant can decrease elements") {
  TemporalConfig cfg = small_cfg();
  cfg.final_linear = true;
  TemporalModel<float> m(cfg, 7, 0.3);
  Rng rng(9);
  auto pyr = rand_pyramid<float>({Shape(4, 4, 4, 4), Shape(2, 2, 2, 16)}, rng);
  auto out = m.predict(pyr);
  bool any_below = false;
  for (size_t i = 0; i < pyr.levels[0].value().size(); ++i)
    if (out.levels[0].value()[i] < pyr.levels[0].value()[i]) any_below = true;
  CHECK(any_below);
}

TEST_CASE("single-layer level matches the naive conv oracle plus identity") {
  TemporalConfig cfg;
  cfg.level_channels = {4};
  cfg.level_layers = {1};
  TemporalModel<double> m(cfg, 11, 0.0);
  // hand-set a 1-hot kernel: center tap, channel 2 -> channel 0
  auto params = m.level_parameters(0);
  auto& w = params[0].values_mut();
  const int64_t k = 3, c = 4;
  const int64_t center = ((1 * k + 1) * k + 1);
  w[(center * c + 2) * c + 0] = 0.7;
  auto& b = params[1].values_mut();
  b[1] = 0.25;

  Rng rng(12);
  std::vector<double> zv(8 * c);
  for (auto& x : zv) x = rng.uniform(0.0, 1.0);
  auto z = Var<double>::leaf(Shape(2, 2, 2, c), std::vector<double>(zv));
  auto out = m.predict_level(0, z);

  auto ref = oracles::naive_conv3d(Shape(2, 2, 2, c), zv, k, c, c,
                                   std::vector<double>(w.begin(), w.end()),
                                   std::vector<double>(b.begin(), b.end()));
  for (size_t i = 0; i < ref.size(); ++i) {
    const double want = std::max(0.0, ref[i]) + zv[i];  // relu then + identity
    CHECK(out.value()[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("width mismatch names the level") {
  TemporalModel<double> m(small_cfg(), 1, 0.0);
  auto bad = Var<double>::full(Shape(4, 4, 4, 8), 0.5);
  try {
    m.predict_level(0, bad);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("level 1") != std::string::npos);
  }
}

TEST_CASE("fixed-point pairs keep zero-init at identity with ~zero loss") {
  TemporalModel<double> m(small_cfg(), 3, /*init_sigma=*/0.0);
  Rng rng(4);
  std::vector<std::pair<LatentPyramid<double>, LatentPyramid<double>>> pairs;
  for (int i = 0; i < 6; ++i) {
    auto z = rand_pyramid<double>({Shape(4, 4, 4, 4), Shape(2, 2, 2, 16)}, rng);
    pairs.emplace_back(z, z);
  }
  auto result = train_temporal(m, pairs, 1.0, 3, 5);
  REQUIRE_FALSE(result.aborted);
  for (const auto& losses : result.level_losses) {
    for (double l : losses) CHECK(l < 1e-10);
    // non-increasing over epochs on the fixed-point dataset
    for (size_t e = 1; e < losses.size(); ++e) CHECK(losses[e] <= losses[e - 1] + 1e-12);
  }
}

TEST_CASE("level-confined constant shift: trained level 1 improves 10x, others stay near identity") {
  TemporalConfig cfg = small_cfg();
  TemporalModel<double> m(cfg, 21, /*init_sigma=*/0.02);
  Rng rng(22);
  const double shift = 0.2;
  std::vector<std::pair<LatentPyramid<double>, LatentPyramid<double>>> pairs;
  for (int i = 0; i < 48; ++i) {
    auto src = rand_pyramid<double>({Shape(4, 4, 4, 4), Shape(2, 2, 2, 16)}, rng, 0.2, 0.6);
    LatentPyramid<double> tgt;
    {
      std::vector<double> v(src.levels[0].value());
      for (auto& x : v) x += shift;
      tgt.levels.push_back(Var<double>::leaf(src.levels[0].shape(), std::move(v)));
    }
    tgt.levels.push_back(src.levels[1]);
    pairs.emplace_back(src, tgt);
  }
  // lr below 1 keeps the effective bias recursion b -> b - 2*lr*(b - shift)
  // contractive for this loss scale.
  auto result = train_temporal(m, pairs, 0.3, 40, 23);
  REQUIRE_FALSE(result.aborted);

  auto ev = evaluate_temporal(m, pairs);
  // identity error on level 1 is shift^2
  CHECK(ev.identity_mse[0] == doctest::Approx(shift * shift).epsilon(1e-9));
  CHECK(ev.model_mse[0] * 10.0 < ev.identity_mse[0]);
  // level 2 stays near identity (its target was the identity)
  CHECK(ev.model_mse[1] < 1e-4);
}

TEST_CASE("temporal checkpoint round trip") {
  TemporalModel<float> m(small_cfg(), 31, 0.1);
  const auto path = (std::filesystem::temp_directory_path() / "vf_test.vftp").string();
  save_temporal(m, path);
  auto m2 = load_temporal<float>(path);
  CHECK(m2.config().level_channels == m.config().level_channels);
  CHECK(m2.config().level_layers == m.config().level_layers);
  CHECK(m2.config().final_linear == m.config().final_linear);
  auto p1 = m.parameters(), p2 = m2.parameters();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i)
    for (size_t j = 0; j < p1[i].value().size(); ++j)
      CHECK(p1[i].value()[j] == p2[i].value()[j]);
  std::remove(path.c_str());
}
