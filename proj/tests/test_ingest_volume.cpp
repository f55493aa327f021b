#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "volflow/ingest.hpp"
#include "volflow/rng.hpp"

using namespace volflow;

namespace {
std::string tmp(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("window_hu reproduces the windowing formula endpoints") {
  Volume v = Volume::make_i16(1, 1, 3);
  v.data_i16 = {-200, 100, 300};
  auto w = window_hu(v);
  CHECK(w.data_u8[0] == 0);    // clip low
  CHECK(w.data_u8[1] == 180);  // 100 + 80
  CHECK(w.data_u8[2] == 255);  // clip high
}

TEST_CASE("window_hu is monotone non-decreasing and affine in range") {
  Volume v = Volume::make_i16(1, 1, 512);
  for (int i = 0; i < 512; ++i) v.data_i16[i] = static_cast<int16_t>(i - 256);
  auto w = window_hu(v);
  for (int i = 1; i < 512; ++i) CHECK(w.data_u8[i] >= w.data_u8[i - 1]);
  // in-range values are shifted by exactly +80
  for (int i = 0; i < 512; ++i) {
    const int hu = i - 256;
    if (hu + 80 >= 0 && hu + 80 <= 255) CHECK(w.data_u8[i] == hu + 80);
  }
}

TEST_CASE("center_of_gravity") {
  Volume v = Volume::make_u8(8, 8, 8);
  SUBCASE("single nonzero voxel") {
    v.data_u8[v.index(3, 4, 5)] = 10;
    auto c = center_of_gravity(v);
    CHECK(c[0] == 3.0);
    CHECK(c[1] == 4.0);
    CHECK(c[2] == 5.0);
  }
  SUBCASE("two equal voxels average") {
    v.data_u8[v.index(0, 0, 0)] = 7;
    v.data_u8[v.index(2, 0, 0)] = 7;
    auto c = center_of_gravity(v);
    CHECK(c[0] == 1.0);
    CHECK(c[1] == 0.0);
    CHECK(c[2] == 0.0);
  }
  SUBCASE("uniform volume gives the geometric center") {
    for (auto& x : v.data_u8) x = 50;
    auto c = center_of_gravity(v);
    CHECK(c[0] == doctest::Approx(3.5));
    CHECK(c[1] == doctest::Approx(3.5));
    CHECK(c[2] == doctest::Approx(3.5));
  }
  SUBCASE("all-zero volume errors") { CHECK_THROWS_AS(center_of_gravity(v), ContractError); }
}

TEST_CASE("crop_centered") {
  Volume v = Volume::make_u8(6, 6, 6);
  for (int64_t i = 0; i < v.count(); ++i) v.data_u8[i] = static_cast<uint8_t>(i % 251);
  SUBCASE("full extent at center is the identity") {
    auto c = crop_centered(v, {3.0, 3.0, 3.0}, 6);
    CHECK(c.data_u8 == v.data_u8);
  }
  SUBCASE("corner center zero-pads the far sides") {
    auto c = crop_centered(v, {0.0, 0.0, 0.0}, 6);
    // center (0,0,0), half=3: input range [-3, 3); out-of-bounds is zero
    CHECK(c.data_u8[c.index(0, 0, 0)] == 0);
    CHECK(c.data_u8[c.index(3, 3, 3)] == v.data_u8[v.index(0, 0, 0)]);
  }
  SUBCASE("random crops follow the documented offset map (fuzz)") {
    Rng rng(77);
    for (int trial = 0; trial < 25; ++trial) {
      const double cd = rng.uniform(-2.0, 8.0);
      const double ch = rng.uniform(-2.0, 8.0);
      const double cw = rng.uniform(-2.0, 8.0);
      const int64_t size = 4;
      auto c = crop_centered(v, {cd, ch, cw}, size);
      // rounding: nearest, ties toward the lower index
      auto rc = [](double x) { return static_cast<int64_t>(std::ceil(x - 0.5)); };
      for (int64_t od = 0; od < size; ++od)
        for (int64_t oh = 0; oh < size; ++oh)
          for (int64_t ow = 0; ow < size; ++ow) {
            const int64_t id = rc(cd) - size / 2 + od;
            const int64_t ih = rc(ch) - size / 2 + oh;
            const int64_t iw = rc(cw) - size / 2 + ow;
            const uint8_t want = (id >= 0 && id < 6 && ih >= 0 && ih < 6 && iw >= 0 && iw < 6)
                                     ? v.data_u8[v.index(id, ih, iw)]
                                     : 0;
            CHECK(c.data_u8[c.index(od, oh, ow)] == want);
          }
    }
  }
  SUBCASE("tie rounding goes toward the lower index") {
    // center 2.5 rounds to 2, not 3
    auto c = crop_centered(v, {2.5, 2.5, 2.5}, 2);
    CHECK(c.data_u8[c.index(0, 0, 0)] == v.data_u8[v.index(1, 1, 1)]);
  }
}

TEST_CASE("downsample") {
  SUBCASE("constant volume stays constant") {
    Volume v = Volume::make_u8(4, 4, 4);
    for (auto& x : v.data_u8) x = 93;
    auto d = downsample(v, 2);
    CHECK(d.d == 2);
    for (auto x : d.data_u8) CHECK(x == 93);
    // spacing scales with the factor
    CHECK(d.spacing[0] == 2.0);
  }
  SUBCASE("documented rounding: mean 127.5 rounds up to 128") {
    Volume v = Volume::make_u8(2, 2, 2);
    v.data_u8 = {0, 0, 0, 0, 255, 255, 255, 255};
    auto d = downsample(v, 2);
    CHECK(d.data_u8[0] == 128);
  }
  SUBCASE("matches a naive block-average oracle on random 8^3 inputs") {
    Rng rng(31);
    Volume v = Volume::make_u8(8, 8, 8);
    for (auto& x : v.data_u8) x = static_cast<uint8_t>(rng.below(256));
    for (int64_t k : {2, 4}) {
      auto d = downsample(v, k);
      for (int64_t od = 0; od < 8 / k; ++od)
        for (int64_t oh = 0; oh < 8 / k; ++oh)
          for (int64_t ow = 0; ow < 8 / k; ++ow) {
            double acc = 0;
            for (int64_t a = 0; a < k; ++a)
              for (int64_t b = 0; b < k; ++b)
                for (int64_t c = 0; c < k; ++c)
                  acc += v.data_u8[v.index(od * k + a, oh * k + b, ow * k + c)];
            const auto want =
                static_cast<uint8_t>(std::floor(acc / double(k * k * k) + 0.5));
            CHECK(d.data_u8[d.index(od, oh, ow)] == want);
          }
    }
  }
  SUBCASE("indivisible dims are rejected") {
    Volume v = Volume::make_u8(6, 6, 6);
    CHECK_THROWS_AS(downsample(v, 4), ContractError);
  }
}

TEST_CASE("VVOL round trip is bitwise for every dtype") {
  Rng rng(41);
  const auto path = tmp("vf_vol_test.vvol");
  SUBCASE("u8") {
    Volume v = Volume::make_u8(3, 4, 5, {0.5, 1.0, 2.0});
    for (auto& x : v.data_u8) x = static_cast<uint8_t>(rng.below(256));
    write_volume(path, v);
    auto r = read_volume(path);
    CHECK(r.dtype == VoxelType::u8);
    CHECK(r.data_u8 == v.data_u8);
    CHECK(r.spacing == v.spacing);
    // write -> read -> write gives identical bytes
    const auto path2 = tmp("vf_vol_test2.vvol");
    write_volume(path2, r);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path2.c_str());
  }
  SUBCASE("i16") {
    Volume v = Volume::make_i16(2, 2, 2);
    v.data_i16 = {-1000, -80, 0, 80, 1000, 3000, -3000, 255};
    write_volume(path, v);
    CHECK(read_volume(path).data_i16 == v.data_i16);
  }
  SUBCASE("f32") {
    Volume v = Volume::make_f32(2, 2, 2);
    for (auto& x : v.data_f32) x = static_cast<float>(rng.normal());
    write_volume(path, v);
    CHECK(read_volume(path).data_f32 == v.data_f32);
  }
  std::remove(path.c_str());
}

TEST_CASE("VVOL reference fixture parses to known voxels") {
  // Hand-assembled 2x2x2 u8 file: header plus payload bytes 0..7.
  const auto path = tmp("vf_fixture.vvol");
  {
    std::ofstream os(path, std::ios::binary);
    const unsigned char header[] = {
        'V', 'V', 'O', 'L',      // magic
        1,   0,   0,   0,        // version 1 (LE u32)
        0,                       // dtype u8
        0,   0,   0,             // reserved
        2,   0,   0,   0,        // D = 2
        2,   0,   0,   0,        // H = 2
        2,   0,   0,   0,        // W = 2
    };
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    // three f64 spacings = 1.0 little-endian
    const unsigned char one[] = {0, 0, 0, 0, 0, 0, 0xf0, 0x3f};
    for (int i = 0; i < 3; ++i) os.write(reinterpret_cast<const char*>(one), 8);
    const unsigned char payload[] = {0, 1, 2, 3, 4, 5, 6, 7};
    os.write(reinterpret_cast<const char*>(payload), 8);
  }
  auto v = read_volume(path);
  CHECK(v.d == 2);
  CHECK(v.spacing[0] == 1.0);
  for (int i = 0; i < 8; ++i) CHECK(v.data_u8[i] == i);
  // voxel (1,0,1) = index 5 under D-major order
  CHECK(v.data_u8[v.index(1, 0, 1)] == 5);
  std::remove(path.c_str());
}

TEST_CASE("VVOL error kinds are distinct") {
  const auto path = tmp("vf_bad.vvol");
  SUBCASE("bad magic") {
    std::ofstream(path, std::ios::binary) << "JUNKJUNKJUNK";
    try {
      read_volume(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }
  }
  SUBCASE("header-only truncation") {
    std::ofstream(path, std::ios::binary) << "VVOL";
    try {
      read_volume(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("payload truncation") {
    Volume v = Volume::make_u8(4, 4, 4);
    write_volume(path, v);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
    try {
      read_volume(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("dim overflow") {
    std::ofstream os(path, std::ios::binary);
    const unsigned char header[] = {'V', 'V', 'O', 'L', 1, 0, 0, 0, 0, 0, 0, 0,
                                    0xff, 0xff, 0xff, 0x7f,  // D huge
                                    2, 0, 0, 0, 2, 0, 0, 0};
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    os.close();
    try {
      read_volume(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("dim overflow") != std::string::npos);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("manifest io round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "vf_manifest_test";
  std::filesystem::create_directories(dir);
  Volume v = Volume::make_u8(4, 4, 4);
  write_volume((dir / "a0.vvol").string(), v);
  write_volume((dir / "a1.vvol").string(), v);

  DatasetManifest m;
  m.split = "train";
  m.entries = {{"s0", 0.0, "a0.vvol"}, {"s0", 1.0, "a1.vvol"}};
  const auto path = (dir / "manifest.txt").string();
  write_manifest(path, m);
  auto r = read_manifest(path);
  CHECK(r.split == "train");
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[1].age == 1.0);
  auto dims = validate_manifest(r, path);
  CHECK(dims[0] == 4);

  // non-increasing ages fail validation
  DatasetManifest bad = m;
  bad.entries[1].age = 0.0;
  write_manifest(path, bad);
  CHECK_THROWS_AS(validate_manifest(read_manifest(path), path), ContractError);

  std::filesystem::remove_all(dir);
}
