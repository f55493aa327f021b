#include "volflow/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace volflow {

Volume window_hu(const Volume& src) {
  src.validate("window_hu");
  if (src.dtype != VoxelType::i16)
    throw ContractError("window_hu: expected a 16-bit CT-number volume");
  Volume out = Volume::make_u8(src.d, src.h, src.w, src.spacing);
  for (int64_t i = 0; i < src.count(); ++i) {
    int32_t v = static_cast<int32_t>(src.data_i16[i]) + 80;
    out.data_u8[i] = static_cast<uint8_t>(std::clamp(v, 0, 255));
  }
  return out;
}

std::array<double, 3> center_of_gravity(const Volume& v) {
  v.validate("center_of_gravity");
  if (v.dtype != VoxelType::u8)
    throw ContractError("center_of_gravity: expected a windowed 8-bit volume");
  double total = 0.0, sd = 0.0, sh = 0.0, sw = 0.0;
  int64_t i = 0;
  for (int64_t id = 0; id < v.d; ++id)
    for (int64_t ih = 0; ih < v.h; ++ih)
      for (int64_t iw = 0; iw < v.w; ++iw, ++i) {
        const double val = v.data_u8[i];
        total += val;
        sd += val * id;
        sh += val * ih;
        sw += val * iw;
      }
  if (total == 0.0) throw ContractError("center_of_gravity: all-zero volume");
  return {sd / total, sh / total, sw / total};
}

namespace {

// Nearest integer, ties toward the lower index.
int64_t round_center(double x) { return static_cast<int64_t>(std::ceil(x - 0.5)); }

}  // namespace

Volume crop_centered(const Volume& v, const std::array<double, 3>& center, int64_t size) {
  v.validate("crop_centered");
  if (v.dtype != VoxelType::u8) throw ContractError("crop_centered: expected an 8-bit volume");
  if (size < 1) throw ContractError(cat("crop_centered: size must be >= 1, got ", size));
  const int64_t cd = round_center(center[0]);
  const int64_t ch = round_center(center[1]);
  const int64_t cw = round_center(center[2]);
  const int64_t half = size / 2;
  Volume out = Volume::make_u8(size, size, size, v.spacing);
  for (int64_t od = 0; od < size; ++od) {
    const int64_t id = cd - half + od;
    if (id < 0 || id >= v.d) continue;
    for (int64_t oh = 0; oh < size; ++oh) {
      const int64_t ih = ch - half + oh;
      if (ih < 0 || ih >= v.h) continue;
      for (int64_t ow = 0; ow < size; ++ow) {
        const int64_t iw = cw - half + ow;
        if (iw < 0 || iw >= v.w) continue;
        out.data_u8[out.index(od, oh, ow)] = v.data_u8[v.index(id, ih, iw)];
      }
    }
  }
  return out;
}

Volume downsample(const Volume& v, int64_t k) {
  v.validate("downsample");
  if (k < 1) throw ContractError(cat("downsample: factor must be >= 1, got ", k));
  if (v.d % k || v.h % k || v.w % k)
    throw ContractError(cat("downsample: dims (", v.d, ",", v.h, ",", v.w,
                            ") not divisible by factor ", k));
  const int64_t od = v.d / k, oh = v.h / k, ow = v.w / k;
  const double block = static_cast<double>(k * k * k);
  const std::array<double, 3> sp{v.spacing[0] * k, v.spacing[1] * k, v.spacing[2] * k};

  auto pool = [&](auto read) {
    std::vector<double> means(od * oh * ow);
    int64_t o = 0;
    for (int64_t zd = 0; zd < od; ++zd)
      for (int64_t zh = 0; zh < oh; ++zh)
        for (int64_t zw = 0; zw < ow; ++zw, ++o) {
          double acc = 0.0;
          for (int64_t a = 0; a < k; ++a)
            for (int64_t b = 0; b < k; ++b)
              for (int64_t c = 0; c < k; ++c)
                acc += read(v.index(zd * k + a, zh * k + b, zw * k + c));
          means[o] = acc / block;
        }
    return means;
  };

  switch (v.dtype) {
    case VoxelType::u8: {
      auto means = pool([&](int64_t i) { return double(v.data_u8[i]); });
      Volume out = Volume::make_u8(od, oh, ow, sp);
      // Round half up.
      for (size_t i = 0; i < means.size(); ++i)
        out.data_u8[i] = static_cast<uint8_t>(
            std::clamp<int64_t>(static_cast<int64_t>(std::floor(means[i] + 0.5)), 0, 255));
      return out;
    }
    case VoxelType::i16: {
      auto means = pool([&](int64_t i) { return double(v.data_i16[i]); });
      Volume out = Volume::make_i16(od, oh, ow, sp);
      for (size_t i = 0; i < means.size(); ++i)
        out.data_i16[i] = static_cast<int16_t>(std::floor(means[i] + 0.5));
      return out;
    }
    case VoxelType::f32: {
      auto means = pool([&](int64_t i) { return double(v.data_f32[i]); });
      Volume out = Volume::make_f32(od, oh, ow, sp);
      for (size_t i = 0; i < means.size(); ++i) out.data_f32[i] = static_cast<float>(means[i]);
      return out;
    }
  }
  throw ContractError("downsample: unreachable voxel type");
}

std::vector<std::vector<const ManifestEntry*>> DatasetManifest::by_subject() const {
  std::vector<std::vector<const ManifestEntry*>> out;
  std::map<std::string, size_t> idx;
  for (const auto& e : entries) {
    auto [it, fresh] = idx.emplace(e.subject, out.size());
    if (fresh) out.emplace_back();
    out[it->second].push_back(&e);
  }
  return out;
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open manifest '", path, "'"));
  DatasetManifest m;
  std::string line;
  bool have_split = false;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    if (!have_split) {
      std::string kw;
      ls >> kw >> m.split;
      if (kw != "split" || m.split.empty())
        throw IoError(cat("manifest '", path, "' line ", lineno,
                          ": expected 'split <tag>' header"));
      have_split = true;
      continue;
    }
    ManifestEntry e;
    if (!(ls >> e.subject >> e.age >> e.path))
      throw IoError(cat("manifest '", path, "' line ", lineno,
                        ": expected 'subject_id age_years path'"));
    m.entries.push_back(std::move(e));
  }
  if (!have_split) throw IoError(cat("manifest '", path, "': missing 'split <tag>' header"));
  return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot open manifest '", path, "' for writing"));
  os << "split " << m.split << "\n";
  for (const auto& e : m.entries) os << e.subject << " " << e.age << " " << e.path << "\n";
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

std::string manifest_relative(const std::string& manifest_path, const std::string& entry_path) {
  fs::path p(entry_path);
  if (p.is_absolute()) return entry_path;
  return (fs::path(manifest_path).parent_path() / p).string();
}

std::array<int64_t, 3> validate_manifest(const DatasetManifest& m,
                                         const std::string& manifest_path) {
  if (m.entries.empty()) throw ContractError(cat("manifest '", manifest_path, "' is empty"));
  std::map<std::string, double> last_age;
  std::array<int64_t, 3> dims{0, 0, 0};
  for (const auto& e : m.entries) {
    auto it = last_age.find(e.subject);
    if (it != last_age.end() && !(e.age > it->second))
      throw ContractError(cat("manifest: ages not strictly increasing for subject '",
                              e.subject, "' (", it->second, " then ", e.age, ")"));
    last_age[e.subject] = e.age;
    const std::string full = manifest_relative(manifest_path, e.path);
    Volume v = read_volume(full);
    std::array<int64_t, 3> cur{v.d, v.h, v.w};
    if (dims[0] == 0)
      dims = cur;
    else if (dims != cur)
      throw ContractError(cat("manifest: '", e.path, "' dims (", cur[0], ",", cur[1], ",",
                              cur[2], ") differ from (", dims[0], ",", dims[1], ",", dims[2],
                              ")"));
  }
  return dims;
}

}  // namespace volflow
