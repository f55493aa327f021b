#include "volflow/quantify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace volflow {

int64_t SegmentationMask::count() const {
  int64_t n = 0;
  for (uint8_t m : mask) n += m;
  return n;
}

namespace {

// 6-connected flood fill over an arbitrary predicate grid, fixed scan order.
// Returns per-voxel component labels (-1 outside) and component sizes.
struct Components {
  std::vector<int32_t> label;
  std::vector<int64_t> sizes;
};

Components connected_components(int64_t D, int64_t H, int64_t W,
                                const std::vector<uint8_t>& in) {
  Components out;
  out.label.assign(D * H * W, -1);
  std::vector<int64_t> stack;
  const int64_t strides[3] = {H * W, W, 1};
  for (int64_t start = 0; start < D * H * W; ++start) {
    if (!in[start] || out.label[start] >= 0) continue;
    const int32_t id = static_cast<int32_t>(out.sizes.size());
    int64_t size = 0;
    stack.push_back(start);
    out.label[start] = id;
    while (!stack.empty()) {
      const int64_t cur = stack.back();
      stack.pop_back();
      ++size;
      const int64_t cd = cur / strides[0];
      const int64_t ch = (cur / W) % H;
      const int64_t cw = cur % W;
      const int64_t coords[3] = {cd, ch, cw};
      const int64_t limits[3] = {D, H, W};
      for (int axis = 0; axis < 3; ++axis) {
        for (int dir = -1; dir <= 1; dir += 2) {
          const int64_t nc = coords[axis] + dir;
          if (nc < 0 || nc >= limits[axis]) continue;
          const int64_t nb = cur + dir * strides[axis];
          if (in[nb] && out.label[nb] < 0) {
            out.label[nb] = id;
            stack.push_back(nb);
          }
        }
      }
    }
    out.sizes.push_back(size);
  }
  return out;
}

// Fill holes: complement components not reachable from the volume border are
// added to the mask.
void fill_holes(int64_t D, int64_t H, int64_t W, std::vector<uint8_t>& mask) {
  std::vector<uint8_t> comp(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) comp[i] = mask[i] ? 0 : 1;
  auto cc = connected_components(D, H, W, comp);
  std::vector<uint8_t> touches_border(cc.sizes.size(), 0);
  auto visit = [&](int64_t id, int64_t ih, int64_t iw) {
    const int32_t lb = cc.label[(id * H + ih) * W + iw];
    if (lb >= 0) touches_border[lb] = 1;
  };
  for (int64_t ih = 0; ih < H; ++ih)
    for (int64_t iw = 0; iw < W; ++iw) {
      visit(0, ih, iw);
      visit(D - 1, ih, iw);
    }
  for (int64_t id = 0; id < D; ++id)
    for (int64_t iw = 0; iw < W; ++iw) {
      visit(id, 0, iw);
      visit(id, H - 1, iw);
    }
  for (int64_t id = 0; id < D; ++id)
    for (int64_t ih = 0; ih < H; ++ih) {
      visit(id, ih, 0);
      visit(id, ih, W - 1);
    }
  for (size_t i = 0; i < mask.size(); ++i) {
    const int32_t lb = cc.label[i];
    if (lb >= 0 && !touches_border[lb]) mask[i] = 1;
  }
}

}  // namespace

SegmentationMask brain_mask(const Volume& v, const QuantifyParams& p) {
  v.validate("brain_mask");
  if (v.dtype != VoxelType::u8) throw ContractError("brain_mask: expected an 8-bit volume");
  std::vector<uint8_t> band(v.count());
  for (int64_t i = 0; i < v.count(); ++i) {
    const double x = v.data_u8[i];
    band[i] = (x > p.t_air && x < p.t_skull) ? 1 : 0;
  }
  auto cc = connected_components(v.d, v.h, v.w, band);
  if (cc.sizes.empty()) throw ContractError("brain_mask: no voxels in the brain intensity band");
  const int32_t largest = static_cast<int32_t>(
      std::max_element(cc.sizes.begin(), cc.sizes.end()) - cc.sizes.begin());
  SegmentationMask m;
  m.d = v.d;
  m.h = v.h;
  m.w = v.w;
  m.mask.assign(v.count(), 0);
  for (int64_t i = 0; i < v.count(); ++i) m.mask[i] = cc.label[i] == largest ? 1 : 0;
  fill_holes(v.d, v.h, v.w, m.mask);
  m.method = "band-largest-component-fill-holes";
  m.threshold = p.t_air;
  if (m.count() == 0) throw ContractError("brain_mask: empty mask");
  return m;
}

SegmentationMask segment_ventricles(const Volume& v, const SegmentationMask& brain,
                                    const QuantifyParams& p) {
  v.validate("segment_ventricles");
  if (v.dtype != VoxelType::u8)
    throw ContractError("segment_ventricles: expected an 8-bit volume");
  if (brain.d != v.d || brain.h != v.h || brain.w != v.w)
    throw ContractError("segment_ventricles: brain mask dims do not match volume");
  const int64_t brain_vox = brain.count();
  if (brain_vox == 0) throw ContractError("segment_ventricles: empty brain mask");

  std::vector<uint8_t> cand(v.count());
  for (int64_t i = 0; i < v.count(); ++i)
    cand[i] = (brain.mask[i] && static_cast<double>(v.data_u8[i]) < p.t_ventricle) ? 1 : 0;
  auto cc = connected_components(v.d, v.h, v.w, cand);

  const auto min_size =
      static_cast<int64_t>(std::ceil(p.min_component_frac * static_cast<double>(brain_vox)));
  SegmentationMask m;
  m.d = v.d;
  m.h = v.h;
  m.w = v.w;
  m.mask.assign(v.count(), 0);
  for (int64_t i = 0; i < v.count(); ++i) {
    const int32_t lb = cc.label[i];
    if (lb >= 0 && cc.sizes[lb] >= min_size) m.mask[i] = 1;
  }
  m.method = "threshold-components";
  m.threshold = p.t_ventricle;
  return m;  // empty result is a valid zero-volume measurement
}

VolumeCurve normalized_volume_curve(const std::string& subject,
                                    const std::vector<std::pair<double, int64_t>>& vent_by_year,
                                    int64_t brain0) {
  if (brain0 <= 0)
    throw ContractError(cat("normalized_volume_curve: year-0 brain volume must be > 0, got ",
                            brain0));
  VolumeCurve out;
  for (const auto& [year, vent] : vent_by_year) {
    CurvePoint pt;
    pt.subject = subject;
    pt.year = year;
    pt.ventricle_vox = vent;
    pt.brain0_vox = brain0;
    pt.percent = 100.0 * static_cast<double>(vent) / static_cast<double>(brain0);
    out.push_back(pt);
  }
  return out;
}

std::vector<MaePoint> mae_by_year(const VolumeCurve& pred, const VolumeCurve& gt) {
  std::map<std::pair<std::string, double>, double> pred_map, gt_map;
  for (const auto& p : pred) pred_map[{p.subject, p.year}] = p.percent;
  for (const auto& g : gt) gt_map[{g.subject, g.year}] = g.percent;
  std::string missing;
  for (const auto& [k, v] : gt_map)
    if (!pred_map.count(k)) missing += cat(" (", k.first, ",", k.second, ")");
  for (const auto& [k, v] : pred_map)
    if (!gt_map.count(k)) missing += cat(" (", k.first, ",", k.second, ")");
  if (!missing.empty())
    throw ContractError(cat("mae_by_year: mismatched (subject, year) keys:", missing));

  std::map<double, std::pair<double, int>> acc;  // year -> (sum abs err, n)
  for (const auto& [k, gv] : gt_map) {
    const double err = std::abs(pred_map[k] - gv);
    auto& a = acc[k.second];
    a.first += err;
    a.second += 1;
  }
  std::vector<MaePoint> out;
  for (const auto& [year, a] : acc)
    out.push_back({year, a.first / static_cast<double>(a.second), a.second});
  return out;
}

void write_curves_csv(const std::string& path, const VolumeCurve& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os << "subject,year,ventricle_vox,brain0_vox,percent\n";
  os.precision(10);
  for (const auto& p : curve)
    os << p.subject << "," << p.year << "," << p.ventricle_vox << "," << p.brain0_vox << ","
       << p.percent << "\n";
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

VolumeCurve read_curves_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open curves csv '", path, "'"));
  std::string line;
  if (!std::getline(is, line)) throw IoError(cat("empty curves csv '", path, "'"));
  VolumeCurve out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    CurvePoint p;
    char comma;
    if (!std::getline(ls, p.subject, ',') ||
        !(ls >> p.year >> comma >> p.ventricle_vox >> comma >> p.brain0_vox >> comma >>
          p.percent))
      throw IoError(cat("curves csv '", path, "' line ", lineno, ": parse error"));
    out.push_back(std::move(p));
  }
  return out;
}

void write_mae_csv(const std::string& path, const std::vector<MaePoint>& mae) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os << "year,mae_percent,n_subjects\n";
  os.precision(10);
  for (const auto& m : mae) os << m.year << "," << m.mae_percent << "," << m.n_subjects << "\n";
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

void write_mask_slice_pgm(const std::string& path, const Volume& v, const SegmentationMask& m) {
  if (m.d != v.d || m.h != v.h || m.w != v.w)
    throw ContractError("write_mask_slice_pgm: mask dims do not match volume");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  const int64_t slice = v.d / 2;
  os << "P5\n" << v.w << " " << v.h << "\n255\n";
  for (int64_t ih = 0; ih < v.h; ++ih)
    for (int64_t iw = 0; iw < v.w; ++iw) {
      const int64_t i = v.index(slice, ih, iw);
      // Mask voxels render white, background shows the source at half range.
      const uint8_t px = m.mask[i] ? 255 : static_cast<uint8_t>(v.data_u8[i] / 2);
      os.put(static_cast<char>(px));
    }
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

}  // namespace volflow
