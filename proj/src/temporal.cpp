#include "volflow/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "volflow/binio.hpp"

namespace volflow {

TemporalConfig TemporalConfig::from_flow(const FlowConfig& flow, bool final_linear) {
  TemporalConfig cfg;
  cfg.final_linear = final_linear;
  const auto shapes = pyramid_level_shapes(flow);
  for (size_t l = 0; l < shapes.size(); ++l) {
    cfg.level_channels.push_back(shapes[l].c);
    cfg.level_layers.push_back(static_cast<int>(std::min<int64_t>(int64_t(1) << l, 4)));
  }
  return cfg;
}

void TemporalConfig::validate() const {
  norm.validate();
  if (level_channels.empty() || level_channels.size() != level_layers.size())
    throw ContractError("temporal config: level tables empty or mismatched");
  for (size_t l = 0; l < level_channels.size(); ++l) {
    if (level_channels[l] < 1 || level_layers[l] < 1)
      throw ContractError(cat("temporal config: invalid level ", l + 1, " (channels ",
                              level_channels[l], ", layers ", level_layers[l], ")"));
  }
}

template <class T>
LatentPyramid<T> normalize_latent(const LatentPyramid<T>& z, const NormalizationParams& p) {
  p.validate();
  LatentPyramid<T> out;
  for (const auto& lv : z.levels)
    out.levels.push_back(
        ops::clip(ops::div_scalar(ops::add_scalar(lv, p.offset), p.range), 0.0, 1.0));
  return out;
}

template <class T>
LatentPyramid<T> denormalize_latent(const LatentPyramid<T>& zn, const NormalizationParams& p) {
  p.validate();
  LatentPyramid<T> out;
  for (size_t l = 0; l < zn.levels.size(); ++l) {
    for (const T& v : zn.levels[l].value()) {
      if (!(v >= T(0) && v <= T(1)))
        throw ContractError(cat("denormalize: level ", l + 1, " value ",
                                static_cast<double>(v), " outside [0, 1]"));
    }
    out.levels.push_back(ops::add_scalar(ops::mul_scalar(zn.levels[l], p.range), -p.offset));
  }
  return out;
}

template <class T>
TemporalModel<T>::TemporalModel(const TemporalConfig& cfg, uint64_t seed, double init_sigma)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int64_t k = 3;
  for (size_t l = 0; l < cfg_.level_channels.size(); ++l) {
    const int64_t c = cfg_.level_channels[l];
    std::vector<TemporalLayer<T>> layers;
    for (int i = 0; i < cfg_.level_layers[l]; ++i) {
      TemporalLayer<T> layer;
      std::vector<T> w(k * k * k * c * c);
      if (init_sigma > 0.0)
        for (auto& x : w) x = static_cast<T>(rng.normal() * init_sigma / std::sqrt(double(k * k * k * c)));
      layer.w = Var<T>::leaf(Shape(k, k, k, c * c), std::move(w), /*requires_grad=*/true);
      layer.b = Var<T>::leaf(Shape(1, 1, 1, c), std::vector<T>(c, T(0)), /*requires_grad=*/true);
      layers.push_back(std::move(layer));
    }
    levels_.push_back(std::move(layers));
  }
}

template <class T>
Var<T> TemporalModel<T>::predict_level(int level, const Var<T>& zn) const {
  if (level < 0 || level >= static_cast<int>(levels_.size()))
    throw ContractError(cat("predict_level: level ", level + 1, " out of range 1..",
                            levels_.size()));
  const int64_t c = cfg_.level_channels[level];
  if (zn.shape().c != c)
    throw ContractError(cat("predict_level: level ", level + 1, " expects ", c,
                            " channels, got shape ", zn.shape().str()));
  Var<T> h = zn;
  const auto& layers = levels_[level];
  for (size_t i = 0; i < layers.size(); ++i) {
    h = ops::conv3d(h, layers[i].w, layers[i].b, c);
    const bool last = i + 1 == layers.size();
    if (!last || !cfg_.final_linear) h = ops::relu(h);
  }
  return ops::add(h, zn);
}

template <class T>
LatentPyramid<T> TemporalModel<T>::predict(const LatentPyramid<T>& zn) const {
  if (zn.levels.size() != levels_.size())
    throw ContractError(cat("predict: pyramid has ", zn.levels.size(), " levels, model has ",
                            levels_.size()));
  LatentPyramid<T> out;
  for (size_t l = 0; l < zn.levels.size(); ++l)
    out.levels.push_back(predict_level(static_cast<int>(l), zn.levels[l]));
  return out;
}

template <class T>
std::vector<Var<T>> TemporalModel<T>::parameters() const {
  std::vector<Var<T>> out;
  for (const auto& layers : levels_)
    for (const auto& layer : layers) {
      out.push_back(layer.w);
      out.push_back(layer.b);
    }
  return out;
}

template <class T>
std::vector<Var<T>> TemporalModel<T>::level_parameters(int level) const {
  std::vector<Var<T>> out;
  for (const auto& layer : levels_.at(level)) {
    out.push_back(layer.w);
    out.push_back(layer.b);
  }
  return out;
}

template <class T>
TemporalTrainResult train_temporal(
    TemporalModel<T>& model,
    const std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>& pairs, double lr,
    int epochs, uint64_t seed) {
  if (pairs.empty()) throw ContractError("train_temporal: no pairs");
  if (epochs < 1) throw ContractError(cat("train_temporal: epochs must be >= 1, got ", epochs));
  const size_t n_levels = model.config().level_channels.size();
  for (const auto& [src, tgt] : pairs) {
    if (src.levels.size() != n_levels || tgt.levels.size() != n_levels)
      throw ContractError("train_temporal: pair pyramid level count mismatch");
  }

  TemporalTrainResult result;
  result.level_losses.assign(n_levels, {});
  Rng order_rng(derive_seed(seed, "temporal-order"));
  const size_t n = pairs.size();

  for (int e = 0; e < epochs; ++e) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    std::vector<double> loss_sums(n_levels, 0.0);
    for (size_t i = 0; i < n; ++i) {
      const auto& [src, tgt] = pairs[order[i]];
      for (size_t l = 0; l < n_levels; ++l) {
        auto pred = model.predict_level(static_cast<int>(l), src.levels[l]);
        auto diff = ops::sub(pred, tgt.levels[l]);
        auto loss = ops::mean(ops::mul(diff, diff));
        const double lv = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(lv)) {
          result.aborted = true;
          result.abort_reason = cat("train_temporal: non-finite loss at level ", l + 1,
                                    ", epoch ", e + 1);
          return result;
        }
        loss_sums[l] += lv;
        backward(loss);
        for (auto& p : model.level_parameters(static_cast<int>(l))) {
          if (!p.has_grad()) continue;
          const auto& g = p.grad();
          auto& vals = p.values_mut();
          for (size_t j = 0; j < vals.size(); ++j)
            vals[j] = static_cast<T>(static_cast<double>(vals[j]) -
                                     lr * static_cast<double>(g[j]));
          p.zero_grad();
        }
      }
    }
    for (size_t l = 0; l < n_levels; ++l)
      result.level_losses[l].push_back(loss_sums[l] / static_cast<double>(n));
  }
  return result;
}

template <class T>
TemporalEval<T> evaluate_temporal(
    const TemporalModel<T>& model,
    const std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>& pairs) {
  if (pairs.empty()) throw ContractError("evaluate_temporal: no pairs");
  NoGradGuard ng;
  const size_t n_levels = model.config().level_channels.size();
  TemporalEval<T> ev;
  ev.model_mse.assign(n_levels, 0.0);
  ev.identity_mse.assign(n_levels, 0.0);
  std::vector<int64_t> counts(n_levels, 0);
  for (const auto& [src, tgt] : pairs) {
    for (size_t l = 0; l < n_levels; ++l) {
      auto pred = ops::clip(model.predict_level(static_cast<int>(l), src.levels[l]), 0.0, 1.0);
      const auto& pv = pred.value();
      const auto& sv = src.levels[l].value();
      const auto& tv = tgt.levels[l].value();
      double se_model = 0.0, se_id = 0.0;
      for (size_t j = 0; j < pv.size(); ++j) {
        const double dm = static_cast<double>(pv[j]) - static_cast<double>(tv[j]);
        const double di = static_cast<double>(sv[j]) - static_cast<double>(tv[j]);
        se_model += dm * dm;
        se_id += di * di;
      }
      ev.model_mse[l] += se_model;
      ev.identity_mse[l] += se_id;
      counts[l] += static_cast<int64_t>(pv.size());
    }
  }
  double tm = 0.0, ti = 0.0;
  int64_t total = 0;
  for (size_t l = 0; l < n_levels; ++l) {
    tm += ev.model_mse[l];
    ti += ev.identity_mse[l];
    total += counts[l];
    ev.model_mse[l] /= static_cast<double>(counts[l]);
    ev.identity_mse[l] /= static_cast<double>(counts[l]);
  }
  ev.model_total = tm / static_cast<double>(total);
  ev.identity_total = ti / static_cast<double>(total);
  return ev;
}

// ---------------- checkpoint io ----------------

template <class T>
void save_temporal(const TemporalModel<T>& model, const std::string& path) {
  auto os = binio::open_out(path);
  const auto& cfg = model.config();
  binio::put_bytes(os, "VFTP", 4);
  binio::put_le<uint32_t>(os, 1);
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(cfg.level_channels.size()));
  for (size_t l = 0; l < cfg.level_channels.size(); ++l) {
    binio::put_le<uint32_t>(os, static_cast<uint32_t>(cfg.level_layers[l]));
    binio::put_le<uint32_t>(os, static_cast<uint32_t>(cfg.level_channels[l]));
  }
  binio::put_f64(os, cfg.norm.offset);
  binio::put_f64(os, cfg.norm.range);
  binio::put_le<uint8_t>(os, cfg.final_linear ? 1 : 0);
  for (const auto& p : model.parameters())
    for (const T& v : p.value()) binio::put_f32(os, static_cast<float>(v));
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

template <class T>
TemporalModel<T> load_temporal(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "VFTP", path);
  uint32_t version = 0, nlev = 0;
  if (!binio::get_le(is, &version) || !binio::get_le(is, &nlev))
    throw IoError(cat("truncated header in '", path, "'"));
  if (version != 1) throw IoError(cat("unsupported VFTP version ", version, " in '", path, "'"));
  if (nlev == 0 || nlev > 16) throw IoError(cat("implausible level count ", nlev, " in '", path, "'"));
  TemporalConfig cfg;
  for (uint32_t l = 0; l < nlev; ++l) {
    uint32_t layers = 0, width = 0;
    if (!binio::get_le(is, &layers) || !binio::get_le(is, &width))
      throw IoError(cat("truncated header in '", path, "'"));
    cfg.level_layers.push_back(static_cast<int>(layers));
    cfg.level_channels.push_back(width);
  }
  uint8_t final_linear = 0;
  if (!binio::get_f64(is, &cfg.norm.offset) || !binio::get_f64(is, &cfg.norm.range) ||
      !binio::get_le(is, &final_linear))
    throw IoError(cat("truncated header in '", path, "'"));
  cfg.final_linear = final_linear != 0;
  TemporalModel<T> model(cfg, /*seed=*/0, /*init_sigma=*/0.0);
  for (auto& p : model.parameters()) {
    auto& vals = p.values_mut();
    for (auto& v : vals) {
      float f;
      if (!binio::get_f32(is, &f)) throw IoError(cat("truncated parameters in '", path, "'"));
      v = static_cast<T>(f);
    }
  }
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0)
    throw IoError(cat("trailing bytes after parameters in '", path, "'"));
  return model;
}

#define VOLFLOW_INST(T)                                                                       \
  template LatentPyramid<T> normalize_latent<T>(const LatentPyramid<T>&,                     \
                                                const NormalizationParams&);                 \
  template LatentPyramid<T> denormalize_latent<T>(const LatentPyramid<T>&,                   \
                                                  const NormalizationParams&);               \
  template class TemporalModel<T>;                                                           \
  template TemporalTrainResult train_temporal<T>(                                            \
      TemporalModel<T>&, const std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>&,  \
      double, int, uint64_t);                                                                \
  template TemporalEval<T> evaluate_temporal<T>(                                             \
      const TemporalModel<T>&,                                                               \
      const std::vector<std::pair<LatentPyramid<T>, LatentPyramid<T>>>&);                    \
  template void save_temporal<T>(const TemporalModel<T>&, const std::string&);               \
  template TemporalModel<T> load_temporal<T>(const std::string&);
VOLFLOW_INST(float)
VOLFLOW_INST(double)
#undef VOLFLOW_INST

}  // namespace volflow
