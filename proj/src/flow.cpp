#include "volflow/flow.hpp"

#include <cmath>

#include "volflow/binio.hpp"
#include "volflow/linalg.hpp"

namespace volflow {

namespace {
constexpr double kMinMixLogDet = -27.631021115928547;  // ln(1e-12)
}

void FlowConfig::validate() const {
  if (levels < 1 || depth < 1 || width < 1)
    throw ContractError(cat("flow config: levels/depth/width must be >= 1, got L=", levels,
                            " K=", depth, " width=", width));
  if (channels < 1) throw ContractError(cat("flow config: channels must be >= 1, got ", channels));
  const int64_t div = int64_t(1) << levels;
  if (resolution < div || resolution % div != 0)
    throw ContractError(cat("flow config: resolution ", resolution,
                            " must be divisible by 2^levels = ", div));
}

std::vector<Shape> pyramid_level_shapes(const FlowConfig& cfg) {
  cfg.validate();
  std::vector<Shape> out;
  int64_t r = cfg.resolution;
  int64_t cs = cfg.channels;
  for (int l = 0; l < cfg.levels; ++l) {
    r /= 2;
    cs *= 8;
    if (l < cfg.levels - 1) {
      out.emplace_back(r, r, r, cs / 2);
      cs /= 2;
    } else {
      out.emplace_back(r, r, r, cs);
    }
  }
  return out;
}

namespace {

template <class T>
Var<T> param(const Shape& s, std::vector<T> v) {
  return Var<T>::leaf(s, std::move(v), /*requires_grad=*/true);
}

template <class T>
std::vector<T> randn(int64_t n, double std, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal() * std);
  return v;
}

// Coupling net: lo half conditions the hi half. Scale is bounded through
// sigmoid(raw + 2); the final conv is zero-initialized so a fresh net applies
// a constant sigmoid(2) scale and zero shift.
template <class T>
struct CouplingEval {
  Var<T> s, t;
};

template <class T>
CouplingEval<T> coupling_eval(const CouplingNet<T>& net, const Var<T>& half, int width,
                              int64_t c_full) {
  auto h1 = ops::relu(ops::conv3d(half, net.w1, net.b1, width));
  auto h2 = ops::relu(ops::conv3d(h1, net.w2, net.b2, width));
  auto o = ops::conv3d(h2, net.w3, net.b3, c_full);
  auto raw = ops::channels_lo(o);
  auto t = ops::channels_hi(o);
  auto s = ops::sigmoid(ops::add_scalar(raw, 2.0));
  return {s, t};
}

}  // namespace

template <class T>
FlowModel<T>::FlowModel(const FlowConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int64_t k = 3;
  int64_t cs = cfg_.channels;
  for (int l = 0; l < cfg_.levels; ++l) {
    cs *= 8;
    FlowLevelParams<T> level;
    for (int d = 0; d < cfg_.depth; ++d) {
      FlowStep<T> step;
      step.actnorm_scale = param<T>(Shape(1, 1, 1, cs), std::vector<T>(cs, T(1)));
      step.actnorm_bias = param<T>(Shape(1, 1, 1, cs), std::vector<T>(cs, T(0)));
      step.mix = param<T>(Shape(1, 1, cs, cs), linalg::random_rotation<T>(cs, rng));
      const int64_t ch = cs / 2;
      const int64_t w = cfg_.width;
      step.net.w1 =
          param<T>(Shape(k, k, k, ch * w), randn<T>(k * k * k * ch * w,
                                                    std::sqrt(2.0 / double(k * k * k * ch)), rng));
      step.net.b1 = param<T>(Shape(1, 1, 1, w), std::vector<T>(w, T(0)));
      step.net.w2 =
          param<T>(Shape(k, k, k, w * w), randn<T>(k * k * k * w * w,
                                                   std::sqrt(2.0 / double(k * k * k * w)), rng));
      step.net.b2 = param<T>(Shape(1, 1, 1, w), std::vector<T>(w, T(0)));
      step.net.w3 = param<T>(Shape(k, k, k, w * cs), std::vector<T>(k * k * k * w * cs, T(0)));
      step.net.b3 = param<T>(Shape(1, 1, 1, cs), std::vector<T>(cs, T(0)));
      level.steps.push_back(std::move(step));
    }
    if (l < cfg_.levels - 1) {
      // Split prior: conv of the passthrough half emits (mu, logsd) for the
      // emitted half. Zero-init = standard normal.
      const int64_t ch = cs / 2;
      level.prior_w = param<T>(Shape(k, k, k, ch * cs), std::vector<T>(k * k * k * ch * cs, T(0)));
      level.prior_b = param<T>(Shape(1, 1, 1, cs), std::vector<T>(cs, T(0)));
      cs /= 2;
    } else if (cfg_.learn_top) {
      // Top prior reads a constant zero volume, so a 1x1x1 kernel carries the
      // same information (bias only) at a fraction of the cost.
      level.prior_w = param<T>(Shape(1, 1, 1, cs * 2 * cs), std::vector<T>(cs * 2 * cs, T(0)));
      level.prior_b = param<T>(Shape(1, 1, 1, 2 * cs), std::vector<T>(2 * cs, T(0)));
    }
    levels_.push_back(std::move(level));
  }
}

template <class T>
typename FlowModel<T>::EncodeResult FlowModel<T>::encode_full(const Var<T>& x,
                                                              bool init_actnorm) {
  const Shape& xs = x.shape();
  Shape want(cfg_.resolution, cfg_.resolution, cfg_.resolution, cfg_.channels);
  if (!(xs == want))
    throw ContractError(cat("encode: input shape ", xs.str(), " does not match config ",
                            want.str()));
  const bool do_init = init_actnorm && !actnorm_initialized_;

  EncodeResult res;
  Var<T> logdet = Var<T>::scalar(T(0));
  Var<T> prior_logp = Var<T>::scalar(T(0));
  Var<T> h = x;

  for (int l = 0; l < cfg_.levels; ++l) {
    h = ops::squeeze2(h);
    const int64_t cs = h.shape().c;
    const double n_vox = static_cast<double>(h.shape().spatial());
    int step_idx = 0;
    for (auto& step : levels_[l].steps) {
      if (do_init) {
        // Data-dependent init: post-actnorm activations get zero mean and
        // unit variance per channel on this batch.
        const auto& hv = h.value();
        const int64_t spatial = h.shape().spatial();
        auto& sv = step.actnorm_scale.values_mut();
        auto& bv = step.actnorm_bias.values_mut();
        for (int64_t c = 0; c < cs; ++c) {
          double mean = 0.0;
          for (int64_t p = 0; p < spatial; ++p) mean += hv[p * cs + c];
          mean /= double(spatial);
          double var = 0.0;
          for (int64_t p = 0; p < spatial; ++p) {
            const double d = hv[p * cs + c] - mean;
            var += d * d;
          }
          var /= double(spatial);
          sv[c] = static_cast<T>(1.0 / (std::sqrt(var) + 1e-6));
          bv[c] = static_cast<T>(-mean);
        }
      }
      for (int64_t c = 0; c < cs; ++c) {
        if (step.actnorm_scale.value()[c] == T(0))
          throw ContractError(cat("actnorm: zero scale at level ", l + 1, " step ",
                                  step_idx + 1, " channel ", c));
      }
      h = ops::channel_affine(h, step.actnorm_scale, step.actnorm_bias);
      logdet = ops::add(
          logdet, ops::mul_scalar(ops::sum(ops::log(ops::abs(step.actnorm_scale))), n_vox));

      Var<T> lad;
      try {
        lad = ops::logabsdet(step.mix);
      } catch (const ContractError& e) {
        throw ContractError(cat("1x1x1 mix at level ", l + 1, " step ", step_idx + 1, ": ",
                                e.what()));
      }
      if (static_cast<double>(lad.value()[0]) < kMinMixLogDet)
        throw ContractError(cat("1x1x1 mix at level ", l + 1, " step ", step_idx + 1,
                                ": |det| below 1e-12"));
      h = ops::channel_matmul(h, step.mix);
      logdet = ops::add(logdet, ops::mul_scalar(lad, n_vox));

      auto xa = ops::channels_lo(h);
      auto xb = ops::channels_hi(h);
      auto st = coupling_eval(step.net, xa, cfg_.width, cs);
      auto yb = ops::add(ops::mul(st.s, xb), st.t);
      h = ops::concat_channels(xa, yb);
      logdet = ops::add(logdet, ops::sum(ops::log(st.s)));
      ++step_idx;
    }

    if (l < cfg_.levels - 1) {
      auto pass = ops::channels_lo(h);
      auto z = ops::channels_hi(h);
      auto po = ops::conv3d(pass, levels_[l].prior_w, levels_[l].prior_b, cs);
      auto mu = ops::channels_lo(po);
      auto logsd = ops::channels_hi(po);
      prior_logp = ops::add(prior_logp, ops::gaussian_logp_sum(z, mu, logsd));
      res.pyramid.levels.push_back(z);
      h = pass;
    } else {
      Var<T> mu, logsd;
      if (cfg_.learn_top) {
        auto zeros = Var<T>::full(h.shape(), T(0));
        auto po = ops::conv3d(zeros, levels_[l].prior_w, levels_[l].prior_b, 2 * cs);
        mu = ops::channels_lo(po);
        logsd = ops::channels_hi(po);
      } else {
        mu = Var<T>::full(h.shape(), T(0));
        logsd = Var<T>::full(h.shape(), T(0));
      }
      prior_logp = ops::add(prior_logp, ops::gaussian_logp_sum(h, mu, logsd));
      res.pyramid.levels.push_back(h);
    }
  }

  if (do_init) actnorm_initialized_ = true;
  res.logdet = logdet;
  res.prior_logp = prior_logp;
  return res;
}

template <class T>
std::pair<LatentPyramid<T>, double> FlowModel<T>::encode(const Var<T>& x) {
  auto res = encode_full(x);
  return {res.pyramid, static_cast<double>(res.logdet.value()[0])};
}

template <class T>
void FlowModel<T>::validate_pyramid(const LatentPyramid<T>& z) const {
  const auto shapes = pyramid_level_shapes(cfg_);
  if (z.levels.size() != shapes.size())
    throw ContractError(cat("pyramid: expected ", shapes.size(), " levels, got ",
                            z.levels.size()));
  for (size_t l = 0; l < shapes.size(); ++l) {
    if (!(z.levels[l].shape() == shapes[l]))
      throw ContractError(cat("pyramid: level ", l + 1, " has shape ",
                              z.levels[l].shape().str(), ", shape law requires ",
                              shapes[l].str()));
  }
}

template <class T>
Var<T> FlowModel<T>::decode(const LatentPyramid<T>& z) const {
  validate_pyramid(z);
  NoGradGuard ng;
  Var<T> h = z.levels.back();
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    if (l < cfg_.levels - 1) h = ops::concat_channels(h, z.levels[l]);
    const int64_t cs = h.shape().c;
    for (int d = cfg_.depth - 1; d >= 0; --d) {
      const auto& step = levels_[l].steps[d];
      // inverse coupling
      auto ya = ops::channels_lo(h);
      auto yb = ops::channels_hi(h);
      auto st = coupling_eval(step.net, ya, cfg_.width, cs);
      auto xb = ops::div(ops::sub(yb, st.t), st.s);
      h = ops::concat_channels(ya, xb);
      // inverse 1x1x1 mix
      double lad;
      try {
        lad = linalg::log_abs_det(cs, step.mix.value().data(), "1x1x1 mix");
      } catch (const ContractError& e) {
        throw ContractError(cat("1x1x1 mix at level ", l + 1, " step ", d + 1, ": ", e.what()));
      }
      if (lad < kMinMixLogDet)
        throw ContractError(cat("1x1x1 mix at level ", l + 1, " step ", d + 1,
                                ": |det| below 1e-12"));
      auto inv = linalg::inverse(cs, step.mix.value().data(), "1x1x1 mix");
      h = ops::channel_matmul(h, Var<T>::leaf(Shape(1, 1, cs, cs), std::move(inv)));
      // inverse actnorm
      for (int64_t c = 0; c < cs; ++c) {
        if (step.actnorm_scale.value()[c] == T(0))
          throw ContractError(cat("actnorm: zero scale at level ", l + 1, " step ", d + 1,
                                  " channel ", c));
      }
      h = ops::channel_affine_inverse(h, step.actnorm_scale, step.actnorm_bias);
    }
    h = ops::unsqueeze2(h);
  }
  return h;
}

template <class T>
Var<T> FlowModel<T>::log_likelihood_var(const Var<T>& x) {
  auto res = encode_full(x);
  auto ll = ops::add(res.prior_logp, res.logdet);
  if (!std::isfinite(static_cast<double>(ll.value()[0])))
    throw NonFiniteError("log_likelihood: non-finite result (training divergence?)");
  return ll;
}

template <class T>
double FlowModel<T>::log_likelihood(const Var<T>& x) {
  NoGradGuard ng;
  return static_cast<double>(log_likelihood_var(x).value()[0]);
}

template <class T>
LatentPyramid<T> FlowModel<T>::sample(double temperature, Rng& rng) const {
  NoGradGuard ng;
  const auto shapes = pyramid_level_shapes(cfg_);
  LatentPyramid<T> out;
  out.levels.resize(shapes.size());

  auto draw = [&](const Var<T>& mu, const Var<T>& logsd) {
    const auto& mv = mu.value();
    const auto& lv = logsd.value();
    std::vector<T> z(mv.size());
    for (size_t i = 0; i < z.size(); ++i) {
      const double sd = std::exp(static_cast<double>(lv[i]));
      z[i] = static_cast<T>(static_cast<double>(mv[i]) +
                            temperature * sd * (temperature == 0.0 ? 0.0 : rng.normal()));
    }
    return Var<T>::leaf(mu.shape(), std::move(z));
  };

  // Top level first, then walk the inverse pass to expose each passthrough
  // half for its split prior.
  const int L = cfg_.levels;
  {
    const Shape& ts = shapes.back();
    Var<T> mu, logsd;
    if (cfg_.learn_top) {
      auto zeros = Var<T>::full(ts, T(0));
      auto po = ops::conv3d(zeros, levels_[L - 1].prior_w, levels_[L - 1].prior_b, 2 * ts.c);
      mu = ops::channels_lo(po);
      logsd = ops::channels_hi(po);
    } else {
      mu = Var<T>::full(ts, T(0));
      logsd = Var<T>::full(ts, T(0));
    }
    out.levels[L - 1] = draw(mu, logsd);
  }

  Var<T> h = out.levels[L - 1];
  for (int l = L - 1; l >= 1; --l) {
    const int64_t cs = h.shape().c;
    for (int d = cfg_.depth - 1; d >= 0; --d) {
      const auto& step = levels_[l].steps[d];
      auto ya = ops::channels_lo(h);
      auto yb = ops::channels_hi(h);
      auto st = coupling_eval(step.net, ya, cfg_.width, cs);
      auto xb = ops::div(ops::sub(yb, st.t), st.s);
      h = ops::concat_channels(ya, xb);
      auto inv = linalg::inverse(cs, step.mix.value().data(), "1x1x1 mix");
      h = ops::channel_matmul(h, Var<T>::leaf(Shape(1, 1, cs, cs), std::move(inv)));
      h = ops::channel_affine_inverse(h, step.actnorm_scale, step.actnorm_bias);
    }
    h = ops::unsqueeze2(h);
    // h is now the passthrough half of level l-1; draw its emitted half.
    auto po = ops::conv3d(h, levels_[l - 1].prior_w, levels_[l - 1].prior_b, 2 * h.shape().c);
    auto mu = ops::channels_lo(po);
    auto logsd = ops::channels_hi(po);
    out.levels[l - 1] = draw(mu, logsd);
    h = ops::concat_channels(h, out.levels[l - 1]);
  }
  return out;
}

template <class T>
std::vector<Var<T>> FlowModel<T>::parameters() const {
  std::vector<Var<T>> out;
  for (const auto& level : levels_) {
    for (const auto& step : level.steps) {
      out.push_back(step.actnorm_scale);
      out.push_back(step.actnorm_bias);
      out.push_back(step.mix);
      out.push_back(step.net.w1);
      out.push_back(step.net.b1);
      out.push_back(step.net.w2);
      out.push_back(step.net.b2);
      out.push_back(step.net.w3);
      out.push_back(step.net.b3);
    }
    if (level.prior_w.valid()) {
      out.push_back(level.prior_w);
      out.push_back(level.prior_b);
    }
  }
  return out;
}

// ---------------- checkpoint io ----------------

template <class T>
void save_flow(const FlowModel<T>& model, const std::string& path) {
  auto os = binio::open_out(path);
  const FlowConfig& c = model.config();
  binio::put_bytes(os, "VFCK", 4);
  binio::put_le<uint32_t>(os, 1);
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(c.resolution));
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(c.channels));
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(c.levels));
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(c.depth));
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(c.width));
  binio::put_le<uint8_t>(os, 0);  // coupling kind: affine
  binio::put_le<uint8_t>(os, 0);  // permutation kind: invertible 1x1x1 conv
  binio::put_le<uint8_t>(os, c.learn_top ? 1 : 0);
  binio::put_le<uint8_t>(os, model.actnorm_initialized() ? 1 : 0);
  auto params = model.parameters();
  for (const auto& p : params)
    for (const T& v : p.value()) binio::put_f32(os, static_cast<float>(v));
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

template <class T>
FlowModel<T> load_flow(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "VFCK", path);
  uint32_t version = 0, r = 0, c = 0, l = 0, k = 0, w = 0;
  uint8_t coupling = 0, perm = 0, learn_top = 0, an_init = 0;
  if (!binio::get_le(is, &version) || !binio::get_le(is, &r) || !binio::get_le(is, &c) ||
      !binio::get_le(is, &l) || !binio::get_le(is, &k) || !binio::get_le(is, &w) ||
      !binio::get_le(is, &coupling) || !binio::get_le(is, &perm) ||
      !binio::get_le(is, &learn_top) || !binio::get_le(is, &an_init))
    throw IoError(cat("truncated header in '", path, "'"));
  if (version != 1) throw IoError(cat("unsupported VFCK version ", version, " in '", path, "'"));
  if (coupling != 0 || perm != 0)
    throw IoError(cat("unsupported layer kinds in '", path, "'"));
  FlowConfig cfg;
  cfg.resolution = r;
  cfg.channels = c;
  cfg.levels = static_cast<int>(l);
  cfg.depth = static_cast<int>(k);
  cfg.width = static_cast<int>(w);
  cfg.learn_top = learn_top != 0;
  cfg.validate();
  FlowModel<T> model(cfg, /*seed=*/0);
  model.set_actnorm_initialized(an_init != 0);
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

// ---------------- latent pyramid io ----------------

template <class T>
void save_pyramid(const LatentPyramid<T>& z, const std::string& path) {
  auto os = binio::open_out(path);
  binio::put_bytes(os, "VFLT", 4);
  binio::put_le<uint32_t>(os, 1);
  binio::put_le<uint32_t>(os, static_cast<uint32_t>(z.levels.size()));
  for (const auto& lv : z.levels) {
    const Shape& s = lv.shape();
    binio::put_le<uint32_t>(os, static_cast<uint32_t>(s.d));
    binio::put_le<uint32_t>(os, static_cast<uint32_t>(s.h));
    binio::put_le<uint32_t>(os, static_cast<uint32_t>(s.w));
    binio::put_le<uint32_t>(os, static_cast<uint32_t>(s.c));
  }
  for (const auto& lv : z.levels)
    for (const T& v : lv.value()) binio::put_f32(os, static_cast<float>(v));
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

template <class T>
LatentPyramid<T> load_pyramid(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "VFLT", path);
  uint32_t version = 0, nlev = 0;
  if (!binio::get_le(is, &version) || !binio::get_le(is, &nlev))
    throw IoError(cat("truncated header in '", path, "'"));
  if (version != 1) throw IoError(cat("unsupported VFLT version ", version, " in '", path, "'"));
  if (nlev == 0 || nlev > 16) throw IoError(cat("implausible level count ", nlev, " in '", path, "'"));
  std::vector<Shape> shapes(nlev);
  for (auto& s : shapes) {
    uint32_t d, h, w, c;
    if (!binio::get_le(is, &d) || !binio::get_le(is, &h) || !binio::get_le(is, &w) ||
        !binio::get_le(is, &c))
      throw IoError(cat("truncated header in '", path, "'"));
    s = Shape(d, h, w, c);
    s.validate("pyramid level");
  }
  LatentPyramid<T> out;
  for (const auto& s : shapes) {
    std::vector<T> v(s.count());
    for (auto& x : v) {
      float f;
      if (!binio::get_f32(is, &f)) throw IoError(cat("truncated data in '", path, "'"));
      x = static_cast<T>(f);
    }
    out.levels.push_back(Var<T>::leaf(s, std::move(v)));
  }
  return out;
}

template class FlowModel<float>;
template class FlowModel<double>;
template void save_flow<float>(const FlowModel<float>&, const std::string&);
template void save_flow<double>(const FlowModel<double>&, const std::string&);
template FlowModel<float> load_flow<float>(const std::string&);
template FlowModel<double> load_flow<double>(const std::string&);
template void save_pyramid<float>(const LatentPyramid<float>&, const std::string&);
template void save_pyramid<double>(const LatentPyramid<double>&, const std::string&);
template LatentPyramid<float> load_pyramid<float>(const std::string&);
template LatentPyramid<double> load_pyramid<double>(const std::string&);

}  // namespace volflow
