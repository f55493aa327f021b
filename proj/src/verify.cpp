#include "volflow/verify.hpp"

#include <cmath>

#include "volflow/flow.hpp"
#include "volflow/oracles.hpp"
#include "volflow/temporal.hpp"
#include "volflow/trainer.hpp"

namespace volflow {

namespace {

template <class T>
Var<T> random_input(const Shape& s, Rng& rng, double scale = 0.3) {
  std::vector<T> v(s.count());
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return Var<T>::leaf(s, std::move(v));
}

// Perturb parameters away from init so the checks do not run on special
// (zero / identity) points.
template <class T>
void jitter_params(FlowModel<T>& model, Rng& rng, double sigma) {
  for (auto& p : model.parameters())
    for (auto& v : p.values_mut()) v += static_cast<T>(rng.normal() * sigma);
}

template <class T>
VerifyCheck check_invertibility(int64_t r, int levels, uint64_t seed, double tol) {
  FlowConfig cfg;
  cfg.resolution = r;
  cfg.channels = 1;
  cfg.levels = levels;
  cfg.depth = 2;
  cfg.width = 16;
  FlowModel<T> model(cfg, derive_seed(seed, "verify-model"));
  Rng rng(derive_seed(seed, "verify-invert"));
  jitter_params(model, rng, 0.01);
  NoGradGuard ng;
  double worst = 0.0;
  const int n_trials = 100;
  for (int i = 0; i < n_trials; ++i) {
    auto x = random_input<T>(Shape(r, r, r, 1), rng);
    auto [z, logdet] = model.encode(x);
    (void)logdet;
    auto y = model.decode(z);
    const auto& xv = x.value();
    const auto& yv = y.value();
    for (size_t j = 0; j < xv.size(); ++j)
      worst = std::max(worst,
                       std::abs(static_cast<double>(xv[j]) - static_cast<double>(yv[j])));
  }
  VerifyCheck c;
  c.name = cat("invertibility R=", r, " L=", levels, " (", n_trials, " volumes)");
  c.pass = worst < tol;
  c.detail = cat("max |decode(encode(x)) - x| = ", worst, ", tolerance ", tol);
  return c;
}

template <class T>
VerifyCheck check_jacobian_logdet(uint64_t seed) {
  // Total input dimension 64: 4^3 x 1 channel, one level.
  FlowConfig cfg;
  cfg.resolution = 4;
  cfg.channels = 1;
  cfg.levels = 1;
  cfg.depth = 2;
  cfg.width = 8;
  FlowModel<T> model(cfg, derive_seed(seed, "verify-jac-model"));
  Rng rng(derive_seed(seed, "verify-jac"));
  jitter_params(model, rng, 0.02);
  NoGradGuard ng;

  auto x0var = random_input<T>(Shape(4, 4, 4, 1), rng);
  std::vector<double> x0(x0var.value().begin(), x0var.value().end());

  auto encode_flat = [&](const std::vector<double>& in) {
    std::vector<T> tv(in.begin(), in.end());
    auto x = Var<T>::leaf(Shape(4, 4, 4, 1), std::move(tv));
    auto [z, logdet] = model.encode(x);
    (void)logdet;
    // Flatten the pyramid in level order; the map R^64 -> R^64.
    std::vector<double> out;
    out.reserve(64);
    for (const auto& lv : z.levels)
      for (const T& v : lv.value()) out.push_back(static_cast<double>(v));
    return out;
  };

  auto x0v = Var<T>::leaf(Shape(4, 4, 4, 1), std::vector<T>(x0.begin(), x0.end()));
  auto [z, logdet] = model.encode(x0v);
  (void)z;
  const double analytic = logdet;
  const double fd = oracles::fd_jacobian_log_abs_det(encode_flat, x0, 1e-4);
  VerifyCheck c;
  c.name = "log-det vs dense finite-difference Jacobian (dim 64)";
  const double err = std::abs(analytic - fd);
  c.pass = err < 1e-3;
  c.detail = cat("analytic ", analytic, ", dense-Jacobian ", fd, ", |diff| = ", err);
  return c;
}

template <class T>
VerifyCheck check_nll_gradient(uint64_t seed) {
  FlowConfig cfg;
  cfg.resolution = 4;
  cfg.channels = 1;
  cfg.levels = 1;
  cfg.depth = 1;
  cfg.width = 4;
  FlowModel<T> model(cfg, derive_seed(seed, "verify-grad-model"));
  Rng rng(derive_seed(seed, "verify-grad"));
  jitter_params(model, rng, 0.02);
  auto x = random_input<T>(Shape(4, 4, 4, 1), rng);

  auto nll_value = [&]() {
    NoGradGuard ng;
    return -model.log_likelihood(x);
  };

  double worst = 0.0;
  for (auto& p : model.parameters()) {
    auto loss = ops::mul_scalar(model.log_likelihood_var(x), -1.0);
    backward(loss);
    std::vector<double> analytic;
    if (p.has_grad())
      analytic.assign(p.grad().begin(), p.grad().end());
    else
      analytic.assign(p.count(), 0.0);
    for (auto& q : model.parameters()) q.zero_grad();
    const auto fd = oracles::fd_gradient(p, nll_value, 1e-4);
    worst = std::max(worst, oracles::max_rel_err(analytic, fd, 1e-3));
  }
  VerifyCheck c;
  c.name = "dNLL/dtheta vs central finite differences (1-level toy)";
  c.pass = worst < 1e-4;
  c.detail = cat("max relative error ", worst, ", tolerance 1e-4");
  return c;
}

template <class T>
VerifyCheck check_temporal_gradient(uint64_t seed) {
  TemporalConfig cfg;
  cfg.level_channels = {4, 16};
  cfg.level_layers = {1, 2};
  TemporalModel<T> model(cfg, derive_seed(seed, "verify-temporal-model"), 0.05);
  Rng rng(derive_seed(seed, "verify-temporal"));
  auto src = Var<T>::leaf(Shape(3, 3, 3, 4), [&] {
    std::vector<T> v(27 * 4);
    for (auto& x : v) x = static_cast<T>(rng.uniform());
    return v;
  }());
  auto tgt = Var<T>::leaf(Shape(3, 3, 3, 4), [&] {
    std::vector<T> v(27 * 4);
    for (auto& x : v) x = static_cast<T>(rng.uniform());
    return v;
  }());

  auto mse_value = [&]() {
    NoGradGuard ng;
    auto pred = model.predict_level(0, src);
    auto diff = ops::sub(pred, tgt);
    return static_cast<double>(ops::mean(ops::mul(diff, diff)).value()[0]);
  };

  double worst = 0.0;
  for (auto& p : model.level_parameters(0)) {
    auto pred = model.predict_level(0, src);
    auto diff = ops::sub(pred, tgt);
    auto loss = ops::mean(ops::mul(diff, diff));
    backward(loss);
    std::vector<double> analytic;
    if (p.has_grad())
      analytic.assign(p.grad().begin(), p.grad().end());
    else
      analytic.assign(p.count(), 0.0);
    for (auto& q : model.level_parameters(0)) q.zero_grad();
    const auto fd = oracles::fd_gradient(p, mse_value, 1e-4);
    worst = std::max(worst, oracles::max_rel_err(analytic, fd, 1e-3));
  }
  VerifyCheck c;
  c.name = "dMSE/dphi vs central finite differences (temporal net)";
  c.pass = worst < 1e-4;
  c.detail = cat("max relative error ", worst, ", tolerance 1e-4");
  return c;
}

VerifyCheck check_shape_law(uint64_t seed) {
  VerifyCheck c;
  c.name = "latent shape law (20 random configs + reference config)";
  // Reference: R=128, C=1, L=5 must give channels (4,16,64,256,2048).
  FlowConfig ref;
  ref.resolution = 128;
  ref.channels = 1;
  ref.levels = 5;
  const auto shapes = pyramid_level_shapes(ref);
  const int64_t want[5] = {4, 16, 64, 256, 2048};
  bool ok = shapes.size() == 5;
  for (size_t l = 0; ok && l < 5; ++l) ok = shapes[l].c == want[l];
  Rng rng(derive_seed(seed, "verify-shape"));
  for (int i = 0; ok && i < 20; ++i) {
    FlowConfig cfg;
    cfg.levels = 1 + static_cast<int>(rng.below(4));
    cfg.channels = 1 + static_cast<int64_t>(rng.below(3));
    cfg.resolution = (int64_t(1) << cfg.levels) * (1 + static_cast<int64_t>(rng.below(4)));
    int64_t total = 0;
    for (const auto& s : pyramid_level_shapes(cfg)) total += s.count();
    ok = total == cfg.resolution * cfg.resolution * cfg.resolution * cfg.channels;
  }
  c.pass = ok;
  c.detail = ok ? "channel law and total-element law hold" : "shape law violated";
  return c;
}

}  // namespace

VerifyReport run_verify(int64_t resolution, int levels, Precision precision, uint64_t seed) {
  VerifyReport report;
  const double inv_tol = precision == Precision::f32 ? 1e-4 : 1e-8;
  if (precision == Precision::f32) {
    report.checks.push_back(check_invertibility<float>(resolution, levels, seed, inv_tol));
  } else {
    report.checks.push_back(check_invertibility<double>(resolution, levels, seed, inv_tol));
  }
  // Jacobian and gradient oracles need 64-bit headroom regardless of the
  // requested run precision.
  report.checks.push_back(check_jacobian_logdet<double>(seed));
  report.checks.push_back(check_nll_gradient<double>(seed));
  report.checks.push_back(check_temporal_gradient<double>(seed));
  report.checks.push_back(check_shape_law(seed));
  return report;
}

}  // namespace volflow
