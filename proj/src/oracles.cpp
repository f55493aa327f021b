#include "volflow/oracles.hpp"

#include <cmath>

namespace volflow::oracles {

std::vector<double> naive_conv3d(const Shape& xs, const std::vector<double>& x, int64_t k,
                                 int64_t cin, int64_t cout, const std::vector<double>& w,
                                 const std::vector<double>& b) {
  const int64_t D = xs.d, H = xs.h, W = xs.w;
  const int64_t pad = k / 2;
  std::vector<double> y(D * H * W * cout, 0.0);
  for (int64_t od = 0; od < D; ++od)
    for (int64_t oh = 0; oh < H; ++oh)
      for (int64_t ow = 0; ow < W; ++ow)
        for (int64_t co = 0; co < cout; ++co) {
          double acc = b.empty() ? 0.0 : b[co];
          for (int64_t kd = 0; kd < k; ++kd)
            for (int64_t kh = 0; kh < k; ++kh)
              for (int64_t kw = 0; kw < k; ++kw)
                for (int64_t ci = 0; ci < cin; ++ci) {
                  const int64_t id = od + kd - pad;
                  const int64_t ih = oh + kh - pad;
                  const int64_t iw = ow + kw - pad;
                  if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                  acc += x[((id * H + ih) * W + iw) * cin + ci] *
                         w[(((kd * k + kh) * k + kw) * cin + ci) * cout + co];
                }
          y[((od * H + oh) * W + ow) * cout + co] = acc;
        }
  return y;
}

template <class T>
std::vector<double> fd_gradient(Var<T> param, const std::function<double()>& eval, double h) {
  auto& vals = param.values_mut();
  std::vector<double> grad(vals.size());
  for (size_t i = 0; i < vals.size(); ++i) {
    const T saved = vals[i];
    vals[i] = static_cast<T>(static_cast<double>(saved) + h);
    const double up = eval();
    vals[i] = static_cast<T>(static_cast<double>(saved) - h);
    const double down = eval();
    vals[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

template std::vector<double> fd_gradient<float>(Var<float>, const std::function<double()>&,
                                                double);
template std::vector<double> fd_gradient<double>(Var<double>, const std::function<double()>&,
                                                 double);

double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& reference,
                   double floor) {
  if (analytic.size() != reference.size())
    throw ContractError(cat("max_rel_err: size mismatch ", analytic.size(), " vs ",
                            reference.size()));
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(reference[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - reference[i]) / denom);
  }
  return worst;
}

double fd_jacobian_log_abs_det(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    const std::vector<double>& x0, double h) {
  const size_t n = x0.size();
  std::vector<double> jac(n * n);
  for (size_t j = 0; j < n; ++j) {
    std::vector<double> xp(x0), xm(x0);
    xp[j] += h;
    xm[j] -= h;
    const auto fp = f(xp);
    const auto fm = f(xm);
    if (fp.size() != n || fm.size() != n)
      throw ContractError("fd_jacobian: f must map R^n -> R^n");
    for (size_t i = 0; i < n; ++i) jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
  }
  // Full-pivot elimination, accumulating log|det| from the pivots.
  double logdet = 0.0;
  std::vector<size_t> rows(n), cols(n);
  for (size_t i = 0; i < n; ++i) rows[i] = cols[i] = i;
  for (size_t k = 0; k < n; ++k) {
    double best = 0.0;
    size_t br = k, bc = k;
    for (size_t r = k; r < n; ++r)
      for (size_t c = k; c < n; ++c) {
        const double v = std::abs(jac[rows[r] * n + cols[c]]);
        if (v > best) {
          best = v;
          br = r;
          bc = c;
        }
      }
    if (!(best > 0.0)) throw ContractError("fd_jacobian: singular finite-difference Jacobian");
    std::swap(rows[k], rows[br]);
    std::swap(cols[k], cols[bc]);
    const double pivot = jac[rows[k] * n + cols[k]];
    logdet += std::log(std::abs(pivot));
    for (size_t r = k + 1; r < n; ++r) {
      const double factor = jac[rows[r] * n + cols[k]] / pivot;
      for (size_t c = k + 1; c < n; ++c)
        jac[rows[r] * n + cols[c]] -= factor * jac[rows[k] * n + cols[c]];
    }
  }
  return logdet;
}

}  // namespace volflow::oracles
