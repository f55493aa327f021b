#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "volflow/common.hpp"
#include "volflow/rng.hpp"

// Small dense routines for the n x n channel-mixing matrices. Row-major
// storage throughout: a[r * n + c].

namespace volflow::linalg {

// In-place LU with partial pivoting. Returns false when a pivot underflows
// (matrix numerically singular). piv[k] records the row swapped into k.
template <class T>
bool lu_factor(int64_t n, T* a, int64_t* piv, int* sign) {
  *sign = 1;
  for (int64_t k = 0; k < n; ++k) {
    int64_t p = k;
    T best = std::abs(a[k * n + k]);
    for (int64_t r = k + 1; r < n; ++r) {
      T v = std::abs(a[r * n + k]);
      if (v > best) {
        best = v;
        p = r;
      }
    }
    if (!(best > T(0))) return false;
    piv[k] = p;
    if (p != k) {
      for (int64_t c = 0; c < n; ++c) std::swap(a[k * n + c], a[p * n + c]);
      *sign = -*sign;
    }
    T inv = T(1) / a[k * n + k];
    for (int64_t r = k + 1; r < n; ++r) {
      T f = a[r * n + k] * inv;
      a[r * n + k] = f;
      for (int64_t c = k + 1; c < n; ++c) a[r * n + c] -= f * a[k * n + c];
    }
  }
  return true;
}

// log|det| of a matrix (copy factorized internally). Throws on singular input.
template <class T>
double log_abs_det(int64_t n, const T* a, const char* what) {
  std::vector<T> lu(a, a + n * n);
  std::vector<int64_t> piv(n);
  int sign = 1;
  if (!lu_factor(n, lu.data(), piv.data(), &sign))
    throw ContractError(cat(what, ": singular matrix (zero pivot in LU)"));
  double acc = 0.0;
  for (int64_t k = 0; k < n; ++k) acc += std::log(std::abs(static_cast<double>(lu[k * n + k])));
  return acc;
}

template <class T>
double abs_det(int64_t n, const T* a) {
  std::vector<T> lu(a, a + n * n);
  std::vector<int64_t> piv(n);
  int sign = 1;
  if (!lu_factor(n, lu.data(), piv.data(), &sign)) return 0.0;
  double acc = 1.0;
  for (int64_t k = 0; k < n; ++k) acc *= std::abs(static_cast<double>(lu[k * n + k]));
  return acc;
}

// Solve A x = b for a single right-hand side given an LU factorization.
// All row swaps are applied before substitution (the stored multipliers refer
// to final row positions).
template <class T>
void lu_solve(int64_t n, const T* lu, const int64_t* piv, T* b) {
  for (int64_t k = 0; k < n; ++k)
    if (piv[k] != k) std::swap(b[k], b[piv[k]]);
  for (int64_t k = 0; k < n; ++k)
    for (int64_t r = k + 1; r < n; ++r) b[r] -= lu[r * n + k] * b[k];
  for (int64_t k = n - 1; k >= 0; --k) {
    for (int64_t c = k + 1; c < n; ++c) b[k] -= lu[k * n + c] * b[c];
    b[k] /= lu[k * n + k];
  }
}

// Dense inverse; throws on singular input.
template <class T>
std::vector<T> inverse(int64_t n, const T* a, const char* what) {
  std::vector<T> lu(a, a + n * n);
  std::vector<int64_t> piv(n);
  int sign = 1;
  if (!lu_factor(n, lu.data(), piv.data(), &sign))
    throw ContractError(cat(what, ": singular matrix, cannot invert"));
  std::vector<T> inv(n * n, T(0));
  std::vector<T> col(n);
  for (int64_t j = 0; j < n; ++j) {
    for (int64_t i = 0; i < n; ++i) col[i] = (i == j) ? T(1) : T(0);
    lu_solve(n, lu.data(), piv.data(), col.data());
    for (int64_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
  }
  return inv;
}

// Random rotation (orthogonal, det +1) via modified Gram-Schmidt on a
// Gaussian matrix. det +1 keeps the initial 1x1x1-convolution log-det at 0.
template <class T>
std::vector<T> random_rotation(int64_t n, Rng& rng) {
  std::vector<double> q(n * n);
  for (auto& v : q) v = rng.normal();
  for (int64_t j = 0; j < n; ++j) {
    for (int64_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += q[i * n + k] * q[i * n + j];
      for (int64_t i = 0; i < n; ++i) q[i * n + j] -= dot * q[i * n + k];
    }
    double norm = 0.0;
    for (int64_t i = 0; i < n; ++i) norm += q[i * n + j] * q[i * n + j];
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) {
      // Degenerate draw; replace with a unit basis vector and continue.
      for (int64_t i = 0; i < n; ++i) q[i * n + j] = (i == j) ? 1.0 : 0.0;
      --j;
      continue;
    }
    for (int64_t i = 0; i < n; ++i) q[i * n + j] /= norm;
  }
  // Fix the determinant sign.
  std::vector<double> tmp(q);
  std::vector<int64_t> piv(n);
  int sign = 1;
  double det_sign = 1.0;
  if (lu_factor<double>(n, tmp.data(), piv.data(), &sign)) {
    det_sign = sign;
    for (int64_t k = 0; k < n; ++k) det_sign *= (tmp[k * n + k] < 0.0) ? -1.0 : 1.0;
  }
  if (det_sign < 0.0)
    for (int64_t i = 0; i < n; ++i) q[i * n + 0] = -q[i * n + 0];
  std::vector<T> out(n * n);
  for (int64_t i = 0; i < n * n; ++i) out[i] = static_cast<T>(q[i]);
  return out;
}

}  // namespace volflow::linalg
