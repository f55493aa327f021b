#pragma once

#include <array>
#include <utility>

#include "volflow/tensor.hpp"

// The op set of the engine. All ops are pure: same inputs give bitwise
// identical outputs within one build. Reduction order is fixed (flat index
// ascending) and every op validates that its output is finite.

namespace volflow {

// Thread-local autograd switch. Ops consuming tracked tensors while grad mode
// is off produce untracked results (no tape, inputs not retained).
bool grad_mode_enabled();
void set_grad_mode(bool on);

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_enabled()) { set_grad_mode(false); }
  ~NoGradGuard() { set_grad_mode(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace volflow

namespace volflow::ops {

// ---- elementwise ----
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> abs(const Var<T>& a);
template <class T> Var<T> add_scalar(const Var<T>& a, double s);
template <class T> Var<T> mul_scalar(const Var<T>& a, double s);
// True division (not reciprocal multiply): keeps endpoints like 24/48 exact.
template <class T> Var<T> div_scalar(const Var<T>& a, double s);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> log(const Var<T>& a);  // error on non-positive input
template <class T> Var<T> sigmoid(const Var<T>& a);
template <class T> Var<T> relu(const Var<T>& a);
// Backward passes zero gradient where the input fell outside [lo, hi].
template <class T> Var<T> clip(const Var<T>& a, double lo, double hi);

// ---- reductions (flat-index ascending accumulation) ----
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);

// ---- layout ----
template <class T> Var<T> reshape(const Var<T>& a, const Shape& s);
// perm maps output axis -> input axis over (d,h,w,c).
template <class T> Var<T> permute(const Var<T>& a, const std::array<int, 4>& perm);

// 3-D space-to-channel by 2x2x2 blocks: (D,H,W,C) -> (D/2,H/2,W/2,8C).
// Output channel = c*8 + octant, octant = (d%2)*4 + (h%2)*2 + (w%2).
template <class T> Var<T> squeeze2(const Var<T>& a);
template <class T> Var<T> unsqueeze2(const Var<T>& a);

// ---- channel ops ----
// y = s * (x + b) with s, b per-channel vectors of shape (1,1,1,C).
template <class T> Var<T> channel_affine(const Var<T>& x, const Var<T>& s, const Var<T>& b);
// Exact inverse: x = y / s - b.
template <class T>
Var<T> channel_affine_inverse(const Var<T>& y, const Var<T>& s, const Var<T>& b);
// Per-voxel channel mixing y_r = sum_c W[r,c] x_c; W row-major (1,1,C,C).
template <class T> Var<T> channel_matmul(const Var<T>& x, const Var<T>& W);
// First / second channel halves (channel count must be even).
template <class T> Var<T> channels_lo(const Var<T>& x);
template <class T> Var<T> channels_hi(const Var<T>& x);
template <class T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// ---- convolution ----
// Same-padding 3-D convolution with a cubic odd-sized kernel.
// Kernel tensor shape (k,k,k,Cin*Cout); flat layout (kd,kh,kw,cin,cout) with
// cout fastest. Bias (1,1,1,Cout); optional (pass invalid Var for none).
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, int64_t cout);

// ---- linear algebra ----
// log|det W| of a (1,1,C,C) matrix as a differentiable scalar.
template <class T> Var<T> logabsdet(const Var<T>& W);

// ---- raw-value helpers (no graph) ----
// Sum of elementwise independent Gaussian log-densities, composed from the
// primitives above:  sum log N(z; mu, exp(logsd)^2).
template <class T>
Var<T> gaussian_logp_sum(const Var<T>& z, const Var<T>& mu, const Var<T>& logsd);

}  // namespace volflow::ops
