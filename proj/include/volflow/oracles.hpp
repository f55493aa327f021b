#pragma once

#include <functional>
#include <vector>

#include "volflow/tensor.hpp"

// Independent reference computations used to check the engine: a naive
// sextuple-loop convolution, central finite differences, and a dense
// finite-difference Jacobian log-determinant with its own full-pivot
// elimination. None of these share a code path with the implementations they
// check.

namespace volflow::oracles {

// Direct same-padding convolution; accumulates in double regardless of T.
// Kernel layout matches conv3d: (kd,kh,kw,cin,cout), cout fastest.
std::vector<double> naive_conv3d(const Shape& xs, const std::vector<double>& x, int64_t k,
                                 int64_t cin, int64_t cout, const std::vector<double>& w,
                                 const std::vector<double>& b);

// Central finite-difference gradient of eval() w.r.t. every element of a leaf
// parameter, by temporarily perturbing its values.
template <class T>
std::vector<double> fd_gradient(Var<T> param, const std::function<double()>& eval, double h);

// Largest relative error between an analytic gradient and a reference,
// using max(|a|,|b|,floor) as the denominator.
double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& reference,
                   double floor = 1e-6);

// log|det J| of x -> f(x) via central differences, determinant by full-pivot
// Gaussian elimination implemented here.
double fd_jacobian_log_abs_det(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    const std::vector<double>& x0, double h);

}  // namespace volflow::oracles
