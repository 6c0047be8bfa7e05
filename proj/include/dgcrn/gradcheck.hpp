#pragma once

// Central-difference gradient oracle. It never touches the autodiff
// machinery: it only perturbs raw values and re-evaluates a scalar function.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dgcrn/error.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

// Each coordinate of x is perturbed in place by +/-eps and restored before
// returning, so f may close over x.
template <class T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, Tensor<T>& x, T eps) {
  if (!(eps > T(0))) throw PreconditionError("finite_diff_grad: eps must be positive");
  auto values = x.mutable_data();
  std::vector<T> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + eps;
    const T up = f(x);
    values[i] = saved - eps;
    const T down = f(x);
    values[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("finite_diff_grad: non-finite function value at flat index " +
                        std::to_string(i));
    }
    out[i] = (up - down) / (T(2) * eps);
  }
  return Tensor<T>(x.shape(), std::move(out));
}

// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
// gradient is ~0 from dominating through rounding noise.
inline double relative_error(double a, double b, double floor = 1e-6) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

template <class T>
double max_relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-6) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: size mismatch");
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, relative_error(static_cast<double>(a[i]), static_cast<double>(b[i]), floor));
  return worst;
}

}  // namespace dgcrn
