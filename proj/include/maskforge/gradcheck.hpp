#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "maskforge/tensor.hpp"

namespace maskforge {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate
/// of `x`, perturbing its storage in place and restoring it afterwards.
/// `f` must be deterministic and is evaluated without recording a graph.
template <class T, class F>
basic_tensor<T> finite_difference_gradient(F&& f, basic_tensor<T> x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
  no_grad_guard guard;
  auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T saved = xv[i];
    xv[i] = static_cast<T>(saved + h);
    const double plus = static_cast<double>(f());
    xv[i] = static_cast<T>(saved - h);
    const double minus = static_cast<double>(f());
    xv[i] = saved;
    out[i] = static_cast<T>((plus - minus) / (2.0 * h));
  }
  return basic_tensor<T>(x.shape(), std::move(out));
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

template <class T>
double max_relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-6) {
  std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
  return max_relative_error(std::span<const double>(da), std::span<const double>(db), floor);
}

}  // namespace maskforge
