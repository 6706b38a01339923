#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "hdt/tensor.hpp"

namespace hdt {

/// Central differences (f(x + h·e_i) − f(x − h·e_i)) / 2h for every element.
Tensor<double> finite_difference_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                      double h = 1e-4);

/// Denominator floor used by relative_error. Gradient entries smaller than
/// this are compared in absolute terms.
inline constexpr double kRelativeErrorFloor = 1e-3;

/// |a − b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = kRelativeErrorFloor);

/// Largest elementwise relative_error between two equally sized spans.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = kRelativeErrorFloor);

}  // namespace hdt
