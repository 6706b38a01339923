#include "hdt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hdt {

Tensor<double> finite_difference_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                      double h) {
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double plus = f(probe);
    probe[i] = orig - h;
    const double minus = f(probe);
    probe[i] = orig;
    grad[i] = (plus - minus) / (2 * h);
  }
  return grad;
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  double worst = 0;
  const std::size_t n = std::min(analytic.size(), numeric.size());
  for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  return worst;
}

}  // namespace hdt
