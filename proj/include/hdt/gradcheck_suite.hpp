#pragma once

// Finite-difference checks of every differentiable op and of the model,
// all in double precision.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hdt/autodiff.hpp"
#include "hdt/config.hpp"

namespace hdt {

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kModelGradTolerance = 1e-3;
inline constexpr double kGradcheckStep = 1e-4;

/// Builds a scalar from leaves recorded for the probed tensors.
using GradLoss = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Central differences at h and h/2 further apart than this mean the stencil
/// straddles a non-differentiable point (LeakyReLU, |·|, bilinear grid
/// lines), where finite differences are no oracle.
inline constexpr double kKinkTolerance = 1e-6;

struct GradientCheck {
  double max_error = 0;   // over the compared probes
  std::size_t probes = 0;  // compared
  std::size_t kinked = 0;  // excluded by the kink screen
};

/// Compares the tape gradient with central differences on every element of
/// values, or on max_elements randomly chosen ones when there are more.
/// The kink screen uses only the two difference quotients, never the tape
/// gradient.
GradientCheck check_gradients(const std::vector<Tensor<double>>& values, const GradLoss& loss,
                              std::size_t max_elements, std::mt19937_64& rng, double h = kGradcheckStep);

struct GradcheckResult {
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  std::size_t trials = 0;
  std::size_t probes = 0;
  std::size_t kinked = 0;
  double seconds = 0;

  /// At most 5% of probes may be excluded by the kink screen.
  bool pass() const { return max_error <= tolerance && probes > 0 && kinked * 20 <= probes + kinked; }
};

/// Every name accepted by run_gradcheck, ops first, then model-level checks.
const std::vector<std::string>& gradcheck_names();

/// Runs `trials` seeded random cases of one check. Model-level checks use
/// cfg; the ops ignore it. Throws Error for an unknown name.
GradcheckResult run_gradcheck(const std::string& name, std::uint64_t seed, std::size_t trials,
                              const HdtConfig& cfg = HdtConfig::tiny());

}  // namespace hdt
