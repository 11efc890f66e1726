#pragma once

#include "ofdiff/autodiff.hpp"

#include <cstdint>
#include <functional>

namespace ofdiff {

using ScalarFunction = std::function<Var<double>(Graph<double>&, const Var<double>&)>;
using LossFunction = std::function<Var<double>(Graph<double>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates probed per tensor; all of them when the tensor is smaller.
  Index max_coordinates = 64;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error, so near-zero gradients are
  /// compared absolutely.
  double floor = 1e-6;
};

/// Worst relative error between backward() and central differences of f at x.
///
/// stop_gradient outputs are frozen at their base-point values during the
/// perturbed evaluations, so the reference is the severed gradient.
double finite_diff_check(const ScalarFunction& f, const Tensor<double>& x, const GradCheckOptions& options = {});

/// Same check against every parameter in `params` (perturbed in place and restored).
double finite_diff_check(const LossFunction& loss, const ParameterList<double>& params,
                         const GradCheckOptions& options = {});

}  // namespace ofdiff
