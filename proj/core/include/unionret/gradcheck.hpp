#pragma once

#include <functional>
#include <string>
#include <vector>

#include "unionret/ndgrad.hpp"

namespace unionret::nd {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct InputGradReport {
    std::string name;
    std::size_t size = 0;
    double max_abs_error = 0.0; // largest elementwise |analytic - numeric|
    double rel_error = 0.0;     // ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
};

struct GradCheckReport {
    std::vector<InputGradReport> inputs;
    double max_rel_error = 0.0;
    double tol = 0.0;
    bool passed = false;
};

// Builds a scalar from the given inputs on the supplied tape.
using ScalarFunction = std::function<Tensor(Tape&)>;

// Norms below this are treated as zero gradients; relative error is measured
// against it so that round-off on vanishing gradients is not amplified.
inline constexpr double kGradCheckNormFloor = 1e-8;

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps, perturbing each input element in place.
///
/// Inputs must be leaves with requires_grad; their gradients are reset before
/// the analytic pass. eps must lie in (0, 1e-3].
GradCheckReport grad_check(const ScalarFunction& f, const std::vector<NamedTensor>& inputs, double eps, double tol);

std::string format_report(const GradCheckReport& report);

} // namespace unionret::nd
