#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "unionret/gradcheck.hpp"

namespace unionret::gradsuite {

struct CaseSetup {
    std::vector<nd::NamedTensor> inputs;
    nd::ScalarFunction function;
    std::shared_ptr<const void> keepalive; // owns anything the function refers to
};

struct GradCase {
    std::string name;
    std::function<CaseSetup(std::uint64_t seed)> setup;
};

// Every differentiable op, the loss, a transformer block, the UNION gate, and
// the full training loss (B=4, D=16, two-layer UNION transformer) in each
// target mode. Each op output is reduced to a scalar by a fixed random
// weighting so no gradient is trivially zero.
const std::vector<GradCase>& gradient_cases();

struct CaseResult {
    std::string name;
    nd::GradCheckReport report;
    double seconds = 0.0;
};

struct SuiteResult {
    std::vector<CaseResult> cases;
    bool passed = false;
    double seconds = 0.0;
};

// Runs the cases whose name contains `filter` (all when empty).
SuiteResult run_gradient_suite(std::uint64_t seed, double eps = 1e-5, double tol = 1e-4,
                               const std::string& filter = {});

} // namespace unionret::gradsuite
