#include "unionret/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "unionret/errors.hpp"

namespace unionret::nd {

GradCheckReport grad_check(const ScalarFunction& f, const std::vector<NamedTensor>& inputs, double eps, double tol) {
    if (!(eps > 0.0 && eps <= 1e-3)) {
        throw ValidationError("grad_check: eps must lie in (0, 1e-3]");
    }
    for (const auto& in : inputs) {
        if (!in.tensor.requires_grad() || !in.tensor.node().is_leaf) {
            throw ValidationError("grad_check: input '" + in.name + "' must be a leaf with requires_grad");
        }
    }

    std::vector<std::vector<double>> analytic;
    {
        for (const auto& in : inputs) {
            Tensor t = in.tensor;
            t.zero_grad();
        }
        Tape tape;
        Tensor loss = f(tape);
        if (loss.numel() != 1) throw ValidationError("grad_check: function must be scalar-valued");
        tape.backward(loss);
        for (const auto& in : inputs) analytic.push_back(in.tensor.grad_or_zeros());
    }

    auto evaluate = [&] {
        Tape tape(false);
        return f(tape).item();
    };

    GradCheckReport report;
    report.tol = tol;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k].tensor;
        auto values = t.data();
        double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0, max_abs = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = evaluate();
            values[i] = saved - eps;
            const double down = evaluate();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = std::max(max_abs, std::abs(a - numeric));
        }
        InputGradReport r;
        r.name = inputs[k].name;
        r.size = values.size();
        r.max_abs_error = max_abs;
        const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), kGradCheckNormFloor});
        r.rel_error = std::sqrt(diff_sq) / denom;
        report.max_rel_error = std::max(report.max_rel_error, r.rel_error);
        report.inputs.push_back(std::move(r));
    }
    report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error <= tol;
    return report;
}

std::string format_report(const GradCheckReport& report) {
    std::string out;
    char line[256];
    for (const auto& r : report.inputs) {
        std::snprintf(line, sizeof line, "  %-28s n=%-6zu rel=%.3e max_abs=%.3e\n", r.name.c_str(), r.size,
                      r.rel_error, r.max_abs_error);
        out += line;
    }
    std::snprintf(line, sizeof line, "  max rel error %.3e (tol %.1e): %s\n", report.max_rel_error, report.tol,
                  report.passed ? "pass" : "FAIL");
    out += line;
    return out;
}

} // namespace unionret::nd
