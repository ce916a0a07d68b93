#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "petlab/errors.hpp"
#include "petlab/graph.hpp"
#include "petlab/rng.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

// One checked coordinate that exceeded tolerance, or the worst per group.
struct GradCheckEntry {
    std::string param;
    std::size_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    bool passed = true;
    std::size_t coords_checked = 0;
    double worst_rel_error = 0.0;
    std::vector<GradCheckEntry> worst;     // worst coordinate per parameter
    std::vector<GradCheckEntry> failures;  // every coordinate over tolerance

    std::string summary() const {
        std::string s = passed ? "PASS" : "FAIL";
        s += " (" + std::to_string(coords_checked) + " coords, worst rel err " +
             std::to_string(worst_rel_error) + ")";
        for (const auto& f : failures) {
            s += "\n  " + f.param + "[" + std::to_string(f.coord) +
                 "]: analytic=" + std::to_string(f.analytic) +
                 " numeric=" + std::to_string(f.numeric) +
                 " rel=" + std::to_string(f.rel_error);
        }
        return s;
    }
};

// Named view over the checked parameters; grad_check perturbs the tensor
// values in place and restores them.
template <typename T>
struct GradCheckParam {
    std::string name;
    Tensor<T> tensor;
};

// Central-difference check of d(f)/d(theta) against the autodiff result.
//
// `f` must evaluate the scalar loss from the current parameter values
// without recording anything itself; grad_check runs it twice at the
// unperturbed point and raises DeterminismError if the two values differ
// bit-for-bit. Analytic gradients are produced by one taped evaluation and
// compared per sampled coordinate at relative tolerance
// |analytic - numeric| / max(1, |analytic|).
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           const std::vector<GradCheckParam<T>>& params, double h, double tol,
                           std::size_t coords_per_param = 100,
                           std::uint64_t sample_seed = 0x9d5f) {
    GradCheckReport report;

    // determinism probe (no taping)
    const T probe0 = f().item();
    const T probe1 = f().item();
    if (!(probe0 == probe1)) {
        throw DeterminismError("grad_check: two evaluations at the same point differ: " +
                               std::to_string(probe0) + " vs " + std::to_string(probe1));
    }

    // analytic gradients from one taped evaluation
    for (const auto& p : params) p.tensor.storage()->grad.clear();
    {
        GraphScope<T> scope;
        for (const auto& p : params) {
            if (!p.tensor.requires_grad()) {
                throw ContractError("grad_check parameter " + p.name +
                                    " does not require grad");
            }
        }
        Tensor<T> loss = f();
        scope.backward(loss);
    }

    Rng rng(sample_seed);
    for (const auto& p : params) {
        auto& values = p.tensor.storage()->values;
        const auto& grad = p.tensor.storage()->grad;
        const std::size_t n = values.size();
        std::vector<std::size_t> coords;
        if (n <= coords_per_param) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < coords_per_param; ++i) coords.push_back(rng.below(n));
        }
        GradCheckEntry worst_here;
        worst_here.param = p.name;
        worst_here.rel_error = -1.0;
        for (std::size_t c : coords) {
            const T saved = values[c];
            values[c] = saved + static_cast<T>(h);
            const double fplus = static_cast<double>(f().item());
            values[c] = saved - static_cast<T>(h);
            const double fminus = static_cast<double>(f().item());
            values[c] = saved;

            const double numeric = (fplus - fminus) / (2.0 * h);
            const double analytic = grad.empty() ? 0.0 : static_cast<double>(grad[c]);
            const double rel =
                std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            ++report.coords_checked;
            report.worst_rel_error = std::max(report.worst_rel_error, rel);
            if (rel > worst_here.rel_error) {
                worst_here = {p.name, c, analytic, numeric, rel};
            }
            if (rel > tol) {
                report.passed = false;
                report.failures.push_back({p.name, c, analytic, numeric, rel});
            }
        }
        if (!coords.empty()) report.worst.push_back(worst_here);
    }
    return report;
}

}  // namespace petlab
