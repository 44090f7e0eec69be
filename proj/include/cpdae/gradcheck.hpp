#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cpdae/tensor.hpp"

// Central-difference gradient verification. Always runs in 64-bit: finite
// differences at step 1e-4 are not trustworthy in float.

namespace cpdae {

struct GradCheckEntry {
    std::string param;
    std::size_t coord = 0;       // flat index of the worst coordinate
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;

    bool pass(double tol) const { return max_rel_err < tol; }

    std::string summary() const {
        std::string s;
        for (const auto& e : per_param) {
            s += e.param + ": rel_err " + std::to_string(e.rel_err) + " at coord " +
                 std::to_string(e.coord) + " (analytic " + std::to_string(e.analytic) +
                 ", numeric " + std::to_string(e.numeric) + ", " +
                 std::to_string(e.coords_checked) + " coords)\n";
        }
        s += "max rel_err " + std::to_string(max_rel_err) + "\n";
        return s;
    }
};

// `f` evaluates the scalar objective on a fresh tape from the given leaf
// parameters. `max_coords_per_param` = 0 checks every coordinate; otherwise a
// deterministic stride picks that many per tensor.
inline GradCheckReport grad_check(std::vector<Tensor<double>> params,
                                  const std::function<Tensor<double>(Tape<double>&)>& f,
                                  double step = 1e-4, std::size_t max_coords_per_param = 0) {
    for (auto& p : params) p.set_requires_grad(true);

    Tape<double> tape;
    Tensor<double> loss = f(tape);
    if (!std::isfinite(loss.item())) throw ProbeError("grad_check: objective is non-finite");
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    auto eval = [&](const std::string& where) {
        Tape<double> scratch;
        double v = f(scratch).item();
        if (!std::isfinite(v))
            throw ProbeError("grad_check: objective non-finite at perturbed point of " + where);
        return v;
    };

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::string label = p.name().empty() ? "param" + std::to_string(pi) : p.name();
        const std::size_t n = p.numel();
        std::size_t stride = 1;
        if (max_coords_per_param > 0 && n > max_coords_per_param)
            stride = (n + max_coords_per_param - 1) / max_coords_per_param;

        GradCheckEntry entry;
        entry.param = label;
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = p.data()[i];
            p.data()[i] = saved + step;
            const double fp = eval(label);
            p.data()[i] = saved - step;
            const double fm = eval(label);
            p.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
            const double rel = std::fabs(a - numeric) / denom;
            ++entry.coords_checked;
            if (rel >= entry.rel_err) {
                entry.rel_err = rel;
                entry.coord = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace cpdae
