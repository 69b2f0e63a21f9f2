#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dqnet/rng.hpp"
#include "dqnet/tensor.hpp"

namespace dqnet {

struct GradReport {
    std::string op;
    double max_abs_dev = 0.0;
    double max_rel_dev = 0.0;
    double tolerance = 0.0;
    int64_t coords_checked = 0;
    bool pass = false;
};

// Relative deviation with a unit floor, so near-zero gradients are compared
// absolutely: |a-n| / max(|a|, |n|, 1).
inline double rel_dev(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1.0});
    return std::fabs(analytic - numeric) / denom;
}

// Central finite differences against the reverse-mode gradient of a scalar
// function. When max_coords > 0 a deterministic random subset of coordinates
// is probed instead of all of them (for large parameter sets).
template <typename F>
GradReport grad_check(const std::string& op_name, F f, Tensor<double> x, double h, double tol,
                      int64_t max_coords = -1, uint64_t coord_seed = 0) {
    GradReport report;
    report.op = op_name;
    report.tolerance = tol;

    x.set_requires_grad(true);
    x.zero_grad();
    Tensor<double> y = f(x);
    if (y.numel() != 1) throw DimensionError("grad_check: function must be scalar-valued");
    if (!y.all_finite()) throw NumericError("grad_check aborted: non-finite value of " + op_name);
    y.backward();
    std::vector<double> analytic = x.grad();

    std::vector<int64_t> coords;
    const int64_t n = x.numel();
    if (max_coords <= 0 || max_coords >= n) {
        coords.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
        Rng rng(mix_seed(coord_seed, fnv1a64(op_name)));
        for (int64_t i = 0; i < max_coords; ++i) coords.push_back(rng.randint(0, n - 1));
    }

    for (int64_t idx : coords) {
        const double orig = x[idx];
        double fp, fm;
        {
            NoGradGuard ng;
            x[idx] = orig + h;
            fp = f(x).item();
            x[idx] = orig - h;
            fm = f(x).item();
            x[idx] = orig;
        }
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check aborted: non-finite perturbed value of " + op_name);
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[static_cast<size_t>(idx)];
        report.max_abs_dev = std::max(report.max_abs_dev, std::fabs(a - numeric));
        report.max_rel_dev = std::max(report.max_rel_dev, rel_dev(a, numeric));
    }
    report.coords_checked = static_cast<int64_t>(coords.size());
    report.pass = report.max_rel_dev <= tol;
    return report;
}

}  // namespace dqnet
