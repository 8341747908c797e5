#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "wcmorph/autodiff.hpp"
#include "wcmorph/rng.hpp"

namespace wcm {

// Builds a scalar loss from leaf variables handed in parameter order.
using GraphBuilder = std::function<Var(const std::vector<Var>&)>;

// Compares analytic gradients against central finite differences on up to
// max_coords_per_param sampled coordinates per parameter (0 = all).
// Returns the max of |analytic - numeric| / max(1, |analytic|).
inline double gradient_check(const GraphBuilder& build, const std::vector<Tensor>& params,
                             double h = 1e-6, std::size_t max_coords_per_param = 0,
                             std::uint64_t sample_seed = 0x9d5c) {
    if (!(h >= 1e-8 && h <= 1e-4)) {
        throw ArgumentError("gradient_check: step must lie in [1e-8, 1e-4]");
    }

    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(Var::leaf(p, true));
    Var loss = build(leaves);
    if (!loss.value().is_scalar()) {
        throw ArgumentError("gradient_check: loss must be scalar, got shape " +
                            shape_str(loss.value().shape()));
    }
    backward(loss);

    auto eval = [&](const std::vector<Tensor>& theta) {
        std::vector<Var> consts;
        consts.reserve(theta.size());
        for (const auto& p : theta) consts.push_back(Var::constant(p));
        Var l = build(consts);
        return l.value()[0];
    };

    Rng rng = make_rng(sample_seed);
    std::vector<Tensor> theta = params;
    double max_rel_err = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        const Tensor& analytic = leaves[k].grad();
        std::vector<std::size_t> coords(theta[k].numel());
        std::iota(coords.begin(), coords.end(), 0);
        if (max_coords_per_param > 0 && coords.size() > max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t i : coords) {
            const double saved = theta[k][i];
            theta[k][i] = saved + h;
            const double f_plus = eval(theta);
            theta[k][i] = saved - h;
            const double f_minus = eval(theta);
            theta[k][i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double rel =
                std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
            max_rel_err = std::max(max_rel_err, rel);
        }
    }
    return max_rel_err;
}

} // namespace wcm
