#pragma once

#include <cmath>
#include <vector>

#include "wcmorph/errors.hpp"
#include "wcmorph/tensor.hpp"

namespace wcm {

// Adam with the bias-corrected update. Defaults follow the training
// setup used throughout: alpha=1e-4, beta1=0.0, beta2=0.9, eps=1e-8.
struct AdamConfig {
    double alpha = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double epsilon = 1e-8;
};

struct AdamState {
    long step_count = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    AdamConfig cfg;

    bool initialized() const { return !first_moment.empty(); }
};

// params and grads are parallel lists in a stable order. The state is
// lazily initialized to zero moments on the first call.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      AdamState& state) {
    if (params.size() != grads.size()) {
        throw DimensionError("adam_step: parameter/gradient count mismatch");
    }
    if (!state.initialized()) {
        state.first_moment.reserve(params.size());
        state.second_moment.reserve(params.size());
        for (const Tensor* p : params) {
            state.first_moment.emplace_back(p->shape());
            state.second_moment.emplace_back(p->shape());
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw DimensionError("adam_step: state was initialized for a different parameter list");
    }

    state.step_count += 1;
    const auto& cfg = state.cfg;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));

    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = *grads[k];
        Tensor& m = state.first_moment[k];
        Tensor& v = state.second_moment[k];
        if (!p.same_shape(g) || !p.same_shape(m)) {
            throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(k));
        }
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= cfg.alpha * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
}

} // namespace wcm
