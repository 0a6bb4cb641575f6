#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pvae/diffgraph.hpp"

namespace pvae::dg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moments per parameter, in ParameterStore order.
template <typename T>
struct AdamState {
    long step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    void init(const ParameterStore<T>& store) {
        m.clear();
        v.clear();
        for (const auto& p : store.all()) {
            m.emplace_back(p.value.numel(), T{});
            v.emplace_back(p.value.numel(), T{});
        }
        step = 0;
    }
};

struct AdamReport {
    bool applied = true;
    std::string skipped_reason;
};

/**
 * One bias-corrected Adam update from the gradients held in `store`.
 * A non-finite gradient anywhere skips the whole step.
 */
template <typename T>
AdamReport adam_step(ParameterStore<T>& store, AdamState<T>& state, const AdamConfig& cfg) {
    auto& params = store.all();
    if (state.m.size() != params.size()) state.init(store);
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (state.m[p].size() != params[p].value.numel()) {
            throw ShapeError("adam_step", "optimizer state does not match parameter " + params[p].name);
        }
        for (T gval : params[p].grad.data) {
            if (!std::isfinite(static_cast<double>(gval))) {
                return {false, "non-finite gradient in " + params[p].name};
            }
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& val = params[p].value.data;
        const auto& grad = params[p].grad.data;
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double gi = static_cast<double>(grad[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            val[i] -= static_cast<T>(cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
        }
    }
    return {};
}

} // namespace pvae::dg
