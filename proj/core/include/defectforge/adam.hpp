#pragma once

#include <cmath>
#include <vector>

#include "defectforge/tensor.hpp"

namespace df {

// Adam with bias correction (Kingma & Ba). One state per parameter set;
// moment accumulators mirror parameter shapes.
template <class T>
struct AdamState {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    long step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
};

template <class T>
void adam_step(std::vector<TensorPtr<T>>& params, AdamState<T>& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->numel(), T(0));
            state.v[i].assign(params[i]->numel(), T(0));
        }
    }
    if (state.m.size() != params.size())
        throw ShapeMismatch("adam_step: parameter count changed");

    ++state.step;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        if (state.m[i].size() != p.numel())
            throw ShapeMismatch("adam_step: accumulator/parameter shape mismatch");
        p.ensure_grad();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const T g = p.grad[j];
            state.m[i][j] = state.beta1 * state.m[i][j] + (T(1) - state.beta1) * g;
            state.v[i][j] = state.beta2 * state.v[i][j] + (T(1) - state.beta2) * g * g;
            const T mhat = state.m[i][j] / bc1;
            const T vhat = state.v[i][j] / bc2;
            p.values[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

template <class T>
void zero_grads(std::vector<TensorPtr<T>>& params) {
    for (auto& p : params) p->zero_grad();
}

}  // namespace df
