#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "siamaf/autodiff.hpp"

namespace siamaf {

struct OptimizerSpec {
    enum class Kind { SgdMomentum, Adam } kind = Kind::SgdMomentum;
    double lr = 0.1;
    double momentum = 0.9;     // sgd
    double beta1 = 0.9;        // adam
    double beta2 = 0.999;      // adam
    double eps = 1e-8;         // adam
    double weight_decay = 0.0; // not a published value; kept configurable, default off

    static OptimizerSpec sgd_momentum(double lr, double momentum) {
        OptimizerSpec s;
        s.kind = Kind::SgdMomentum;
        s.lr = lr;
        s.momentum = momentum;
        return s;
    }
    static OptimizerSpec adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        OptimizerSpec s;
        s.kind = Kind::Adam;
        s.lr = lr;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.eps = eps;
        return s;
    }
};

inline const char* optimizer_kind_name(OptimizerSpec::Kind k) {
    return k == OptimizerSpec::Kind::SgdMomentum ? "sgd" : "adam";
}

/// Applies one update to every parameter and zeroes gradients afterwards.
/// SGD momentum: v <- m*v + g; p <- p - lr*v.
/// Adam: standard first/second moment update with bias correction;
/// `step_count` is the 1-based update index.
template <typename T>
void optimizer_step(const std::vector<Parameter<T>*>& params, const OptimizerSpec& spec, std::int64_t step_count = 1) {
    if (spec.kind == OptimizerSpec::Kind::Adam && step_count < 1)
        throw std::invalid_argument("optimizer_step: adam step_count must be >= 1");
    for (Parameter<T>* p : params) {
        if (p->grad.shape != p->value.shape)
            throw std::runtime_error("optimizer_step: missing or mismatched gradient for " + p->name);
        const std::size_t n = p->value.numel();
        T* val = p->value.data();
        T* grad = p->grad.data();
        if (spec.weight_decay != 0.0)
            for (std::size_t i = 0; i < n; ++i) grad[i] += static_cast<T>(spec.weight_decay) * val[i];

        if (spec.kind == OptimizerSpec::Kind::SgdMomentum) {
            auto [it, inserted] = p->opt_state.try_emplace("momentum", Tensor<T>::zeros(p->value.shape));
            T* v = it->second.data();
            const T m = static_cast<T>(spec.momentum);
            const T lr = static_cast<T>(spec.lr);
            for (std::size_t i = 0; i < n; ++i) {
                v[i] = m * v[i] + grad[i];
                val[i] -= lr * v[i];
            }
        } else {
            auto [mit, mi] = p->opt_state.try_emplace("adam_m", Tensor<T>::zeros(p->value.shape));
            auto [vit, vi] = p->opt_state.try_emplace("adam_v", Tensor<T>::zeros(p->value.shape));
            T* m = mit->second.data();
            T* v = vit->second.data();
            const double b1 = spec.beta1, b2 = spec.beta2;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count));
            for (std::size_t i = 0; i < n; ++i) {
                m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * grad[i]);
                v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * static_cast<double>(grad[i]) * grad[i]);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                val[i] -= static_cast<T>(spec.lr * mhat / (std::sqrt(vhat) + spec.eps));
            }
        }
        check_finite(p->value, "optimizer_step");
        p->zero_grad();
    }
}

}  // namespace siamaf
