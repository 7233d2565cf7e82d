#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "siamaf/ops.hpp"
#include "siamaf/rng.hpp"

namespace siamaf {

namespace detail {

/// Random inputs for one op kind, conditioned away from non-smooth points
/// (relu kinks, pooling ties, near-zero cosine norms) so central differences
/// are meaningful. `compact` keeps every tensor at a handful of elements,
/// which the 32-bit mode needs to stay above finite-difference roundoff.
template <typename T>
std::vector<Tensor<T>> gradcheck_inputs(OpKind kind, const OpAttrs& attrs, Rng& rng, bool compact) {
    auto uniform_tensor = [&](Shape s, double lo = -1.0, double hi = 1.0) {
        Tensor<T> t(std::move(s));
        for (T& v : t.values) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    };
    auto spaced_tensor = [&](Shape s) {  // distinct jittered grid values
        Tensor<T> t(std::move(s));
        const std::size_t n = t.numel();
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm.begin(), perm.end());
        for (std::size_t i = 0; i < n; ++i)
            t.values[i] = static_cast<T>(-1.0 + 2.0 * (perm[i] + 0.25 + 0.5 * rng.uniform()) / n);
        return t;
    };

    switch (kind) {
        case OpKind::Conv1d: {
            const std::size_t K = static_cast<std::size_t>(attrs.kernel);
            if (compact) return {uniform_tensor({1, 1, K + 1}), uniform_tensor({1, 1, K}), uniform_tensor({1})};
            return {uniform_tensor({2, 2, 6 + K}), uniform_tensor({2, 2, K}), uniform_tensor({2})};
        }
        case OpKind::Linear:
            if (compact) return {uniform_tensor({1, 3}), uniform_tensor({2, 3}), uniform_tensor({2})};
            return {uniform_tensor({2, 4}), uniform_tensor({3, 4}), uniform_tensor({3})};
        case OpKind::BatchNorm1d: {
            Tensor<T> x = attrs.kernel == 0 ? (compact ? uniform_tensor({4, 2}) : uniform_tensor({5, 3}))
                                            : (compact ? uniform_tensor({2, 2, 2}) : uniform_tensor({3, 2, 4}));
            const std::size_t C = x.dim(1);
            return {std::move(x), uniform_tensor({C}, 0.5, 1.5), uniform_tensor({C})};
        }
        case OpKind::Relu: {
            Tensor<T> x = uniform_tensor({7});
            for (T& v : x.values)
                while (std::abs(static_cast<double>(v)) < 0.05) v = static_cast<T>(rng.uniform(-1.0, 1.0));
            return {std::move(x)};
        }
        case OpKind::MaxPool1d:
            return {spaced_tensor({2, 2, 7})};
        case OpKind::GlobalAvgPool1d:
            return {uniform_tensor({2, 2, 5})};
        case OpKind::Add:
        case OpKind::ScaleAdd:
            return {uniform_tensor({5}), uniform_tensor({5})};
        case OpKind::Flatten:
            return {uniform_tensor({2, 3})};
        case OpKind::CosineSimilarity: {
            auto rows = [&] {
                Tensor<T> t({2, 4});
                for (std::size_t r = 0; r < 2; ++r) {
                    double norm2 = 0.0;
                    do {
                        norm2 = 0.0;
                        for (std::size_t i = 0; i < 4; ++i) {
                            t.values[4 * r + i] = static_cast<T>(rng.uniform(-1.0, 1.0));
                            norm2 += static_cast<double>(t.values[4 * r + i]) * t.values[4 * r + i];
                        }
                    } while (norm2 < 0.09);
                }
                return t;
            };
            return {rows(), rows()};
        }
        case OpKind::SoftmaxCrossEntropy:
            return {uniform_tensor({3, 4})};
        case OpKind::MeanAll:
        case OpKind::StopGradient:
            return {uniform_tensor({6})};
    }
    throw std::invalid_argument("gradcheck_inputs: unknown kind");
}

template <typename T>
T gradcheck_eval(OpKind kind, const OpAttrs& attrs, const std::vector<Tensor<T>>& inputs, bool with_grad,
                 std::vector<Tensor<T>>* grads_out) {
    Tape<T> tape;
    tape.grad_enabled = with_grad;
    std::vector<NodeRef<T>> refs;
    refs.reserve(inputs.size());
    for (const Tensor<T>& in : inputs) refs.push_back(tape.leaf(in, true));
    NodeRef<T> out = forward_op<T>(kind, refs, attrs);
    if (!tape.value(out).is_scalar()) {
        // Reduce through a fixed element-wise weighted projection rather than
        // a plain mean: a mean is blind to gradients that cancel across
        // elements (batchnorm training-mode outputs sum to zero per channel).
        const std::size_t R = tape.value(out).numel();
        NodeRef<T> flat = ops::reshape(out, Shape{1, R});
        Tensor<T> w({1, R});
        for (std::size_t i = 0; i < R; ++i)
            w.values[i] = static_cast<T>(1.0 + 0.5 * std::sin(1.7 * static_cast<double>(i) + 0.4));
        out = ops::mean_all(ops::linear(flat, tape.constant(std::move(w)), NodeRef<T>{}));
    }
    const T value = tape.value(out).item();
    if (with_grad) {
        tape.backward(out);
        grads_out->clear();
        for (const NodeRef<T>& r : refs) {
            Tensor<T>& g = tape.grad_of(r.id);
            grads_out->push_back(g.empty() ? Tensor<T>::zeros(tape.value(r).shape) : g);
        }
    }
    return value;
}

}  // namespace detail

/// Compares the reverse-mode gradient of a weighted reduction of one op
/// against central finite differences over every input element. Returns the
/// max relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
template <typename T>
double finite_difference_check(OpKind kind, const OpAttrs& attrs, double eps, std::uint64_t seed,
                               bool compact_inputs = false) {
    if (eps <= 0.0) throw std::invalid_argument("finite_difference_check: eps must be positive");
    Rng rng(derive_seed(seed, "gradcheck", static_cast<std::uint64_t>(kind)));
    OpAttrs a = attrs;
    std::vector<Tensor<T>> inputs = detail::gradcheck_inputs<T>(kind, a, rng, compact_inputs);
    if (kind == OpKind::SoftmaxCrossEntropy) {
        const std::size_t B = inputs[0].dim(0), C = inputs[0].dim(1);
        a.labels.resize(B);
        for (int& y : a.labels) y = static_cast<int>(rng.below(C));
    }

    std::vector<Tensor<T>> analytic;
    detail::gradcheck_eval<T>(kind, a, inputs, true, &analytic);

    double max_rel = 0.0;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        for (std::size_t i = 0; i < inputs[which].numel(); ++i) {
            std::vector<Tensor<T>> perturbed = inputs;
            const T orig = perturbed[which].values[i];
            perturbed[which].values[i] = orig + static_cast<T>(eps);
            const double fp = detail::gradcheck_eval<T>(kind, a, perturbed, false, nullptr);
            perturbed[which].values[i] = orig - static_cast<T>(eps);
            const double fm = detail::gradcheck_eval<T>(kind, a, perturbed, false, nullptr);
            const double numeric = (fp - fm) / (2.0 * eps);
            const double exact = analytic[which].values[i];
            const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-12});
            max_rel = std::max(max_rel, std::abs(exact - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace siamaf
