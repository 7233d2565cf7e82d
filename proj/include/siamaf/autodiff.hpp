#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "siamaf/tensor.hpp"

namespace siamaf {

/// Learnable array with its gradient buffer and named optimizer state.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    std::unordered_map<std::string, Tensor<T>> opt_state;

    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { grad.fill(T(0)); }
};

/// Owns parameters and non-learnable buffers (batchnorm running statistics).
/// Iteration order is creation order, which makes optimizer sweeps and
/// checkpoint layout deterministic.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& create(const std::string& name, Tensor<T> init) {
        if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        params_.push_back(std::make_unique<Parameter<T>>(name, std::move(init)));
        by_name_[name] = params_.back().get();
        return *params_.back();
    }

    Tensor<T>& create_buffer(const std::string& name, Tensor<T> init) {
        if (buffer_by_name_.count(name)) throw std::invalid_argument("duplicate buffer name: " + name);
        buffers_.emplace_back(name, std::make_unique<Tensor<T>>(std::move(init)));
        buffer_by_name_[name] = buffers_.back().second.get();
        return *buffers_.back().second;
    }

    Parameter<T>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    Tensor<T>* find_buffer(const std::string& name) const {
        auto it = buffer_by_name_.find(name);
        return it == buffer_by_name_.end() ? nullptr : it->second;
    }

    std::vector<Parameter<T>*> params() const {
        std::vector<Parameter<T>*> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> buffers() const {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.reserve(buffers_.size());
        for (const auto& [name, t] : buffers_) out.emplace_back(name, t.get());
        return out;
    }

    std::size_t size() const { return params_.size(); }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (const auto& p : params_) p->zero_grad();
    }

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::unordered_map<std::string, Parameter<T>*> by_name_;
    std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>> buffers_;
    std::unordered_map<std::string, Tensor<T>*> buffer_by_name_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct NodeRef {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    bool valid() const { return tape != nullptr; }
};

/// Reverse-mode differentiation tape. Records one training step's ops in
/// topological order; backward() traverses in exact reverse and accumulates
/// into Parameter::grad. One tape per step, cleared by destruction.
template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily during backward
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        std::function<void(Tape&, std::size_t)> backward;
        const char* op_name = "leaf";
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled = true;

    NodeRef<T> constant(Tensor<T> v) {
        return push(std::move(v), false, nullptr, nullptr, "constant");
    }

    NodeRef<T> leaf(Tensor<T> v, bool requires_grad) {
        return push(std::move(v), requires_grad && grad_enabled, nullptr, nullptr, "leaf");
    }

    NodeRef<T> param(Parameter<T>& p) {
        return push(p.value, grad_enabled, &p, nullptr, "param");
    }

    NodeRef<T> push(Tensor<T> v, bool requires_grad, Parameter<T>* param,
                    std::function<void(Tape&, std::size_t)> backward, const char* op_name) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad && grad_enabled;
        n.param = param;
        if (n.requires_grad) n.backward = std::move(backward);
        n.op_name = op_name;
        nodes_.push_back(std::move(n));
        return NodeRef<T>{this, nodes_.size() - 1};
    }

    Node& node(std::size_t id) { return nodes_.at(id); }
    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    const Tensor<T>& value(NodeRef<T> r) const { return nodes_.at(r.id).value; }

    /// Accumulates `g` into the gradient buffer of node `id`.
    void accumulate(std::size_t id, const Tensor<T>& g) {
        Node& n = nodes_.at(id);
        if (!n.requires_grad) return;
        if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>::zeros(n.value.shape);
        if (g.shape != n.grad.shape)
            throw std::runtime_error(std::string("gradient shape mismatch at ") + n.op_name);
        T* dst = n.grad.data();
        const T* src = g.data();
        const std::size_t m = g.numel();
        for (std::size_t i = 0; i < m; ++i) dst[i] += src[i];
    }

    /// Gradient buffer of node `id`, allocated on demand.
    Tensor<T>& grad_of(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    /// Reverse sweep from `loss` (must be scalar). Fills Parameter::grad for
    /// every parameter leaf reachable from the loss; stop-gradient barriers
    /// contribute exactly zero beyond the barrier.
    void backward(NodeRef<T> loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: loss from a different tape");
        if (consumed_) throw std::runtime_error("backward: tape already consumed");
        const Node& l = nodes_.at(loss.id);
        if (!l.value.is_scalar()) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(l.value.shape));
        if (!l.requires_grad) throw std::runtime_error("backward: loss does not require gradients");
        consumed_ = true;

        grad_of(loss.id).values[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            check_finite(n.grad, n.op_name);
            if (n.backward) n.backward(*this, i);
            if (n.param) {
                T* dst = n.param->grad.data();
                const T* src = n.grad.data();
                for (std::size_t k = 0; k < n.grad.numel(); ++k) dst[k] += src[k];
            }
        }
    }

    /// Gradient map keyed by parameter name, for inspection in tests.
    std::unordered_map<std::string, Tensor<T>> grad_map() const {
        std::unordered_map<std::string, Tensor<T>> out;
        for (const Node& n : nodes_)
            if (n.param) out[n.param->name] = n.param->grad;
        return out;
    }

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <typename T>
const Tensor<T>& NodeRef<T>::value() const {
    return tape->value(*this);
}

}  // namespace siamaf
