#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace siamaf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major array. Convention: [batch, channels, length] for signals,
/// [batch, features] for vectors, rank 0 for scalars.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), values(shape_numel(shape), T(0)) {}
    Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != shape_numel(shape))
            throw std::invalid_argument("tensor: value count does not match shape " + shape_str(shape));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.values.begin(), t.values.end(), v);
        return t;
    }

    std::size_t numel() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    bool is_scalar() const { return numel() == 1 && rank() <= 1; }
    bool empty() const { return values.empty(); }

    T* data() { return values.data(); }
    const T* data() const { return values.data(); }

    T item() const {
        if (numel() != 1) throw std::runtime_error("tensor: item() on non-scalar " + shape_str(shape));
        return values[0];
    }

    void fill(T v) { std::fill(values.begin(), values.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.values.resize(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
        return out;
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (const T& v : t.values)
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* context) {
    if (!all_finite(t))
        throw std::runtime_error(std::string("non-finite values in ") + context);
}

/// Output length of a strided window sweep: floor((L + 2*pad - K)/stride) + 1.
inline std::size_t conv_out_len(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t pad) {
    const std::size_t padded = length + 2 * pad;
    if (kernel == 0 || stride == 0) throw std::invalid_argument("conv_out_len: kernel and stride must be positive");
    if (padded < kernel) throw std::invalid_argument("conv_out_len: window larger than padded input");
    return (padded - kernel) / stride + 1;
}

}  // namespace siamaf
