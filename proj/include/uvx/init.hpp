#pragma once

#include "uvx/rng.hpp"
#include "uvx/tensor.hpp"

#include <random>

namespace uvx::init {

/// Normal(0, std) samples redrawn until they fall within +-2 std.
template <class T>
Tensor<T> truncated_normal(const Shape& shape, double std, CounterRng& rng) {
    Tensor<T> t(shape);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (T& v : t.data()) {
        double z = dist(rng);
        while (z < -2.0 || z > 2.0) z = dist(rng);
        v = static_cast<T>(z * std);
    }
    return t;
}

/// `n` values evenly spaced over [lo, hi] (inclusive); a single value is `lo`.
template <class T>
Tensor<T> linspace(std::size_t n, double lo, double hi) {
    Tensor<T> t(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = static_cast<T>(n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1));
    }
    return t;
}

} // namespace uvx::init
