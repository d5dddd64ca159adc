#pragma once

#include "uvx/autodiff.hpp"
#include "uvx/ops.hpp"
#include "uvx/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace uvx::testing {

inline Tensor<double> random_tensor(const Shape& s, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(s);
    for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

inline Tensor<float> random_tensor_f(const Shape& s, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
    return random_tensor(s, rng, lo, hi).cast<float>();
}

/// max |a - b| / max(1, |a|, |b|) elementwise.
template <class T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
    }
    return worst;
}

using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of sum(f(inputs) * W) for a fixed random W
/// against central differences over every input coordinate.
inline double finite_difference_error(const Fn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-6,
                                      std::uint64_t seed = 7) {
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.emplace_back(t, true);
    Var<double> out = f(vars);
    CounterRng rng(seed, 99);
    const Var<double> w(random_tensor(out.shape(), rng));
    backward(sum(mul(out, w)));

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        NoGradGuard ng;
        std::vector<Var<double>> vs;
        for (const auto& t : xs) vs.emplace_back(t);
        return sum(mul(f(vs), w)).value().item();
    };
    double worst = 0.0;
    std::vector<Tensor<double>> xs = inputs;
    for (std::size_t a = 0; a < xs.size(); ++a) {
        const Tensor<double> g = vars[a].grad();
        for (std::size_t i = 0; i < xs[a].size(); ++i) {
            const double x0 = xs[a][i];
            xs[a][i] = x0 + h;
            const double fp = eval(xs);
            xs[a][i] = x0 - h;
            const double fm = eval(xs);
            xs[a][i] = x0;
            const double num = (fp - fm) / (2 * h);
            worst = std::max(worst, std::abs(num - g[i]) / std::max(1.0, std::abs(num)));
        }
    }
    return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("uvx_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace uvx::testing
