#pragma once

#include "uvx/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace uvx {

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Per step t: v <- v - lr*wd*v, then v <- v - lr * mhat / (sqrt(vhat) + eps).
/// Moments are indexed by the store's parameter order and persist across
/// steps; they can be exported for checkpointing.
template <class T>
class AdamW {
public:
    explicit AdamW(ParameterStore<T>& store, AdamWOptions opts = {});

    /// Applies one update from the gradients currently held by the store.
    /// Throws NumericError naming the parameter if any gradient is non-finite;
    /// no parameter is modified in that case.
    void step();

    std::uint64_t step_count() const { return step_; }
    const AdamWOptions& options() const { return opts_; }
    void set_lr(double lr) { opts_.lr = lr; }

    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }
    void set_step_count(std::uint64_t s) { step_ = s; }

private:
    ParameterStore<T>* store_;
    AdamWOptions opts_;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
    std::uint64_t step_ = 0;
};

} // namespace uvx
