#pragma once

#include "uvx/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace uvx {

/// softmax(Q K^T * scale) V for Q, K, V of shape [N x Z].
template <class T>
Tensor<T> attention_core(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, T scale);

/// Single-head attention with Q = X Wq, K = X Wk, V = X Wv and scale 1/sqrt(Z).
template <class T>
Tensor<T> softmax_attention_reference(const Tensor<T>& X, const Tensor<T>& Wq, const Tensor<T>& Wk,
                                      const Tensor<T>& Wv);

struct BenchOptions {
    std::vector<std::size_t> sizes{64, 128, 256, 512, 1024};
    std::size_t embed_dim = 64; ///< Z
    std::size_t heads = 4;
    std::size_t repeats = 5;
    double min_seconds = 1e-3;  ///< timed runs shorter than this are batched
    std::uint64_t seed = 0;
};

struct BenchRow {
    std::string mixer; ///< "mlstm" or "attention"
    std::size_t n = 0;
    double seconds = 0.0;       ///< median over repeats of one forward pass
    std::size_t inner_reps = 1; ///< calls per timed repeat
    std::uint64_t flops = 0;
    std::size_t state_bytes = 0;
};

struct BenchFit {
    std::string mixer;
    double time_slope = 0.0;
    double flop_slope = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::vector<BenchFit> fits;

    /// "mixer,n,seconds,inner_reps,flops,state_bytes"
    std::string to_csv() const;
    /// "mixer,time_slope,flop_slope"
    std::string fits_csv() const;
    const BenchFit& fit(const std::string& mixer) const;
};

/// Least-squares slope of log(y) against log(x); needs at least two points.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Times the mLSTM recurrence and the attention core on projected inputs at
/// every size. A warmup call precedes timing; each repeat runs enough calls to
/// last at least min_seconds; the reported time is the median per call.
BenchReport run_bench(const BenchOptions& opts = {});

} // namespace uvx
