#pragma once

#include "uvx/autodiff.hpp"
#include "uvx/tensor.hpp"

#include <cstddef>
#include <vector>

namespace uvx {

// Elementwise binary ops broadcast numpy-style over right-aligned axes whose
// extents either match or are 1. The gradient of a broadcast operand is the
// sum of the expanded gradient over its broadcast axes.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
/// Throws NumericError when any divisor element is exactly zero.
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);

template <class T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <class T> Var<T> scale(const Var<T>& x, T s);
template <class T> Var<T> add_scalar(const Var<T>& x, T s);
template <class T> Var<T> neg(const Var<T>& x);
template <class T> Var<T> exp(const Var<T>& x);
/// Throws NumericError on non-positive input.
template <class T> Var<T> log(const Var<T>& x);
template <class T> Var<T> sigmoid(const Var<T>& x);
/// log(sigmoid(x)), stable for large |x|.
template <class T> Var<T> log_sigmoid(const Var<T>& x);
template <class T> Var<T> silu(const Var<T>& x);
template <class T> Var<T> relu(const Var<T>& x);
/// max(x, lo); the gradient is passed only where x > lo.
template <class T> Var<T> clamp_min(const Var<T>& x, T lo);

template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> mean(const Var<T>& x);
/// Sum-reduces `x` to a broadcast-compatible `shape` (same rank, extents equal or 1).
template <class T> Var<T> sum_to(const Var<T>& x, const Shape& shape);

/// a[m x k] * b[k x n].
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> transpose(const Var<T>& a);

template <class T> Var<T> reshape(const Var<T>& x, Shape shape);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <class T> Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Reverses `x` along `axis`.
template <class T> Var<T> flip(const Var<T>& x, std::size_t axis);
/// out.flat[i] = x.flat[index[i]]; backward scatter-adds.
template <class T> Var<T> gather(const Var<T>& x, const std::vector<std::size_t>& index, Shape out_shape);

struct ConvSpec {
    std::vector<std::size_t> stride; ///< per spatial axis; empty means all 1
    std::vector<std::size_t> pad;    ///< per spatial axis; empty means all 0
};

/// Cross-correlation of x[C_in x S...] with w[C_out x C_in x K...] plus a
/// per-output-channel bias (pass an undefined Var for none). Spatial rank 2 or 3.
template <class T> Var<T> conv_nd(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvSpec& spec);

/// 2 (or 2x2x2) max pooling with stride 2 over the spatial axes of x[C x S...].
template <class T> Var<T> max_pool2(const Var<T>& x);

/// Bilinear/trilinear upsampling of x[C x S...] with align-corners=false.
/// Only factor 2 is supported.
template <class T> Var<T> upsample_linear(const Var<T>& x, std::size_t factor = 2);

/// Softmax over axis 0 (classes) at every spatial location.
template <class T> Var<T> softmax_channel(const Var<T>& x);

/// Normalizes each row of x[N x Z] over the last axis, then applies gain/bias[Z].
template <class T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));

/// Depthwise causal 1D convolution along axis 0 of x[N x D] with kernel w[D x K]
/// and bias[D]: out[t] depends only on x[t-K+1 .. t].
template <class T> Var<T> causal_depthwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

/// Constant (non-differentiable) leaf.
template <class T> Var<T> constant(Tensor<T> t) { return Var<T>(std::move(t), false); }

} // namespace uvx
