#pragma once

#include "uvx/autodiff.hpp"
#include "uvx/ops.hpp"
#include "uvx/rng.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace uvx::vil {

// ---------------------------------------------------------------------------
// Patch embedding

struct PatchEmbedConfig {
    std::size_t patch_size = 2;
    std::size_t channels = 0; ///< channels of the bottleneck feature map r
    Shape grid;               ///< spatial extents of r (rank 2 or 3)
    std::size_t embed_dim = 64;

    std::size_t spatial_rank() const { return grid.size(); }
    /// P^d * channels
    std::size_t token_dim() const;
    /// product(grid) / P^d
    std::size_t num_tokens() const;
    /// Throws ShapeError naming the first axis not divisible by the patch size.
    void validate() const;
};

/// Offsets into r[C x S...] for each (token, feature) of the patch matrix.
/// Tokens run in raster order (first spatial axis slowest); features within a
/// patch are channel-fastest.
std::vector<std::size_t> patch_index(const Shape& r_shape, std::size_t patch_size);

/// r[C x S...] -> t[N x P^d C].
template <class T>
Var<T> patchify(const Var<T>& r, std::size_t patch_size);

/// Inverse of patchify: t[N x P^d C] -> r[C x S...].
template <class T>
Var<T> unpatchify(const Var<T>& tokens, const Shape& r_shape, std::size_t patch_size);

/// p = t K + K_pos with K[token_dim x Z], K_pos[N x Z].
template <class T>
Var<T> patchify_and_embed(const Var<T>& r, const PatchEmbedConfig& cfg, const Var<T>& K, const Var<T>& K_pos);

/// Same map computed as a stride-P convolution whose kernel is K rearranged.
template <class T>
Var<T> patch_embed_conv(const Var<T>& r, const PatchEmbedConfig& cfg, const Var<T>& K, const Var<T>& K_pos);

// ---------------------------------------------------------------------------
// mLSTM recurrence

/// Constant-size recurrent memory: matrix cell state C[heads x dv x dk],
/// normalizer eta[heads x dk], stabilizer m[heads] (running max of log-gate
/// terms). Its size depends only on (heads, dv, dk).
template <class T>
struct MlstmState {
    std::size_t heads = 0, dv = 0, dk = 0;
    Tensor<T> C, eta, m;

    MlstmState(std::size_t heads, std::size_t dv, std::size_t dk);

    void reset();
    std::size_t bytes() const { return (C.size() + eta.size() + m.size()) * sizeof(T); }
    bool finite() const;
};

/// Advances `state` by one token. Per head, with scalar log-gates i~, f~:
///   m_t = max(f~ + m_{t-1}, i~),  i' = exp(i~ - m_t),  f' = exp(f~ + m_{t-1} - m_t)
///   C_t = f' C_{t-1} + i' v k^T,  eta_t = f' eta_{t-1} + i' k
///   h_t = C_t q / max(|eta_t . q|, exp(-m_t))
/// which equals the unstabilized readout C q / max(|eta . q|, 1) exactly.
/// q, k: heads*dk; v, h: heads*dv; gates: heads. Throws NumericError (with
/// `token` in the message) if the state stops being finite.
template <class T>
void mlstm_step(MlstmState<T>& state, const T* q, const T* k, const T* v, const T* igate, const T* fgate, T* h,
                std::size_t token);

/// Floating-point operations performed by one mlstm_step.
std::uint64_t mlstm_step_flops(std::size_t heads, std::size_t dv, std::size_t dk);

/// Differentiable forward-direction recurrence over N tokens.
/// q, k, v: [N x D] with D = heads * d; igate, fgate: [N x heads]. Returns the
/// normalized readout [N x D] (before the output gate).
template <class T>
Var<T> mlstm_recurrence(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& igate, const Var<T>& fgate,
                        std::size_t heads);

// ---------------------------------------------------------------------------
// ViL blocks

enum class Direction { Forward, Reverse };

/// Forget-gate activation: Exp uses f = exp(f~) (log-gate f~); Sigmoid uses
/// f = sigmoid(f~) (log-gate log_sigmoid(f~)). The input gate is always exp.
enum class ForgetGate { Exp, Sigmoid };

struct VilOptions {
    std::size_t embed_dim = 64; ///< Z; the inner width is 2Z
    std::size_t heads = 4;
    std::size_t conv_width = 4;
    bool residual = true;
    bool gate_silu = true;
    ForgetGate forget_gate = ForgetGate::Sigmoid;

    std::size_t inner_dim() const { return 2 * embed_dim; }
    std::size_t head_dim() const { return inner_dim() / heads; }
    void validate() const;
};

template <class T>
struct VilBlockParams {
    Var<T> norm_gain, norm_bias;
    Var<T> w_up;           ///< [Z x 4Z]: x_mlstm columns first, then y
    Var<T> conv_w, conv_b; ///< [2Z x width], [2Z]
    Var<T> w_q, w_k, w_v;  ///< [2Z x 2Z]
    Var<T> w_i, b_i;       ///< [2Z x heads], [heads]
    Var<T> w_f, b_f;       ///< [2Z x heads], [heads]
    Var<T> w_o, b_o;       ///< [2Z x 2Z], [2Z]
    Var<T> w_down;         ///< [2Z x Z]
};

/// Registers one block's parameters as "<prefix>.<name>".
template <class T>
VilBlockParams<T> make_vil_block(ParameterStore<T>& store, const std::string& prefix, const VilOptions& opts,
                                 CounterRng& rng);

/// silu(causal depthwise conv(x)).
template <class T>
Var<T> causal_conv_silu(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// q/k/v and gate projections, recurrence, and output gate on X[N x 2Z].
/// Reverse direction is flip -> forward scan -> flip over the token axis.
template <class T>
Var<T> mlstm_scan(const Var<T>& X, const VilBlockParams<T>& params, const VilOptions& opts, Direction direction);

/// One ViL block; even indices traverse tokens forward, odd ones in reverse.
template <class T>
Var<T> vil_block_forward(const Var<T>& p, const VilBlockParams<T>& params, const VilOptions& opts,
                         std::size_t block_index);

template <class T>
Var<T> vil_stack_forward(const Var<T>& p, const std::vector<VilBlockParams<T>>& blocks, const VilOptions& opts);

} // namespace uvx::vil
