#pragma once

#include "uvx/autodiff.hpp"
#include "uvx/vil.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace uvx {

enum class Downsample { StrideConv, MaxPool };

/// Conv weight initialization: truncated Normal(0, 0.02) or He-scaled
/// truncated normal (std = sqrt(2 / fan_in)).
enum class ConvInit { Normal002, He };

/// Architecture hyperparameters of the U-shaped network.
struct ModelConfig {
    std::size_t spatial_rank = 2;
    std::size_t levels = 4;        ///< conv stages x
    std::size_t base_channels = 16;
    std::size_t patch_size = 2;
    std::size_t embed_dim = 64;    ///< Z
    std::size_t vil_blocks = 6;    ///< L
    std::size_t num_classes = 3;
    std::size_t heads = 4;
    bool residual_vil = true;
    bool gate_silu = true;
    vil::ForgetGate forget_gate = vil::ForgetGate::Sigmoid;
    Downsample downsample = Downsample::StrideConv;
    ConvInit conv_init = ConvInit::He;
    Shape input_extents{64, 64};   ///< spatial extents of the input image

    /// Channels of encoder level l (1-based): C * 2^(l-1).
    std::size_t channels(std::size_t level) const { return base_channels << (level - 1); }
    /// Spatial extents of encoder level l.
    Shape level_extents(std::size_t level) const;
    vil::PatchEmbedConfig patch_config() const;
    vil::VilOptions vil_options() const;
    std::size_t num_tokens() const { return patch_config().num_tokens(); }

    /// Throws ConfigError / ShapeError on unsupported values.
    void validate() const;
};

/// Per-level encoder features retained for the skip connections.
template <class T>
struct EncoderTrace {
    std::vector<Var<T>> levels; ///< E_1 .. E_x
};

template <class T>
struct ConvLayer {
    Var<T> w, b;
};

struct ModuleCost {
    std::size_t params = 0;
    std::uint64_t flops = 0;
};

/// Structured architecture report: parameter counts and forward FLOPs per module.
struct ModelSummary {
    std::vector<std::pair<std::string, ModuleCost>> modules;
    std::size_t total_params = 0;
    std::uint64_t total_flops = 0;

    /// "module,params,flops" rows with a trailing total row.
    std::string to_csv() const;
};

template <class T>
class UVixLSTM {
public:
    UVixLSTM(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& parameters() { return store_; }
    const ParameterStore<T>& parameters() const { return store_; }

    /// Conv stages; returns r = E_x and fills `trace` with every E_l.
    Var<T> encoder_forward(const Var<T>& image, EncoderTrace<T>& trace) const;

    /// Patch embedding, ViL stack and restoration to the bottleneck grid (F_x).
    Var<T> bottleneck_forward(const Var<T>& r) const;

    /// U_l = upsample(F_{l+1}); concat(U_l, E_l); two conv+ReLU to E_l's channels.
    Var<T> decoder_level(std::size_t level, const Var<T>& f_next, const Var<T>& skip) const;

    /// Pre-softmax class scores [c x spatial].
    Var<T> logits(const Var<T>& image) const;

    /// Class probabilities [c x spatial].
    Var<T> forward(const Var<T>& image) const;

    ModelSummary summary() const;

    const std::vector<vil::VilBlockParams<T>>& vil_blocks() const { return vil_; }

private:
    Var<T> logits_impl(const Var<T>& image, std::map<std::string, std::uint64_t>* flops) const;
    Var<T> conv(const ConvLayer<T>& layer, const Var<T>& x, std::size_t stride, std::size_t pad) const;
    void check_input(const Var<T>& image) const;

    ModelConfig cfg_;
    ParameterStore<T> store_;
    struct EncoderLevel {
        ConvLayer<T> down; ///< unused on level 1 or with max pooling
        ConvLayer<T> conv1, conv2;
    };
    struct DecoderLevel {
        ConvLayer<T> conv1, conv2;
    };
    std::vector<EncoderLevel> enc_;    ///< index l-1
    Var<T> embed_k_, embed_pos_;
    std::vector<vil::VilBlockParams<T>> vil_;
    Var<T> unembed_w_, unembed_b_;
    std::vector<DecoderLevel> dec_;    ///< index l-1 for l = 1..x-1
    ConvLayer<T> head_;
};

/// Free-function forms of the network stages.
template <class T>
Var<T> encoder_forward(const UVixLSTM<T>& model, const Var<T>& image, EncoderTrace<T>& trace) {
    return model.encoder_forward(image, trace);
}

template <class T>
Var<T> uvixlstm_forward(const UVixLSTM<T>& model, const Var<T>& image) {
    return model.forward(image);
}

} // namespace uvx
