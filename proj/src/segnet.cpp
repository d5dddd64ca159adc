#include "uvx/segnet.hpp"

#include "uvx/flops.hpp"
#include "uvx/init.hpp"
#include "uvx/ops.hpp"

#include <cmath>
#include <sstream>

namespace uvx {

Shape ModelConfig::level_extents(std::size_t level) const {
    Shape s = input_extents;
    for (auto& e : s) e >>= (level - 1);
    return s;
}

vil::PatchEmbedConfig ModelConfig::patch_config() const {
    return vil::PatchEmbedConfig{patch_size, channels(levels), level_extents(levels), embed_dim};
}

vil::VilOptions ModelConfig::vil_options() const {
    vil::VilOptions o;
    o.embed_dim = embed_dim;
    o.heads = heads;
    o.residual = residual_vil;
    o.gate_silu = gate_silu;
    o.forget_gate = forget_gate;
    return o;
}

void ModelConfig::validate() const {
    if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("spatial_rank must be 2 or 3");
    if (levels < 2 || levels > 6) throw ConfigError("levels must be in [2, 6], got " + std::to_string(levels));
    if (base_channels == 0 || patch_size == 0 || embed_dim == 0 || heads == 0 || vil_blocks == 0) {
        throw ConfigError("base_channels, patch_size, embed_dim, heads and vil_blocks must be positive");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (input_extents.size() != spatial_rank) {
        throw ConfigError("input extents " + shape_str(input_extents) + " do not match spatial_rank " +
                          std::to_string(spatial_rank));
    }
    vil_options().validate();
    const std::size_t div = (std::size_t{1} << (levels - 1)) * patch_size;
    for (std::size_t i = 0; i < input_extents.size(); ++i) {
        if (input_extents[i] % div != 0) {
            throw ShapeError("input axis " + std::to_string(i) + " extent " + std::to_string(input_extents[i]) +
                             " is not divisible by 2^(levels-1) * patch_size = " + std::to_string(div));
        }
    }
}

std::string ModelSummary::to_csv() const {
    std::ostringstream os;
    os << "module,params,flops\n";
    for (const auto& [name, cost] : modules) os << name << ',' << cost.params << ',' << cost.flops << '\n';
    os << "total," << total_params << ',' << total_flops << '\n';
    return os.str();
}

template <class T>
UVixLSTM<T>::UVixLSTM(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    CounterRng rng(seed, /*stream=*/0x1417);
    const std::size_t d = cfg_.spatial_rank;
    auto kernel_shape = [d](std::size_t cout, std::size_t cin, std::size_t k) {
        Shape s{cout, cin};
        for (std::size_t i = 0; i < d; ++i) s.push_back(k);
        return s;
    };
    auto make_conv = [&](const std::string& id, std::size_t cin, std::size_t cout, std::size_t k) {
        const Shape ks = kernel_shape(cout, cin, k);
        const double fan_in = static_cast<double>(shape_numel(ks) / cout);
        const double sigma = cfg_.conv_init == ConvInit::He ? std::sqrt(2.0 / fan_in) : 0.02;
        ConvLayer<T> layer;
        layer.w = store_.add(id + ".w", init::truncated_normal<T>(ks, sigma, rng));
        layer.b = store_.add(id + ".b", Tensor<T>(Shape{cout}, T{0}));
        return layer;
    };

    for (std::size_t l = 1; l <= cfg_.levels; ++l) {
        const std::string p = "enc." + std::to_string(l);
        EncoderLevel lev;
        std::size_t cin = 1;
        if (l > 1) {
            cin = cfg_.channels(l - 1);
            if (cfg_.downsample == Downsample::StrideConv) lev.down = make_conv(p + ".down", cin, cin, 3);
        }
        lev.conv1 = make_conv(p + ".conv1", cin, cfg_.channels(l), 3);
        lev.conv2 = make_conv(p + ".conv2", cfg_.channels(l), cfg_.channels(l), 3);
        enc_.push_back(std::move(lev));
    }

    const vil::PatchEmbedConfig pc = cfg_.patch_config();
    embed_k_ = store_.add("embed.K", init::truncated_normal<T>({pc.token_dim(), pc.embed_dim}, 0.02, rng));
    embed_pos_ = store_.add("embed.K_pos", init::truncated_normal<T>({pc.num_tokens(), pc.embed_dim}, 0.02, rng));
    const vil::VilOptions vo = cfg_.vil_options();
    for (std::size_t b = 0; b < cfg_.vil_blocks; ++b) {
        vil_.push_back(vil::make_vil_block(store_, "vil." + std::to_string(b), vo, rng));
    }
    unembed_w_ = store_.add("unembed.w", init::truncated_normal<T>({pc.embed_dim, pc.token_dim()}, 0.02, rng));
    unembed_b_ = store_.add("unembed.b", Tensor<T>(Shape{pc.token_dim()}, T{0}));

    dec_.resize(cfg_.levels - 1);
    for (std::size_t l = cfg_.levels - 1; l >= 1; --l) {
        const std::string p = "dec." + std::to_string(l);
        dec_[l - 1].conv1 = make_conv(p + ".conv1", cfg_.channels(l + 1) + cfg_.channels(l), cfg_.channels(l), 3);
        dec_[l - 1].conv2 = make_conv(p + ".conv2", cfg_.channels(l), cfg_.channels(l), 3);
    }
    head_ = make_conv("head", cfg_.channels(1), cfg_.num_classes, 1);
}

template <class T>
Var<T> UVixLSTM<T>::conv(const ConvLayer<T>& layer, const Var<T>& x, std::size_t stride, std::size_t pad) const {
    const std::size_t d = cfg_.spatial_rank;
    return conv_nd(x, layer.w, layer.b, ConvSpec{std::vector<std::size_t>(d, stride), std::vector<std::size_t>(d, pad)});
}

template <class T>
void UVixLSTM<T>::check_input(const Var<T>& image) const {
    Shape expected{1};
    expected.insert(expected.end(), cfg_.input_extents.begin(), cfg_.input_extents.end());
    if (image.shape() != expected) {
        throw ShapeError("model input " + shape_str(image.shape()) + " does not match configured " + shape_str(expected));
    }
}

template <class T>
Var<T> UVixLSTM<T>::encoder_forward(const Var<T>& image, EncoderTrace<T>& trace) const {
    check_input(image);
    trace.levels.clear();
    Var<T> x = image;
    for (std::size_t l = 1; l <= cfg_.levels; ++l) {
        const EncoderLevel& lev = enc_[l - 1];
        if (l > 1) {
            x = cfg_.downsample == Downsample::StrideConv ? relu(conv(lev.down, x, 2, 1)) : max_pool2(x);
        }
        x = relu(conv(lev.conv1, x, 1, 1));
        x = relu(conv(lev.conv2, x, 1, 1));
        trace.levels.push_back(x);
    }
    return x;
}

template <class T>
Var<T> UVixLSTM<T>::bottleneck_forward(const Var<T>& r) const {
    const vil::PatchEmbedConfig pc = cfg_.patch_config();
    Var<T> p = vil::patchify_and_embed(r, pc, embed_k_, embed_pos_);
    Var<T> tokens = vil::vil_stack_forward(p, vil_, cfg_.vil_options());
    Var<T> restored = add(matmul(tokens, unembed_w_), unembed_b_);
    return vil::unpatchify(restored, r.shape(), cfg_.patch_size);
}

template <class T>
Var<T> UVixLSTM<T>::decoder_level(std::size_t level, const Var<T>& f_next, const Var<T>& skip) const {
    if (level < 1 || level >= cfg_.levels) throw ContractError("decoder_level: level out of range");
    Var<T> up = upsample_linear(f_next, 2);
    if (Shape(up.shape().begin() + 1, up.shape().end()) != Shape(skip.shape().begin() + 1, skip.shape().end())) {
        throw ShapeError("decoder_level: upsampled " + shape_str(up.shape()) + " does not align with skip " +
                         shape_str(skip.shape()));
    }
    const DecoderLevel& lev = dec_[level - 1];
    Var<T> x = concat<T>({up, skip}, 0);
    x = relu(conv(lev.conv1, x, 1, 1));
    return relu(conv(lev.conv2, x, 1, 1));
}

template <class T>
Var<T> UVixLSTM<T>::logits_impl(const Var<T>& image, std::map<std::string, std::uint64_t>* flops_by_module) const {
    auto run = [&](const char* name, auto&& fn) {
        flops::FlopScope scope;
        auto out = fn();
        if (flops_by_module) (*flops_by_module)[name] += scope.count();
        return out;
    };
    EncoderTrace<T> trace;
    Var<T> r = run("enc", [&] { return encoder_forward(image, trace); });
    Var<T> f = run("bottleneck", [&] { return bottleneck_forward(r); });
    f = run("dec", [&] {
        Var<T> x = f;
        for (std::size_t l = cfg_.levels - 1; l >= 1; --l) x = decoder_level(l, x, trace.levels[l - 1]);
        return x;
    });
    return run("head", [&] { return conv(head_, f, 1, 0); });
}

template <class T>
Var<T> UVixLSTM<T>::logits(const Var<T>& image) const {
    return logits_impl(image, nullptr);
}

template <class T>
Var<T> UVixLSTM<T>::forward(const Var<T>& image) const {
    return softmax_channel(logits(image));
}

template <class T>
ModelSummary UVixLSTM<T>::summary() const {
    std::map<std::string, std::uint64_t> fl;
    Shape in{1};
    in.insert(in.end(), cfg_.input_extents.begin(), cfg_.input_extents.end());
    {
        NoGradGuard ng;
        flops::FlopScope total;
        Var<T> out = logits_impl(Var<T>(Tensor<T>(in, T{0})), &fl);
        flops::FlopScope sm;
        softmax_channel(out);
        fl["head"] += sm.count();
    }
    ModelSummary s;
    const std::pair<const char*, std::vector<const char*>> groups[] = {
        {"enc", {"enc."}}, {"bottleneck", {"embed.", "vil.", "unembed."}}, {"dec", {"dec."}}, {"head", {"head."}}};
    for (const auto& [name, prefixes] : groups) {
        ModuleCost c;
        for (const char* p : prefixes) c.params += store_.scalar_count(p);
        c.flops = fl[name];
        s.modules.emplace_back(name, c);
        s.total_params += c.params;
        s.total_flops += c.flops;
    }
    return s;
}

template class UVixLSTM<float>;
template class UVixLSTM<double>;

} // namespace uvx
