#include "uvx/vil.hpp"

#include "uvx/flops.hpp"
#include "uvx/init.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace uvx::vil {

// ---------------------------------------------------------------------------
// Patch embedding

std::size_t PatchEmbedConfig::token_dim() const {
    std::size_t n = channels;
    for (std::size_t i = 0; i < grid.size(); ++i) n *= patch_size;
    return n;
}

std::size_t PatchEmbedConfig::num_tokens() const {
    std::size_t n = 1;
    for (std::size_t e : grid) n *= e / patch_size;
    return n;
}

void PatchEmbedConfig::validate() const {
    if (patch_size == 0 || embed_dim == 0 || channels == 0) {
        throw ConfigError("patch embedding: patch_size, channels and embed_dim must be positive");
    }
    if (grid.size() != 2 && grid.size() != 3) throw ShapeError("patch embedding: spatial rank must be 2 or 3");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid[i] % patch_size != 0) {
            throw ShapeError("patch embedding: spatial axis " + std::to_string(i) + " extent " + std::to_string(grid[i]) +
                             " is not divisible by patch size " + std::to_string(patch_size));
        }
    }
}

std::vector<std::size_t> patch_index(const Shape& r_shape, std::size_t P) {
    PatchEmbedConfig cfg{P, r_shape.at(0), Shape(r_shape.begin() + 1, r_shape.end()), 1};
    cfg.validate();
    const std::size_t d = cfg.spatial_rank();
    const std::size_t C = cfg.channels;
    // Normalize to three spatial axes; missing leading axes have extent 1.
    std::array<std::size_t, 3> S{1, 1, 1}, G{1, 1, 1}, Pk{1, 1, 1};
    for (std::size_t i = 0; i < d; ++i) {
        S[3 - d + i] = cfg.grid[i];
        G[3 - d + i] = cfg.grid[i] / P;
        Pk[3 - d + i] = P;
    }
    const std::size_t plane = S[0] * S[1] * S[2];
    std::vector<std::size_t> index;
    index.reserve(cfg.num_tokens() * cfg.token_dim());
    for (std::size_t g0 = 0; g0 < G[0]; ++g0)
        for (std::size_t g1 = 0; g1 < G[1]; ++g1)
            for (std::size_t g2 = 0; g2 < G[2]; ++g2)
                for (std::size_t o0 = 0; o0 < Pk[0]; ++o0)
                    for (std::size_t o1 = 0; o1 < Pk[1]; ++o1)
                        for (std::size_t o2 = 0; o2 < Pk[2]; ++o2) {
                            const std::size_t sp =
                                ((g0 * Pk[0] + o0) * S[1] + (g1 * Pk[1] + o1)) * S[2] + (g2 * Pk[2] + o2);
                            for (std::size_t c = 0; c < C; ++c) index.push_back(c * plane + sp);
                        }
    return index;
}

template <class T>
Var<T> patchify(const Var<T>& r, std::size_t P) {
    PatchEmbedConfig cfg{P, r.dim(0), Shape(r.shape().begin() + 1, r.shape().end()), 1};
    cfg.validate();
    return gather(r, patch_index(r.shape(), P), Shape{cfg.num_tokens(), cfg.token_dim()});
}

template <class T>
Var<T> unpatchify(const Var<T>& tokens, const Shape& r_shape, std::size_t P) {
    const std::vector<std::size_t> fwd = patch_index(r_shape, P);
    if (tokens.size() != fwd.size()) {
        throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not fill " + shape_str(r_shape));
    }
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return gather(tokens, inv, r_shape);
}

template <class T>
Var<T> patchify_and_embed(const Var<T>& r, const PatchEmbedConfig& cfg, const Var<T>& K, const Var<T>& K_pos) {
    cfg.validate();
    if (K.shape() != Shape{cfg.token_dim(), cfg.embed_dim} || K_pos.shape() != Shape{cfg.num_tokens(), cfg.embed_dim}) {
        throw ShapeError("patchify_and_embed: K " + shape_str(K.shape()) + " / K_pos " + shape_str(K_pos.shape()) +
                         " do not match token_dim " + std::to_string(cfg.token_dim()) + ", tokens " +
                         std::to_string(cfg.num_tokens()) + ", Z " + std::to_string(cfg.embed_dim));
    }
    return add(matmul(patchify(r, cfg.patch_size), K), K_pos);
}

template <class T>
Var<T> patch_embed_conv(const Var<T>& r, const PatchEmbedConfig& cfg, const Var<T>& K, const Var<T>& K_pos) {
    cfg.validate();
    const std::size_t d = cfg.spatial_rank();
    const std::size_t C = cfg.channels;
    const std::size_t Z = cfg.embed_dim;
    const std::size_t pd = cfg.token_dim() / C;
    // kernel[z][c][o...] = K[o_flat * C + c][z]
    std::vector<std::size_t> idx;
    idx.reserve(Z * C * pd);
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t o = 0; o < pd; ++o) idx.push_back((o * C + c) * Z + z);
    Shape kshape{Z, C};
    for (std::size_t i = 0; i < d; ++i) kshape.push_back(cfg.patch_size);
    Var<T> kernel = gather(K, idx, kshape);
    ConvSpec spec{std::vector<std::size_t>(d, cfg.patch_size), std::vector<std::size_t>(d, 0)};
    Var<T> maps = conv_nd(r, kernel, Var<T>(), spec);
    return add(transpose(reshape(maps, Shape{Z, cfg.num_tokens()})), K_pos);
}

// ---------------------------------------------------------------------------
// mLSTM recurrence

template <class T>
MlstmState<T>::MlstmState(std::size_t h, std::size_t v, std::size_t k)
    : heads(h), dv(v), dk(k), C(Shape{h, v, k}), eta(Shape{h, k}), m(Shape{h}) {
    reset();
}

template <class T>
void MlstmState<T>::reset() {
    C.fill(T{0});
    eta.fill(T{0});
    m.fill(-std::numeric_limits<T>::infinity());
}

template <class T>
bool MlstmState<T>::finite() const {
    for (T x : C.data())
        if (!std::isfinite(x)) return false;
    for (T x : eta.data())
        if (!std::isfinite(x)) return false;
    return true;
}

std::uint64_t mlstm_step_flops(std::size_t heads, std::size_t dv, std::size_t dk) {
    // gates 8, C update 3 dv dk, eta update 3 dk, readout 2 dv dk + 2 dk + dv, denominator 3
    return static_cast<std::uint64_t>(heads) * (5 * dv * dk + 5 * dk + dv + 11);
}

namespace {

template <class T>
struct StepRecord {
    T a, b, s, den;
    bool den_is_s;
};

template <class T>
void step_impl(MlstmState<T>& st, const T* q, const T* k, const T* v, const T* ig, const T* fg, T* h, std::size_t token,
               StepRecord<T>* rec) {
    const std::size_t dv = st.dv;
    const std::size_t dk = st.dk;
    bool ok = true;
    for (std::size_t hd = 0; hd < st.heads; ++hd) {
        const T* qh = q + hd * dk;
        const T* kh = k + hd * dk;
        const T* vh = v + hd * dv;
        T* out = h + hd * dv;
        T* C = st.C.data().data() + hd * dv * dk;
        T* eta = st.eta.data().data() + hd * dk;
        const T m_prev = st.m[hd];
        const bool first = std::isinf(m_prev) && m_prev < 0;
        const T m_new = first ? ig[hd] : std::max(fg[hd] + m_prev, ig[hd]);
        const T a = first ? T{0} : std::exp(fg[hd] + m_prev - m_new);
        const T b = std::exp(ig[hd] - m_new);
        st.m[hd] = m_new;

        T s = 0;
        for (std::size_t j = 0; j < dk; ++j) {
            eta[j] = a * eta[j] + b * kh[j];
            s += eta[j] * qh[j];
            ok = ok && std::isfinite(eta[j]);
        }
        for (std::size_t i = 0; i < dv; ++i) {
            T* row = C + i * dk;
            const T bv = b * vh[i];
            T acc = 0;
            for (std::size_t j = 0; j < dk; ++j) {
                row[j] = a * row[j] + bv * kh[j];
                acc += row[j] * qh[j];
            }
            out[i] = acc;
        }
        const T floor = std::exp(-m_new);
        const bool den_is_s = std::abs(s) >= floor;
        T den = den_is_s ? std::abs(s) : floor;
        if (den < std::numeric_limits<T>::min()) den = std::numeric_limits<T>::min();
        for (std::size_t i = 0; i < dv; ++i) {
            out[i] /= den;
            ok = ok && std::isfinite(out[i]);
        }
        // The sign of s only matters on the |s| branch.
        if (kink::active()) kink::record(den_is_s ? 2u + static_cast<std::uint64_t>(s > 0) : 0u);
        if (rec) rec[hd] = StepRecord<T>{a, b, s, den, den_is_s};
    }
    flops::add(mlstm_step_flops(st.heads, dv, dk));
    if (!ok) {
        throw NumericError("mlstm: non-finite state after token " + std::to_string(token));
    }
}

} // namespace

template <class T>
void mlstm_step(MlstmState<T>& state, const T* q, const T* k, const T* v, const T* igate, const T* fgate, T* h,
                std::size_t token) {
    step_impl<T>(state, q, k, v, igate, fgate, h, token, nullptr);
}

template <class T>
Var<T> mlstm_recurrence(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& igate, const Var<T>& fgate,
                        std::size_t heads) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() || heads == 0 || q.dim(1) % heads != 0) {
        throw ShapeError("mlstm_recurrence: q/k/v must share a [N x D] shape with D divisible by heads; got q " +
                         shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    const std::size_t N = q.dim(0);
    const std::size_t D = q.dim(1);
    const std::size_t d = D / heads;
    if (igate.shape() != Shape{N, heads} || fgate.shape() != Shape{N, heads}) {
        throw ShapeError("mlstm_recurrence: gates must be [" + std::to_string(N) + " x " + std::to_string(heads) + "]");
    }
    const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                                           igate.requires_grad() || fgate.requires_grad());
    MlstmState<T> st(heads, d, d);
    Tensor<T> h(Shape{N, D});
    std::vector<T> states;  // C_t per token, then eta_t per token
    std::vector<StepRecord<T>> recs;
    if (record) {
        states.resize(N * heads * (d * d + d));
        recs.resize(N * heads);
    }
    const T* pq = q.value().data().data();
    const T* pk = k.value().data().data();
    const T* pv = v.value().data().data();
    const T* pi = igate.value().data().data();
    const T* pf = fgate.value().data().data();
    const std::size_t c_block = heads * d * d;
    const std::size_t e_block = heads * d;
    for (std::size_t t = 0; t < N; ++t) {
        step_impl<T>(st, pq + t * D, pk + t * D, pv + t * D, pi + t * heads, pf + t * heads, h.data().data() + t * D, t,
                     record ? recs.data() + t * heads : nullptr);
        if (record) {
            std::copy(st.C.data().begin(), st.C.data().end(), states.begin() + static_cast<long>(t * c_block));
            std::copy(st.eta.data().begin(), st.eta.data().end(),
                      states.begin() + static_cast<long>(N * c_block + t * e_block));
        }
    }
    if (!record) return Var<T>(std::move(h));

    Tensor<T> h_saved = h;
    return Var<T>::from_op(
        std::move(h), {q, k, v, igate, fgate}, "mlstm_recurrence",
        [N, D, d, heads, states = std::move(states), recs = std::move(recs), h_saved = std::move(h_saved), c_block,
         e_block](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
            const T* pq = in[0]->value.data().data();
            const T* pk = in[1]->value.data().data();
            const T* pv = in[2]->value.data().data();
            Tensor<T> gq(Shape{N, D}, T{0}), gk(Shape{N, D}, T{0}), gv(Shape{N, D}, T{0});
            Tensor<T> gi(Shape{N, heads}, T{0}), gf(Shape{N, heads}, T{0});
            std::vector<T> dC(d * d), deta(d), dnum(d);
            for (std::size_t hd = 0; hd < heads; ++hd) {
                std::fill(dC.begin(), dC.end(), T{0});
                std::fill(deta.begin(), deta.end(), T{0});
                for (std::size_t t = N; t-- > 0;) {
                    const StepRecord<T>& r = recs[t * heads + hd];
                    const T* Ct = states.data() + t * c_block + hd * d * d;
                    const T* et = states.data() + N * c_block + t * e_block + hd * d;
                    const T* Cp = t > 0 ? states.data() + (t - 1) * c_block + hd * d * d : nullptr;
                    const T* ep = t > 0 ? states.data() + N * c_block + (t - 1) * e_block + hd * d : nullptr;
                    const std::size_t off = t * D + hd * d;
                    const T* qt = pq + off;
                    const T* kt = pk + off;
                    const T* vt = pv + off;
                    const T* gh = g.data().data() + off;
                    const T* ht = h_saved.data().data() + off;

                    // h = num / den with num = C q
                    T dden = 0;
                    for (std::size_t i = 0; i < d; ++i) {
                        dnum[i] = gh[i] / r.den;
                        dden -= gh[i] * ht[i] / r.den;
                    }
                    const T ds = r.den_is_s ? (r.s >= 0 ? dden : -dden) : T{0};
                    T* dq = gq.data().data() + off;
                    for (std::size_t j = 0; j < d; ++j) dq[j] += ds * et[j];
                    for (std::size_t i = 0; i < d; ++i) {
                        const T* Crow = Ct + i * d;
                        T* dCrow = dC.data() + i * d;
                        for (std::size_t j = 0; j < d; ++j) {
                            dq[j] += Crow[j] * dnum[i];
                            dCrow[j] += dnum[i] * qt[j];
                        }
                    }
                    for (std::size_t j = 0; j < d; ++j) deta[j] += ds * qt[j];

                    // C_t = a C_{t-1} + b v k^T ; eta_t = a eta_{t-1} + b k
                    T da = 0;
                    T db = 0;
                    T* dk = gk.data().data() + off;
                    T* dv = gv.data().data() + off;
                    for (std::size_t i = 0; i < d; ++i) {
                        const T* dCrow = dC.data() + i * d;
                        T dCk = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                            dCk += dCrow[j] * kt[j];
                            dk[j] += r.b * dCrow[j] * vt[i];
                            if (Cp) da += dCrow[j] * Cp[i * d + j];
                        }
                        dv[i] += r.b * dCk;
                        db += vt[i] * dCk;
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        dk[j] += r.b * deta[j];
                        db += deta[j] * kt[j];
                        if (ep) da += deta[j] * ep[j];
                    }
                    gf[t * heads + hd] = da * r.a;
                    gi[t * heads + hd] = db * r.b;
                    for (T& x : dC) x *= r.a;
                    for (T& x : deta) x *= r.a;
                }
            }
            if (in[0]->requires_grad) in[0]->accumulate(std::move(gq));
            if (in[1]->requires_grad) in[1]->accumulate(std::move(gk));
            if (in[2]->requires_grad) in[2]->accumulate(std::move(gv));
            if (in[3]->requires_grad) in[3]->accumulate(std::move(gi));
            if (in[4]->requires_grad) in[4]->accumulate(std::move(gf));
        });
}

// ---------------------------------------------------------------------------
// ViL blocks

void VilOptions::validate() const {
    if (embed_dim == 0 || heads == 0 || conv_width == 0) throw ConfigError("vil: embed_dim, heads, conv_width must be positive");
    if (inner_dim() % heads != 0) {
        throw ConfigError("vil: inner width " + std::to_string(inner_dim()) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
}

template <class T>
VilBlockParams<T> make_vil_block(ParameterStore<T>& store, const std::string& prefix, const VilOptions& opts,
                                 CounterRng& rng) {
    opts.validate();
    const std::size_t Z = opts.embed_dim;
    const std::size_t D = opts.inner_dim();
    const std::size_t H = opts.heads;
    constexpr double kStd = 0.02;
    auto w = [&](const Shape& s) { return init::truncated_normal<T>(s, kStd, rng); };
    auto name = [&](const char* n) { return prefix + "." + n; };
    VilBlockParams<T> p;
    p.norm_gain = store.add(name("norm_gain"), Tensor<T>(Shape{Z}, T{1}));
    p.norm_bias = store.add(name("norm_bias"), Tensor<T>(Shape{Z}, T{0}));
    p.w_up = store.add(name("w_up"), w({Z, 2 * D}));
    p.conv_w = store.add(name("conv_w"), w({D, opts.conv_width}));
    p.conv_b = store.add(name("conv_b"), Tensor<T>(Shape{D}, T{0}));
    p.w_q = store.add(name("w_q"), w({D, D}));
    p.w_k = store.add(name("w_k"), w({D, D}));
    p.w_v = store.add(name("w_v"), w({D, D}));
    p.w_i = store.add(name("w_i"), w({D, H}));
    p.b_i = store.add(name("b_i"), Tensor<T>(Shape{H}, T{0}));
    p.w_f = store.add(name("w_f"), w({D, H}));
    p.b_f = store.add(name("b_f"), init::linspace<T>(H, 3.0, 6.0));
    p.w_o = store.add(name("w_o"), w({D, D}));
    p.b_o = store.add(name("b_o"), Tensor<T>(Shape{D}, T{0}));
    p.w_down = store.add(name("w_down"), w({D, Z}));
    return p;
}

template <class T>
Var<T> causal_conv_silu(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return silu(causal_depthwise_conv(x, w, b));
}

template <class T>
Var<T> mlstm_scan(const Var<T>& X, const VilBlockParams<T>& p, const VilOptions& opts, Direction direction) {
    if (direction == Direction::Reverse) return flip(mlstm_scan(flip(X, 0), p, opts, Direction::Forward), 0);
    if (X.rank() != 2 || X.dim(1) != opts.inner_dim()) {
        throw ShapeError("mlstm_scan: expected [N x " + std::to_string(opts.inner_dim()) + "], got " + shape_str(X.shape()));
    }
    const T key_scale = T{1} / std::sqrt(static_cast<T>(opts.head_dim()));
    Var<T> q = matmul(X, p.w_q);
    Var<T> k = scale(matmul(X, p.w_k), key_scale);
    Var<T> v = matmul(X, p.w_v);
    Var<T> ig = add(matmul(X, p.w_i), p.b_i);
    Var<T> fg = add(matmul(X, p.w_f), p.b_f);
    if (opts.forget_gate == ForgetGate::Sigmoid) fg = log_sigmoid(fg);
    Var<T> o = sigmoid(add(matmul(X, p.w_o), p.b_o));
    return mul(o, mlstm_recurrence(q, k, v, ig, fg, opts.heads));
}

namespace {
template <class T>
Var<T> block_core(const Var<T>& p, const VilBlockParams<T>& prm, const VilOptions& opts) {
    const std::size_t D = opts.inner_dim();
    Var<T> u = matmul(layer_norm(p, prm.norm_gain, prm.norm_bias), prm.w_up);
    Var<T> x_mlstm = slice(u, 1, 0, D);
    Var<T> y = slice(u, 1, D, 2 * D);
    Var<T> h = mlstm_scan(causal_conv_silu(x_mlstm, prm.conv_w, prm.conv_b), prm, opts, Direction::Forward);
    Var<T> gated = mul(h, opts.gate_silu ? silu(y) : y);
    Var<T> out = matmul(gated, prm.w_down);
    return opts.residual ? add(p, out) : out;
}
} // namespace

template <class T>
Var<T> vil_block_forward(const Var<T>& p, const VilBlockParams<T>& params, const VilOptions& opts,
                         std::size_t block_index) {
    if (p.rank() != 2 || p.dim(1) != opts.embed_dim) {
        throw ShapeError("vil_block_forward: expected [N x " + std::to_string(opts.embed_dim) + "], got " +
                         shape_str(p.shape()));
    }
    if (block_index % 2 == 1) return flip(block_core(flip(p, 0), params, opts), 0);
    return block_core(p, params, opts);
}

template <class T>
Var<T> vil_stack_forward(const Var<T>& p, const std::vector<VilBlockParams<T>>& blocks, const VilOptions& opts) {
    if (blocks.empty()) throw ConfigError("vil_stack_forward: at least one block is required");
    Var<T> x = p;
    for (std::size_t i = 0; i < blocks.size(); ++i) x = vil_block_forward(x, blocks[i], opts, i);
    return x;
}

#define UVX_INSTANTIATE_VIL(T)                                                                                   \
    template Var<T> patchify(const Var<T>&, std::size_t);                                                        \
    template Var<T> unpatchify(const Var<T>&, const Shape&, std::size_t);                                        \
    template Var<T> patchify_and_embed(const Var<T>&, const PatchEmbedConfig&, const Var<T>&, const Var<T>&);    \
    template Var<T> patch_embed_conv(const Var<T>&, const PatchEmbedConfig&, const Var<T>&, const Var<T>&);      \
    template struct MlstmState<T>;                                                                               \
    template void mlstm_step(MlstmState<T>&, const T*, const T*, const T*, const T*, const T*, T*, std::size_t); \
    template Var<T> mlstm_recurrence(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,  \
                                     std::size_t);                                                               \
    template VilBlockParams<T> make_vil_block(ParameterStore<T>&, const std::string&, const VilOptions&,         \
                                              CounterRng&);                                                      \
    template Var<T> causal_conv_silu(const Var<T>&, const Var<T>&, const Var<T>&);                               \
    template Var<T> mlstm_scan(const Var<T>&, const VilBlockParams<T>&, const VilOptions&, Direction);           \
    template Var<T> vil_block_forward(const Var<T>&, const VilBlockParams<T>&, const VilOptions&, std::size_t);  \
    template Var<T> vil_stack_forward(const Var<T>&, const std::vector<VilBlockParams<T>>&, const VilOptions&);

UVX_INSTANTIATE_VIL(float)
UVX_INSTANTIATE_VIL(double)

#undef UVX_INSTANTIATE_VIL

} // namespace uvx::vil
