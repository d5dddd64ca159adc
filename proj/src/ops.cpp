#include "uvx/ops.hpp"

#include "uvx/flops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace uvx {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ea = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
        const std::size_t eb = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `in` expressed over the axes of `out`, zero on broadcast axes.
std::vector<std::size_t> expand_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    const auto in_strides = row_major_strides(in);
    const std::size_t lead = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        strides[lead + i] = in[i] == 1 ? 0 : in_strides[i];
    }
    return strides;
}

// Visits every element of `out` in row-major order, passing the offsets into
// two broadcast operands.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
    const std::size_t n = shape_numel(out);
    const std::size_t rank = out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0;
    std::size_t ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out[ax]) break;
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

template <class T, class F>
Tensor<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, const Shape& out_shape, F f) {
    Tensor<T> out(out_shape);
    auto o = out.data();
    auto pa = a.data();
    auto pb = b.data();
    if (a.shape() == out_shape && b.shape() == out_shape) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(pa[i], pb[i]);
        return out;
    }
    if (a.shape() == out_shape && b.size() == 1) {
        const T bv = pb[0];
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(pa[i], bv);
        return out;
    }
    for_each_broadcast(out_shape, expand_strides(a.shape(), out_shape), expand_strides(b.shape(), out_shape),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = f(pa[ia], pb[ib]); });
    return out;
}

// Sum-reduces g (shape `from`) onto `to`.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& to) {
    if (g.shape() == to) return g;
    Tensor<T> out(to, T{0});
    auto o = out.data();
    auto pg = g.data();
    if (out.size() == 1) {
        T acc = 0;
        for (T v : pg) acc += v;
        o[0] = acc;
        return out;
    }
    const std::vector<std::size_t> zero(g.rank(), 0);
    for_each_broadcast(g.shape(), expand_strides(to, g.shape()), zero,
                       [&](std::size_t i, std::size_t io, std::size_t) { o[io] += pg[i]; });
    return out;
}

template <class T>
void record_sign_pattern(std::span<const T> values, T threshold) {
    std::uint64_t bits = 0;
    std::size_t k = 0;
    for (T v : values) {
        bits = (bits << 1) | static_cast<std::uint64_t>(v > threshold);
        if (++k == 64) {
            kink::record(bits);
            bits = 0;
            k = 0;
        }
    }
    kink::record(bits ^ (static_cast<std::uint64_t>(k) << 58));
}

template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, const char* name, Fwd fwd, Deriv deriv, std::uint64_t flops_per_elem = 1) {
    Tensor<T> out(x.shape());
    auto px = x.value().data();
    auto po = out.data();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = fwd(px[i]);
    flops::add(flops_per_elem * po.size());
    return Var<T>::from_op(std::move(out), {x}, name,
                           [deriv](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               const Tensor<T>& xv = in[0]->value;
                               Tensor<T> gx(xv.shape());
                               auto pg = g.data();
                               auto pxv = xv.data();
                               auto pgx = gx.data();
                               for (std::size_t i = 0; i < pgx.size(); ++i) pgx[i] = pg[i] * deriv(pxv[i]);
                               in[0]->accumulate(std::move(gx));
                           });
}

template <class T>
T sigmoid_scalar(T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    const Shape out = broadcast_shape(a.shape(), b.shape(), "add");
    Tensor<T> v = broadcast_apply(a.value(), b.value(), out, [](T x, T y) { return x + y; });
    flops::add(v.size());
    return Var<T>::from_op(std::move(v), {a, b}, "add", [](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        if (in[0]->requires_grad) in[0]->accumulate(reduce_to(g, in[0]->value.shape()));
        if (in[1]->requires_grad) in[1]->accumulate(reduce_to(g, in[1]->value.shape()));
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    const Shape out = broadcast_shape(a.shape(), b.shape(), "sub");
    Tensor<T> v = broadcast_apply(a.value(), b.value(), out, [](T x, T y) { return x - y; });
    flops::add(v.size());
    return Var<T>::from_op(std::move(v), {a, b}, "sub", [](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        if (in[0]->requires_grad) in[0]->accumulate(reduce_to(g, in[0]->value.shape()));
        if (in[1]->requires_grad) {
            Tensor<T> gb = reduce_to(g, in[1]->value.shape());
            for (T& e : gb.data()) e = -e;
            in[1]->accumulate(std::move(gb));
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    const Shape out = broadcast_shape(a.shape(), b.shape(), "mul");
    Tensor<T> v = broadcast_apply(a.value(), b.value(), out, [](T x, T y) { return x * y; });
    flops::add(v.size());
    return Var<T>::from_op(std::move(v), {a, b}, "mul", [out](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        const Tensor<T>& av = in[0]->value;
        const Tensor<T>& bv = in[1]->value;
        if (in[0]->requires_grad) {
            in[0]->accumulate(reduce_to(broadcast_apply(g, bv, out, [](T x, T y) { return x * y; }), av.shape()));
        }
        if (in[1]->requires_grad) {
            in[1]->accumulate(reduce_to(broadcast_apply(g, av, out, [](T x, T y) { return x * y; }), bv.shape()));
        }
    });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    for (T d : b.value().data()) {
        if (d == T{0}) throw NumericError("div: division by exact zero");
    }
    const Shape out = broadcast_shape(a.shape(), b.shape(), "div");
    Tensor<T> v = broadcast_apply(a.value(), b.value(), out, [](T x, T y) { return x / y; });
    flops::add(v.size());
    return Var<T>::from_op(std::move(v), {a, b}, "div", [out](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        const Tensor<T>& av = in[0]->value;
        const Tensor<T>& bv = in[1]->value;
        if (in[0]->requires_grad) {
            in[0]->accumulate(reduce_to(broadcast_apply(g, bv, out, [](T x, T y) { return x / y; }), av.shape()));
        }
        if (in[1]->requires_grad) {
            // d(a/b)/db = -a/b^2
            Tensor<T> ab = broadcast_apply(av, bv, out, [](T x, T y) { return -x / (y * y); });
            in[1]->accumulate(reduce_to(broadcast_apply(g, ab, out, [](T x, T y) { return x * y; }), bv.shape()));
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    return unary(x, "scale", [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
    return unary(x, "add_scalar", [s](T v) { return v + s; }, [](T) { return T{1}; });
}

template <class T>
Var<T> neg(const Var<T>& x) {
    return unary(x, "neg", [](T v) { return -v; }, [](T) { return T{-1}; });
}

template <class T>
Var<T> exp(const Var<T>& x) {
    return unary(x, "exp", [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <class T>
Var<T> log(const Var<T>& x) {
    for (T v : x.value().data()) {
        if (!(v > T{0})) throw NumericError("log: non-positive input");
    }
    return unary(x, "log", [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return unary(
        x, "sigmoid", [](T v) { return sigmoid_scalar(v); },
        [](T v) {
            const T s = sigmoid_scalar(v);
            return s * (T{1} - s);
        },
        4);
}

template <class T>
Var<T> log_sigmoid(const Var<T>& x) {
    // log(sigmoid(v)) = min(v, 0) - log1p(exp(-|v|))
    return unary(
        x, "log_sigmoid", [](T v) { return std::min(v, T{0}) - std::log1p(std::exp(-std::abs(v))); },
        [](T v) { return T{1} - sigmoid_scalar(v); }, 5);
}

template <class T>
Var<T> silu(const Var<T>& x) {
    return unary(
        x, "silu", [](T v) { return v * sigmoid_scalar(v); },
        [](T v) {
            const T s = sigmoid_scalar(v);
            return s * (T{1} + v * (T{1} - s));
        },
        5);
}

template <class T>
Var<T> relu(const Var<T>& x) {
    if (kink::active()) record_sign_pattern<T>(x.value().data(), T{0});
    return unary(x, "relu", [](T v) { return v > T{0} ? v : T{0}; }, [](T v) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> clamp_min(const Var<T>& x, T lo) {
    if (kink::active()) record_sign_pattern<T>(x.value().data(), lo);
    return unary(x, "clamp_min", [lo](T v) { return v > lo ? v : lo; }, [lo](T v) { return v > lo ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().data()) acc += v;
    flops::add(x.size());
    return Var<T>::from_op(Tensor<T>::scalar(acc), {x}, "sum", [](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        in[0]->accumulate(Tensor<T>(in[0]->value.shape(), g[0]));
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

template <class T>
Var<T> sum_to(const Var<T>& x, const Shape& shape) {
    if (shape.size() != x.rank()) throw ShapeError("sum_to: rank mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] != 1 && shape[i] != x.dim(i)) {
            throw ShapeError("sum_to: cannot reduce " + shape_str(x.shape()) + " to " + shape_str(shape));
        }
    }
    flops::add(x.size());
    return Var<T>::from_op(reduce_to(x.value(), shape), {x}, "sum_to",
                           [](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               const Tensor<T>& xv = in[0]->value;
                               const Tensor<T> zero(xv.shape(), T{0});
                               in[0]->accumulate(broadcast_apply(zero, g, xv.shape(), [](T, T y) { return y; }));
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    Tensor<T> c(Shape{m, n});
    MapR<T>(c.data().data(), m, n).noalias() =
        CMapR<T>(a.value().data().data(), m, k) * CMapR<T>(b.value().data().data(), k, n);
    flops::add(2 * m * k * n);
    return Var<T>::from_op(std::move(c), {a, b}, "matmul",
                           [m, k, n](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               CMapR<T> G(g.data().data(), m, n);
                               if (in[0]->requires_grad) {
                                   Tensor<T> ga(Shape{m, k});
                                   MapR<T>(ga.data().data(), m, k).noalias() =
                                       G * CMapR<T>(in[1]->value.data().data(), k, n).transpose();
                                   in[0]->accumulate(std::move(ga));
                               }
                               if (in[1]->requires_grad) {
                                   Tensor<T> gb(Shape{k, n});
                                   MapR<T>(gb.data().data(), k, n).noalias() =
                                       CMapR<T>(in[0]->value.data().data(), m, k).transpose() * G;
                                   in[1]->accumulate(std::move(gb));
                               }
                           });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0);
    const std::size_t n = a.dim(1);
    Tensor<T> t(Shape{n, m});
    MapR<T>(t.data().data(), n, m) = CMapR<T>(a.value().data().data(), m, n).transpose();
    return Var<T>::from_op(std::move(t), {a}, "transpose", [m, n](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        Tensor<T> ga(Shape{m, n});
        MapR<T>(ga.data().data(), m, n) = CMapR<T>(g.data().data(), n, m).transpose();
        in[0]->accumulate(std::move(ga));
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> v = x.value().reshaped(std::move(shape));
    return Var<T>::from_op(std::move(v), {x}, "reshape", [](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        in[0]->accumulate(g.reshaped(in[0]->value.shape()));
    });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
    const std::size_t inner = shape_numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
    Tensor<T> out(out_shape);
    auto po = out.data();
    const std::size_t out_row = out_shape[axis] * inner;
    std::vector<std::size_t> widths;
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[axis] * inner;
        auto pp = p.value().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pp.begin() + static_cast<long>(o * w), w, po.begin() + static_cast<long>(o * out_row + col));
        }
        widths.push_back(w);
        col += w;
    }
    return Var<T>::from_op(std::move(out), parts, "concat",
                           [outer, out_row, widths](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               auto pg = g.data();
                               std::size_t c = 0;
                               for (std::size_t i = 0; i < in.size(); ++i) {
                                   const std::size_t w = widths[i];
                                   if (in[i]->requires_grad) {
                                       Tensor<T> gi(in[i]->value.shape());
                                       auto pgi = gi.data();
                                       for (std::size_t o = 0; o < outer; ++o) {
                                           std::copy_n(pg.begin() + static_cast<long>(o * out_row + c), w,
                                                       pgi.begin() + static_cast<long>(o * w));
                                       }
                                       in[i]->accumulate(std::move(gi));
                                   }
                                   c += w;
                               }
                           });
}

template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.size() || begin >= end || end > s[axis]) {
        throw ShapeError("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(s));
    }
    const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    const std::size_t in_row = s[axis] * inner;
    const std::size_t w = (end - begin) * inner;
    const std::size_t off = begin * inner;
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    Tensor<T> out(out_shape);
    auto px = x.value().data();
    auto po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(px.begin() + static_cast<long>(o * in_row + off), w, po.begin() + static_cast<long>(o * w));
    }
    return Var<T>::from_op(std::move(out), {x}, "slice",
                           [outer, in_row, w, off](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               Tensor<T> gx(in[0]->value.shape(), T{0});
                               auto pg = g.data();
                               auto pgx = gx.data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                   std::copy_n(pg.begin() + static_cast<long>(o * w), w,
                                               pgx.begin() + static_cast<long>(o * in_row + off));
                               }
                               in[0]->accumulate(std::move(gx));
                           });
}

namespace {
template <class T>
Tensor<T> flip_tensor(const Tensor<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t n = s[axis];
    const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    Tensor<T> out(s);
    auto px = x.data();
    auto po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(px.begin() + static_cast<long>((o * n + i) * inner), inner,
                        po.begin() + static_cast<long>((o * n + (n - 1 - i)) * inner));
        }
    }
    return out;
}
} // namespace

template <class T>
Var<T> flip(const Var<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("flip: axis out of range for " + shape_str(x.shape()));
    return Var<T>::from_op(flip_tensor(x.value(), axis), {x}, "flip",
                           [axis](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               in[0]->accumulate(flip_tensor(g, axis));
                           });
}

template <class T>
Var<T> gather(const Var<T>& x, const std::vector<std::size_t>& index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) {
        throw ShapeError("gather: index length " + std::to_string(index.size()) + " does not match " + shape_str(out_shape));
    }
    Tensor<T> out(std::move(out_shape));
    auto px = x.value().data();
    auto po = out.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= px.size()) throw ShapeError("gather: index out of range");
        po[i] = px[index[i]];
    }
    return Var<T>::from_op(std::move(out), {x}, "gather", [index](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        Tensor<T> gx(in[0]->value.shape(), T{0});
        auto pg = g.data();
        auto pgx = gx.data();
        for (std::size_t i = 0; i < index.size(); ++i) pgx[index[i]] += pg[i];
        in[0]->accumulate(std::move(gx));
    });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
    std::size_t cin = 0, cout = 0;
    std::array<std::size_t, 3> in{1, 1, 1}, k{1, 1, 1}, out{1, 1, 1}, stride{1, 1, 1}, pad{0, 0, 0};

    std::size_t in_sp() const { return in[0] * in[1] * in[2]; }
    std::size_t out_sp() const { return out[0] * out[1] * out[2]; }
    std::size_t ksz() const { return k[0] * k[1] * k[2]; }
    bool pointwise() const {
        return ksz() == 1 && stride == std::array<std::size_t, 3>{1, 1, 1} && pad == std::array<std::size_t, 3>{0, 0, 0};
    }
};

ConvGeom conv_geometry(const Shape& x, const Shape& w, const ConvSpec& spec) {
    const std::size_t sr = x.size() - 1;
    if ((sr != 2 && sr != 3) || w.size() != sr + 2) {
        throw ShapeError("conv_nd: input " + shape_str(x) + " and kernel " + shape_str(w) +
                         " need matching spatial rank 2 or 3");
    }
    if (w[1] != x[0]) {
        throw ShapeError("conv_nd: kernel " + shape_str(w) + " expects " + std::to_string(w[1]) +
                         " input channels, input " + shape_str(x) + " has " + std::to_string(x[0]));
    }
    if ((!spec.stride.empty() && spec.stride.size() != sr) || (!spec.pad.empty() && spec.pad.size() != sr)) {
        throw ShapeError("conv_nd: stride/pad rank does not match spatial rank");
    }
    ConvGeom g;
    g.cin = x[0];
    g.cout = w[0];
    const std::size_t lead = 3 - sr;
    for (std::size_t i = 0; i < sr; ++i) {
        g.in[lead + i] = x[1 + i];
        g.k[lead + i] = w[2 + i];
        g.stride[lead + i] = spec.stride.empty() ? 1 : spec.stride[i];
        g.pad[lead + i] = spec.pad.empty() ? 0 : spec.pad[i];
        if (g.stride[lead + i] == 0) throw ShapeError("conv_nd: zero stride");
        const long span = static_cast<long>(g.in[lead + i] + 2 * g.pad[lead + i]) - static_cast<long>(g.k[lead + i]);
        if (span < 0) {
            throw ShapeError("conv_nd: non-positive output extent on axis " + std::to_string(i) + " for input " +
                             shape_str(x) + " and kernel " + shape_str(w));
        }
        g.out[lead + i] = static_cast<std::size_t>(span) / g.stride[lead + i] + 1;
    }
    return g;
}

// cols[(c, kd, kh, kw), (od, oh, ow)]
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const std::size_t osp = g.out_sp();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* xc = x + c * g.in_sp();
        for (std::size_t kd = 0; kd < g.k[0]; ++kd)
            for (std::size_t kh = 0; kh < g.k[1]; ++kh)
                for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
                    T* dst = cols + row * osp;
                    for (std::size_t od = 0; od < g.out[0]; ++od) {
                        const long id = static_cast<long>(od * g.stride[0] + kd) - static_cast<long>(g.pad[0]);
                        for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride[1] + kh) - static_cast<long>(g.pad[1]);
                            T* d = dst + (od * g.out[1] + oh) * g.out[2];
                            if (id < 0 || id >= static_cast<long>(g.in[0]) || ih < 0 ||
                                ih >= static_cast<long>(g.in[1])) {
                                std::fill_n(d, g.out[2], T{0});
                                continue;
                            }
                            const T* srow = xc + (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2];
                            for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride[2] + kw) - static_cast<long>(g.pad[2]);
                                d[ow] = (iw < 0 || iw >= static_cast<long>(g.in[2])) ? T{0} : srow[iw];
                            }
                        }
                    }
                }
    }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
    const std::size_t osp = g.out_sp();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        T* xc = x + c * g.in_sp();
        for (std::size_t kd = 0; kd < g.k[0]; ++kd)
            for (std::size_t kh = 0; kh < g.k[1]; ++kh)
                for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
                    const T* src = cols + row * osp;
                    for (std::size_t od = 0; od < g.out[0]; ++od) {
                        const long id = static_cast<long>(od * g.stride[0] + kd) - static_cast<long>(g.pad[0]);
                        if (id < 0 || id >= static_cast<long>(g.in[0])) continue;
                        for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride[1] + kh) - static_cast<long>(g.pad[1]);
                            if (ih < 0 || ih >= static_cast<long>(g.in[1])) continue;
                            const T* s = src + (od * g.out[1] + oh) * g.out[2];
                            T* drow = xc + (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2];
                            for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride[2] + kw) - static_cast<long>(g.pad[2]);
                                if (iw >= 0 && iw < static_cast<long>(g.in[2])) drow[iw] += s[ow];
                            }
                        }
                    }
                }
    }
}

} // namespace

template <class T>
Var<T> conv_nd(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvSpec& spec) {
    const ConvGeom g = conv_geometry(x.shape(), w.shape(), spec);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
        throw ShapeError("conv_nd: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(g.cout) +
                         " output channels");
    }
    const std::size_t kdim = g.cin * g.ksz();
    const std::size_t osp = g.out_sp();
    Shape out_shape{g.cout};
    for (std::size_t i = 1; i < x.rank(); ++i) out_shape.push_back(g.out[3 - (x.rank() - 1) + (i - 1)]);
    Tensor<T> out(out_shape);
    MapR<T> O(out.data().data(), g.cout, osp);
    CMapR<T> W(w.value().data().data(), g.cout, kdim);
    if (g.pointwise()) {
        O.noalias() = W * CMapR<T>(x.value().data().data(), kdim, osp);
    } else {
        std::vector<T, AlignedAllocator<T>> cols(kdim * osp);
        im2col(x.value().data().data(), g, cols.data());
        O.noalias() = W * CMapR<T>(cols.data(), kdim, osp);
    }
    if (has_bias) {
        auto pb = bias.value().data();
        for (std::size_t c = 0; c < g.cout; ++c) O.row(static_cast<long>(c)).array() += pb[c];
    }
    flops::add(2 * g.cout * kdim * osp + (has_bias ? g.cout * osp : 0));
    std::vector<Var<T>> inputs{x, w};
    if (has_bias) inputs.push_back(bias);
    return Var<T>::from_op(
        std::move(out), std::move(inputs), "conv_nd",
        [g, kdim, osp, has_bias](const Tensor<T>& grad, std::span<const NodePtr<T>> in) {
            CMapR<T> G(grad.data().data(), g.cout, osp);
            const Tensor<T>& xv = in[0]->value;
            const Tensor<T>& wv = in[1]->value;
            std::vector<T, AlignedAllocator<T>> cols;
            const T* cols_ptr = xv.data().data();
            if (!g.pointwise()) {
                cols.resize(kdim * osp);
                im2col(xv.data().data(), g, cols.data());
                cols_ptr = cols.data();
            }
            if (in[1]->requires_grad) {
                Tensor<T> gw(wv.shape());
                MapR<T>(gw.data().data(), g.cout, kdim).noalias() = G * CMapR<T>(cols_ptr, kdim, osp).transpose();
                in[1]->accumulate(std::move(gw));
            }
            if (has_bias && in[2]->requires_grad) {
                Tensor<T> gb(Shape{g.cout});
                for (std::size_t c = 0; c < g.cout; ++c) gb[c] = G.row(static_cast<long>(c)).sum();
                in[2]->accumulate(std::move(gb));
            }
            if (in[0]->requires_grad) {
                Tensor<T> gx(xv.shape(), T{0});
                if (g.pointwise()) {
                    MapR<T>(gx.data().data(), kdim, osp).noalias() = CMapR<T>(wv.data().data(), g.cout, kdim).transpose() * G;
                } else {
                    MatR<T> dcols = CMapR<T>(wv.data().data(), g.cout, kdim).transpose() * G;
                    col2im(dcols.data(), g, gx.data().data());
                }
                in[0]->accumulate(std::move(gx));
            }
        });
}

template <class T>
Var<T> max_pool2(const Var<T>& x) {
    const Shape& s = x.shape();
    const std::size_t sr = s.size() - 1;
    if (sr != 2 && sr != 3) throw ShapeError("max_pool2: expected spatial rank 2 or 3, got " + shape_str(s));
    std::array<std::size_t, 3> in{1, 1, 1}, out{1, 1, 1}, win{1, 1, 1};
    Shape out_shape{s[0]};
    for (std::size_t i = 0; i < sr; ++i) {
        in[3 - sr + i] = s[1 + i];
        win[3 - sr + i] = 2;
        if (s[1 + i] < 2) throw ShapeError("max_pool2: extent below 2 in " + shape_str(s));
        out[3 - sr + i] = s[1 + i] / 2;
        out_shape.push_back(s[1 + i] / 2);
    }
    Tensor<T> o(out_shape);
    std::vector<std::size_t> argmax(o.size());
    auto px = x.value().data();
    const std::size_t in_sp = in[0] * in[1] * in[2];
    std::size_t oi = 0;
    for (std::size_t c = 0; c < s[0]; ++c)
        for (std::size_t d = 0; d < out[0]; ++d)
            for (std::size_t h = 0; h < out[1]; ++h)
                for (std::size_t w = 0; w < out[2]; ++w, ++oi) {
                    std::size_t best = 0;
                    T bv = -std::numeric_limits<T>::infinity();
                    for (std::size_t a = 0; a < win[0]; ++a)
                        for (std::size_t b = 0; b < win[1]; ++b)
                            for (std::size_t e = 0; e < win[2]; ++e) {
                                const std::size_t idx =
                                    c * in_sp + ((d * win[0] + a) * in[1] + (h * win[1] + b)) * in[2] + (w * win[2] + e);
                                if (px[idx] > bv) {
                                    bv = px[idx];
                                    best = idx;
                                }
                            }
                    o[oi] = bv;
                    argmax[oi] = best;
                }
    if (kink::active()) {
        for (std::size_t i = 0; i < argmax.size(); ++i) kink::record(argmax[i]);
    }
    flops::add(x.size());
    return Var<T>::from_op(std::move(o), {x}, "max_pool2", [argmax](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        Tensor<T> gx(in[0]->value.shape(), T{0});
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
        in[0]->accumulate(std::move(gx));
    });
}

// ---------------------------------------------------------------------------
// Upsampling

namespace {

// Doubles `axis` with align-corners=false linear interpolation.
template <class T>
Tensor<T> upsample_axis(const Tensor<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t n = s[axis];
    const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    Shape os = s;
    os[axis] = 2 * n;
    Tensor<T> out(os);
    auto px = x.data();
    auto po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = px.data() + o * n * inner;
        T* dst = po.data() + o * 2 * n * inner;
        for (std::size_t j = 0; j < n; ++j) {
            const T* cur = src + j * inner;
            const T* prev = src + (j == 0 ? 0 : j - 1) * inner;
            const T* next = src + (j + 1 == n ? j : j + 1) * inner;
            T* even = dst + (2 * j) * inner;
            T* odd = dst + (2 * j + 1) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                even[i] = T(0.25) * prev[i] + T(0.75) * cur[i];
                odd[i] = T(0.75) * cur[i] + T(0.25) * next[i];
            }
        }
    }
    return out;
}

// Adjoint of upsample_axis: g has `axis` doubled relative to the result.
template <class T>
Tensor<T> upsample_axis_adjoint(const Tensor<T>& g, std::size_t axis) {
    const Shape& gs = g.shape();
    Shape s = gs;
    s[axis] = gs[axis] / 2;
    const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t n = s[axis];
    const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    Tensor<T> out(s, T{0});
    auto pg = g.data();
    auto po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = pg.data() + o * 2 * n * inner;
        T* dst = po.data() + o * n * inner;
        for (std::size_t j = 0; j < n; ++j) {
            T* cur = dst + j * inner;
            T* prev = dst + (j == 0 ? 0 : j - 1) * inner;
            T* next = dst + (j + 1 == n ? j : j + 1) * inner;
            const T* even = src + (2 * j) * inner;
            const T* odd = src + (2 * j + 1) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                prev[i] += T(0.25) * even[i];
                cur[i] += T(0.75) * even[i] + T(0.75) * odd[i];
                next[i] += T(0.25) * odd[i];
            }
        }
    }
    return out;
}

} // namespace

template <class T>
Var<T> upsample_linear(const Var<T>& x, std::size_t factor) {
    if (factor != 2) throw ContractError("upsample_linear: only factor 2 is supported, got " + std::to_string(factor));
    const std::size_t sr = x.rank() - 1;
    if (sr != 2 && sr != 3) throw ShapeError("upsample_linear: expected spatial rank 2 or 3, got " + shape_str(x.shape()));
    Tensor<T> v = x.value();
    for (std::size_t ax = 1; ax <= sr; ++ax) {
        v = upsample_axis(v, ax);
        flops::add(3 * v.size());
    }
    return Var<T>::from_op(std::move(v), {x}, "upsample_linear", [sr](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
        Tensor<T> gx = g;
        for (std::size_t ax = sr; ax >= 1; --ax) gx = upsample_axis_adjoint(gx, ax);
        in[0]->accumulate(std::move(gx));
    });
}

// ---------------------------------------------------------------------------
// Normalization

template <class T>
Var<T> softmax_channel(const Var<T>& x) {
    if (x.rank() < 1) throw ShapeError("softmax_channel: rank-0 input");
    const std::size_t c = x.dim(0);
    const std::size_t sp = x.size() / c;
    Tensor<T> y(x.shape());
    auto px = x.value().data();
    auto py = y.data();
    for (std::size_t s = 0; s < sp; ++s) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, px[k * sp + s]);
        T z = 0;
        for (std::size_t k = 0; k < c; ++k) {
            const T e = std::exp(px[k * sp + s] - mx);
            py[k * sp + s] = e;
            z += e;
        }
        for (std::size_t k = 0; k < c; ++k) py[k * sp + s] /= z;
    }
    flops::add(5 * x.size());
    Tensor<T> saved = y;
    return Var<T>::from_op(std::move(y), {x}, "softmax_channel",
                           [saved = std::move(saved), c, sp](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               Tensor<T> gx(saved.shape());
                               for (std::size_t s = 0; s < sp; ++s) {
                                   T dot = 0;
                                   for (std::size_t k = 0; k < c; ++k) dot += g[k * sp + s] * saved[k * sp + s];
                                   for (std::size_t k = 0; k < c; ++k) {
                                       gx[k * sp + s] = saved[k * sp + s] * (g[k * sp + s] - dot);
                                   }
                               }
                               in[0]->accumulate(std::move(gx));
                           });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    if (x.rank() != 2) throw ShapeError("layer_norm: expected [N x Z], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0);
    const std::size_t z = x.dim(1);
    if (gain.shape() != Shape{z} || bias.shape() != Shape{z}) {
        throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(z) + "]");
    }
    Tensor<T> y(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(n);
    auto px = x.value().data();
    auto pg = gain.value().data();
    auto pb = bias.value().data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = px.data() + r * z;
        T mu = 0;
        for (std::size_t j = 0; j < z; ++j) mu += row[j];
        mu /= static_cast<T>(z);
        T var = 0;
        for (std::size_t j = 0; j < z; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(z);
        rstd[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < z; ++j) {
            const T h = (row[j] - mu) * rstd[r];
            xhat[r * z + j] = h;
            y[r * z + j] = h * pg[j] + pb[j];
        }
    }
    flops::add(8 * x.size());
    return Var<T>::from_op(
        std::move(y), {x, gain, bias}, "layer_norm",
        [xhat = std::move(xhat), rstd = std::move(rstd), n, z](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
            const Tensor<T>& gainv = in[1]->value;
            if (in[0]->requires_grad) {
                Tensor<T> gx(xhat.shape());
                for (std::size_t r = 0; r < n; ++r) {
                    T m1 = 0;
                    T m2 = 0;
                    for (std::size_t j = 0; j < z; ++j) {
                        const T dh = g[r * z + j] * gainv[j];
                        m1 += dh;
                        m2 += dh * xhat[r * z + j];
                    }
                    m1 /= static_cast<T>(z);
                    m2 /= static_cast<T>(z);
                    for (std::size_t j = 0; j < z; ++j) {
                        const T dh = g[r * z + j] * gainv[j];
                        gx[r * z + j] = rstd[r] * (dh - m1 - xhat[r * z + j] * m2);
                    }
                }
                in[0]->accumulate(std::move(gx));
            }
            if (in[1]->requires_grad || in[2]->requires_grad) {
                Tensor<T> gg(Shape{z}, T{0});
                Tensor<T> gb(Shape{z}, T{0});
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t j = 0; j < z; ++j) {
                        gg[j] += g[r * z + j] * xhat[r * z + j];
                        gb[j] += g[r * z + j];
                    }
                }
                if (in[1]->requires_grad) in[1]->accumulate(std::move(gg));
                if (in[2]->requires_grad) in[2]->accumulate(std::move(gb));
            }
        });
}

template <class T>
Var<T> causal_depthwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    if (x.rank() != 2 || w.rank() != 2 || w.dim(0) != x.dim(1) || bias.shape() != Shape{x.dim(1)}) {
        throw ShapeError("causal_depthwise_conv: incompatible shapes x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", bias " + shape_str(bias.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t d = x.dim(1);
    const std::size_t k = w.dim(1);
    Tensor<T> y(x.shape());
    auto px = x.value().data();
    auto pw = w.value().data();
    auto pb = bias.value().data();
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t c = 0; c < d; ++c) {
            T acc = pb[c];
            for (std::size_t j = 0; j < k; ++j) {
                const long s = static_cast<long>(t + j) - static_cast<long>(k - 1);
                if (s >= 0) acc += pw[c * k + j] * px[static_cast<std::size_t>(s) * d + c];
            }
            y[t * d + c] = acc;
        }
    }
    flops::add(2 * n * d * k);
    return Var<T>::from_op(std::move(y), {x, w, bias}, "causal_depthwise_conv",
                           [n, d, k](const Tensor<T>& g, std::span<const NodePtr<T>> in) {
                               const Tensor<T>& xv = in[0]->value;
                               const Tensor<T>& wv = in[1]->value;
                               Tensor<T> gx(xv.shape(), T{0});
                               Tensor<T> gw(wv.shape(), T{0});
                               Tensor<T> gb(Shape{d}, T{0});
                               for (std::size_t t = 0; t < n; ++t) {
                                   for (std::size_t c = 0; c < d; ++c) {
                                       const T gv = g[t * d + c];
                                       gb[c] += gv;
                                       for (std::size_t j = 0; j < k; ++j) {
                                           const long s = static_cast<long>(t + j) - static_cast<long>(k - 1);
                                           if (s < 0) continue;
                                           const std::size_t si = static_cast<std::size_t>(s) * d + c;
                                           gx[si] += wv[c * k + j] * gv;
                                           gw[c * k + j] += xv[si] * gv;
                                       }
                                   }
                               }
                               if (in[0]->requires_grad) in[0]->accumulate(std::move(gx));
                               if (in[1]->requires_grad) in[1]->accumulate(std::move(gw));
                               if (in[2]->requires_grad) in[2]->accumulate(std::move(gb));
                           });
}

#define UVX_INSTANTIATE_OPS(T)                                                                              \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                      \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                      \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                      \
    template Var<T> div(const Var<T>&, const Var<T>&);                                                      \
    template Var<T> scale(const Var<T>&, T);                                                                \
    template Var<T> add_scalar(const Var<T>&, T);                                                           \
    template Var<T> neg(const Var<T>&);                                                                     \
    template Var<T> exp(const Var<T>&);                                                                     \
    template Var<T> log(const Var<T>&);                                                                     \
    template Var<T> sigmoid(const Var<T>&);                                                                 \
    template Var<T> log_sigmoid(const Var<T>&);                                                             \
    template Var<T> silu(const Var<T>&);                                                                    \
    template Var<T> relu(const Var<T>&);                                                                    \
    template Var<T> clamp_min(const Var<T>&, T);                                                            \
    template Var<T> sum(const Var<T>&);                                                                     \
    template Var<T> mean(const Var<T>&);                                                                    \
    template Var<T> sum_to(const Var<T>&, const Shape&);                                                    \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> transpose(const Var<T>&);                                                               \
    template Var<T> reshape(const Var<T>&, Shape);                                                          \
    template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                        \
    template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                            \
    template Var<T> flip(const Var<T>&, std::size_t);                                                       \
    template Var<T> gather(const Var<T>&, const std::vector<std::size_t>&, Shape);                          \
    template Var<T> conv_nd(const Var<T>&, const Var<T>&, const Var<T>&, const ConvSpec&);                  \
    template Var<T> max_pool2(const Var<T>&);                                                               \
    template Var<T> upsample_linear(const Var<T>&, std::size_t);                                            \
    template Var<T> softmax_channel(const Var<T>&);                                                         \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                             \
    template Var<T> causal_depthwise_conv(const Var<T>&, const Var<T>&, const Var<T>&);

UVX_INSTANTIATE_OPS(float)
UVX_INSTANTIATE_OPS(double)

#undef UVX_INSTANTIATE_OPS

} // namespace uvx
