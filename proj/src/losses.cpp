#include "uvx/losses.hpp"

#include "uvx/errors.hpp"
#include "uvx/ops.hpp"

namespace uvx {

namespace {

void check_same(const Shape& pred, const Shape& gt, const char* what) {
    if (pred != gt) {
        throw ShapeError(std::string(what) + ": prediction " + shape_str(pred) + " vs ground truth " + shape_str(gt));
    }
    if (pred.size() < 2) throw ShapeError(std::string(what) + ": expected [c x spatial], got " + shape_str(pred));
}

} // namespace

template <class T>
Tensor<T> one_hot(const LabelMap& labels, std::size_t num_classes) {
    Shape s{num_classes};
    s.insert(s.end(), labels.shape().begin(), labels.shape().end());
    Tensor<T> out(s, T{0});
    const std::size_t n = labels.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t g = labels[i];
        if (g >= num_classes) {
            throw ContractError("label " + std::to_string(g) + " at offset " + std::to_string(i) + " is not below " +
                                std::to_string(num_classes));
        }
        out[g * n + i] = T{1};
    }
    return out;
}

template <class T>
LabelMap argmax_labels(const Tensor<T>& scores) {
    if (scores.rank() < 2) throw ShapeError("argmax_labels: expected [c x spatial], got " + shape_str(scores.shape()));
    const std::size_t c = scores.dim(0);
    const std::size_t n = scores.size() / c;
    LabelMap out(Shape(scores.shape().begin() + 1, scores.shape().end()), 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t g = 1; g < c; ++g) {
            if (scores[g * n + i] > scores[best * n + i]) best = g;
        }
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

template <class T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& gt, T mu) {
    check_same(pred.shape(), gt.shape(), "dice_loss");
    const std::size_t c = gt.dim(0);
    const std::size_t n = gt.size() / c;
    Var<T> p = reshape(pred, {c, n});
    Var<T> z = constant(gt.reshaped({c, n}));
    Var<T> inter = sum_to(p * z, {c, 1});
    Var<T> denom = add_scalar(sum_to(p, {c, 1}) + sum_to(z, {c, 1}), mu);
    Var<T> d = add_scalar(scale(inter, T{2}), mu) / denom;
    return add_scalar(neg(mean(d)), T{1});
}

template <class T>
Var<T> cce_loss(const Var<T>& pred, const Tensor<T>& gt) {
    check_same(pred.shape(), gt.shape(), "cce_loss");
    const std::size_t n = gt.size() / gt.dim(0);
    Var<T> lp = log(clamp_min(pred, T(1e-12)));
    return scale(sum(lp * constant(gt)), T(-1) / static_cast<T>(n));
}

template <class T>
Var<T> composite_loss(const Var<T>& pred, const Tensor<T>& gt, T mu) {
    return dice_loss(pred, gt, mu) + cce_loss(pred, gt);
}

#define UVX_INSTANTIATE(T)                                                   \
    template Tensor<T> one_hot<T>(const LabelMap&, std::size_t);             \
    template LabelMap argmax_labels<T>(const Tensor<T>&);                    \
    template Var<T> dice_loss<T>(const Var<T>&, const Tensor<T>&, T);        \
    template Var<T> cce_loss<T>(const Var<T>&, const Tensor<T>&);            \
    template Var<T> composite_loss<T>(const Var<T>&, const Tensor<T>&, T);

UVX_INSTANTIATE(float)
UVX_INSTANTIATE(double)

} // namespace uvx
