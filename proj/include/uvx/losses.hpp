#pragma once

#include "uvx/autodiff.hpp"
#include "uvx/tensor.hpp"

namespace uvx {

/// One-hot encoding of a label map: [spatial] -> [c x spatial].
/// Throws ContractError if a label is >= c.
template <class T>
Tensor<T> one_hot(const LabelMap& labels, std::size_t num_classes);

/// Per-location argmax over the leading class axis: [c x spatial] -> [spatial].
template <class T>
LabelMap argmax_labels(const Tensor<T>& scores);

/// Soft Dice loss 1 - (1/c) sum_g (2 sum(pred*gt) + mu) / (sum(pred) + sum(gt) + mu).
template <class T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& gt, T mu = T(1e-5));

/// -(1/T) sum gt * log(max(pred, 1e-12)), T = spatial size.
template <class T>
Var<T> cce_loss(const Var<T>& pred, const Tensor<T>& gt);

/// dice_loss + cce_loss.
template <class T>
Var<T> composite_loss(const Var<T>& pred, const Tensor<T>& gt, T mu = T(1e-5));

} // namespace uvx
