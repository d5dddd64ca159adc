#include "uvx/optim.hpp"

#include <cmath>

namespace uvx {

template <class T>
AdamW<T>::AdamW(ParameterStore<T>& store, AdamWOptions opts) : store_(&store), opts_(opts) {
    for (const auto& p : store.params()) {
        m_.emplace_back(p.value().shape(), T{0});
        v_.emplace_back(p.value().shape(), T{0});
    }
}

template <class T>
void AdamW<T>::step() {
    auto& params = store_->params();
    if (params.size() != m_.size()) throw ContractError("AdamW: parameter store changed after construction");
    for (const auto& p : params) {
        if (!p.var.has_grad()) continue;
        for (T g : p.var.node()->grad.data()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw NumericError("AdamW: non-finite gradient in parameter '" + p.id + "'");
            }
        }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    const T lr = static_cast<T>(opts_.lr);
    const T decay = static_cast<T>(1.0 - opts_.lr * opts_.weight_decay);
    const T b1 = static_cast<T>(opts_.beta1);
    const T b2 = static_cast<T>(opts_.beta2);
    const T eps = static_cast<T>(opts_.eps);
    const T inv_bc1 = static_cast<T>(1.0 / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto value = params[i].value().data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        const bool has = params[i].var.has_grad();
        for (std::size_t j = 0; j < value.size(); ++j) {
            const T g = has ? params[i].var.node()->grad[j] : T{0};
            m[j] = b1 * m[j] + (T{1} - b1) * g;
            v[j] = b2 * v[j] + (T{1} - b2) * g * g;
            const T mhat = m[j] * inv_bc1;
            const T vhat = v[j] * inv_bc2;
            value[j] = value[j] * decay - lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

} // namespace uvx
