#pragma once

#include "uvx/errors.hpp"
#include "uvx/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace uvx {

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Propagates `grad_out` (the gradient of the node's value) into its inputs.
template <class T>
using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<const NodePtr<T>> inputs)>;

/// One recorded value in the computation graph.
template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<NodePtr<T>> inputs;
    BackwardFn<T> backward;

    bool is_leaf() const { return !backward; }

    /// Adds `g` into this node's gradient; allocates on first use.
    void accumulate(const Tensor<T>& g);
    void accumulate(Tensor<T>&& g);
};

std::uint64_t next_node_seq();

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace kink {

/// Non-smooth ops (relu, abs, max) fold their branch decisions into a running
/// signature while a Monitor is alive. Two evaluations with equal signatures
/// took the same piecewise-smooth branch everywhere.
bool active();
void record(std::uint64_t decision_bits);

class Monitor {
public:
    Monitor();
    ~Monitor();
    Monitor(const Monitor&) = delete;
    Monitor& operator=(const Monitor&) = delete;
    std::uint64_t signature() const;
    void reset();

private:
    bool previous_;
    std::uint64_t previous_sig_;
};

} // namespace kink

namespace fault {

/// Test fixture: while alive, the backward rule of every node whose op name
/// equals `op` receives its incoming gradient multiplied by `factor`.
class ScaleBackward {
public:
    ScaleBackward(std::string op, double factor);
    ~ScaleBackward();
    ScaleBackward(const ScaleBackward&) = delete;
    ScaleBackward& operator=(const ScaleBackward&) = delete;
};

/// Factor applied to `op`'s backward rule (1 when no fault is active).
double backward_scale(const char* op);

} // namespace fault

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;

    /// Leaf holding `value`. Leaves with requires_grad receive gradients.
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
        node_->seq = next_node_seq();
    }

    /// Records the result of an op. When no input requires a gradient (or
    /// recording is disabled) the result is a plain constant leaf.
    static Var from_op(Tensor<T> value, std::vector<Var> inputs, const char* op, BackwardFn<T> fn) {
        Var out(std::move(value));
        out.node_->op = op;
        if (!grad_enabled()) return out;
        bool any = false;
        for (const Var& v : inputs) any = any || v.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        out.node_->inputs.reserve(inputs.size());
        for (Var& v : inputs) out.node_->inputs.push_back(std::move(v.node_));
        out.node_->backward = std::move(fn);
        return out;
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
    std::size_t rank() const { return node_->value.rank(); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_->has_grad; }

    /// Gradient accumulated by backward(); zeros when none was propagated.
    Tensor<T> grad() const {
        return node_->has_grad ? node_->grad : Tensor<T>(node_->value.shape(), T{0});
    }

    void zero_grad() {
        node_->has_grad = false;
        node_->grad = Tensor<T>();
    }

    const NodePtr<T>& node() const { return node_; }

private:
    NodePtr<T> node_;
};

/// Topologically ordered record of every node reachable from a root.
template <class T>
class Tape {
public:
    static Tape record(const Var<T>& root);

    const std::vector<NodePtr<T>>& nodes() const { return nodes_; }

    /// Runs backward rules in reverse recording order. The root's gradient
    /// must already be seeded.
    void replay_backward() const;

private:
    std::vector<NodePtr<T>> nodes_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable leaf that requires them; intermediate gradients are released.
template <class T>
void backward(const Var<T>& loss);

/// A named trainable leaf.
template <class T>
struct Parameter {
    std::string id;
    Var<T> var;

    const Tensor<T>& value() const { return var.value(); }
    Tensor<T>& value() { return var.mutable_value(); }
};

/// Ordered registry of trainable parameters with stable string ids.
template <class T>
class ParameterStore {
public:
    Var<T> add(std::string id, Tensor<T> init);

    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }

    Parameter<T>& at(const std::string& id);
    const Parameter<T>& at(const std::string& id) const;
    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    std::size_t scalar_count() const;
    /// Scalar count of parameters whose id starts with `prefix`.
    std::size_t scalar_count(const std::string& prefix) const;

    void zero_grad();

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace uvx
