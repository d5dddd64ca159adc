#include "uvx/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace uvx {

namespace {
std::atomic<std::uint64_t> g_seq{0};
thread_local bool g_grad_enabled = true;
thread_local bool g_kink_active = false;
thread_local std::uint64_t g_kink_sig = 0;
} // namespace

std::uint64_t next_node_seq() { return ++g_seq; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace kink {

bool active() { return g_kink_active; }

void record(std::uint64_t decision_bits) {
    g_kink_sig = (g_kink_sig ^ decision_bits) * 0x100000001B3ull + 0x9E3779B97F4A7C15ull;
}

Monitor::Monitor() : previous_(g_kink_active), previous_sig_(g_kink_sig) {
    g_kink_active = true;
    g_kink_sig = 0;
}

Monitor::~Monitor() {
    g_kink_active = previous_;
    g_kink_sig = previous_sig_;
}

std::uint64_t Monitor::signature() const { return g_kink_sig; }

void Monitor::reset() { g_kink_sig = 0; }

} // namespace kink

template <class T>
void Node<T>::accumulate(const Tensor<T>& g) {
    if (g.shape() != value.shape()) {
        throw ShapeError(std::string("gradient shape ") + shape_str(g.shape()) + " does not match value " +
                         shape_str(value.shape()) + " of op " + op);
    }
    if (!has_grad) {
        grad = g;
        has_grad = true;
        return;
    }
    auto dst = grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
void Node<T>::accumulate(Tensor<T>&& g) {
    if (!has_grad && g.shape() == value.shape()) {
        grad = std::move(g);
        has_grad = true;
        return;
    }
    accumulate(static_cast<const Tensor<T>&>(g));
}

template <class T>
Tape<T> Tape<T>::record(const Var<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node<T>*> seen;
    std::vector<NodePtr<T>> stack{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        NodePtr<T> n = std::move(stack.back());
        stack.pop_back();
        for (const NodePtr<T>& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
        }
        tape.nodes_.push_back(std::move(n));
    }
    // Creation order is a valid topological order: inputs always exist
    // before the op that consumes them.
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const NodePtr<T>& a, const NodePtr<T>& b) { return a->seq < b->seq; });
    return tape;
}

template <class T>
void Tape<T>::replay_backward() const {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node<T>& n = **it;
        if (n.is_leaf() || !n.has_grad) continue;
        if (const double f = fault::backward_scale(n.op); f != 1.0) {
            for (T& g : n.grad.data()) g = static_cast<T>(g * f);
        }
        n.backward(n.grad, n.inputs);
        n.grad = Tensor<T>();
        n.has_grad = false;
    }
}

template <class T>
void backward(const Var<T>& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;
    Tape<T> tape = Tape<T>::record(loss);
    loss.node()->accumulate(Tensor<T>(loss.shape(), T{1}));
    tape.replay_backward();
}

template <class T>
Var<T> ParameterStore<T>::add(std::string id, Tensor<T> init) {
    if (index_.count(id)) throw ContractError("duplicate parameter id '" + id + "'");
    Var<T> v(std::move(init), true);
    index_.emplace(id, params_.size());
    params_.push_back(Parameter<T>{std::move(id), v});
    return v;
}

template <class T>
Parameter<T>& ParameterStore<T>::at(const std::string& id) {
    auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("unknown parameter id '" + id + "'");
    return params_[it->second];
}

template <class T>
const Parameter<T>& ParameterStore<T>::at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("unknown parameter id '" + id + "'");
    return params_[it->second];
}

template <class T>
std::size_t ParameterStore<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().size();
    return n;
}

template <class T>
std::size_t ParameterStore<T>::scalar_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.id.rfind(prefix, 0) == 0) n += p.value().size();
    }
    return n;
}

template <class T>
void ParameterStore<T>::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

namespace fault {

namespace {
thread_local std::string active_op;
thread_local double active_factor = 1.0;
} // namespace

ScaleBackward::ScaleBackward(std::string op, double factor) {
    active_op = std::move(op);
    active_factor = factor;
}

ScaleBackward::~ScaleBackward() {
    active_op.clear();
    active_factor = 1.0;
}

double backward_scale(const char* op) {
    return !active_op.empty() && active_op == op ? active_factor : 1.0;
}

} // namespace fault

template struct Node<float>;
template struct Node<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template class ParameterStore<float>;
template class ParameterStore<double>;

} // namespace uvx
