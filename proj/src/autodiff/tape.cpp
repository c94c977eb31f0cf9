#include "cnerf/autodiff/tape.hpp"

#include <algorithm>

namespace cnerf::ad {

namespace {
thread_local Tape* t_current = nullptr;
}

Parameter::Parameter(std::string name, Tensor init) : name_(std::move(name)), value_(init.detach()) {}

void Parameter::assign(Tensor value) {
    if (value.shape() != value_.shape())
        throw ShapeError("parameter " + name_ + ": assign " + to_string(value.shape()) + " to " +
                         to_string(value_.shape()));
    value_ = value.detach();
}

void Parameter::assign(std::vector<double> values) { assign(Tensor(value_.shape(), std::move(values))); }

Tensor Parameter::var() const {
    if (Tape* t = Tape::current()) return t->param(*this);
    return value_;
}

const std::vector<double>* Gradients::find(const Parameter& p) const {
    auto it = params_.find(&p);
    return it == params_.end() ? nullptr : &it->second;
}

std::vector<double> Gradients::of(const Parameter& p) const {
    if (const auto* g = find(p)) return *g;
    return std::vector<double>(p.size(), 0.0);
}

Tensor Gradients::wrt(const Tensor& watched) const {
    if (watched.tape() != tape_ || watched.node() < 0)
        throw std::invalid_argument("gradients: tensor was not watched on this tape");
    auto it = leaves_.find(watched.node());
    if (it == leaves_.end()) return Tensor::zeros(watched.shape());
    return Tensor(watched.shape(), it->second);
}

void Gradients::accumulate(const Parameter& p, std::span<const double> values, double scale) {
    if (values.size() != p.size())
        throw ShapeError("gradients: accumulate " + std::to_string(values.size()) + " values into " + p.name());
    auto& g = params_[&p];
    if (g.empty()) g.assign(p.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * values[i];
}

void Gradients::scale_all(double factor) {
    for (auto& [p, g] : params_)
        for (auto& v : g) v *= factor;
    for (auto& [n, g] : leaves_)
        for (auto& v : g) v *= factor;
}

void Gradients::merge(const Gradients& other, double scale) {
    for (const auto& [p, g] : other.params_) accumulate(*p, g, scale);
}

std::span<double> BackwardContext::grad(std::size_t input) {
    auto* slot = slots_[input];
    if (slot == nullptr) return {};
    if (slot->empty()) slot->assign(sizes_[input], 0.0);
    return {slot->data(), slot->size()};
}

Tape* Tape::current() noexcept { return t_current; }

Tensor Tape::attach(Tensor t, Node node) {
    node.size = t.size();
    nodes_.push_back(std::move(node));
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size() - 1);
    return t;
}

Tensor Tape::watch(const Tensor& t) { return attach(t.detach(), Node{"leaf", 0, {}, {}, nullptr}); }

Tensor Tape::param(const Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) {
        Tensor t = p.value();
        t.tape_ = this;
        t.node_ = it->second;
        return t;
    }
    Tensor t = attach(p.value(), Node{"param", 0, {}, {}, &p});
    param_nodes_.emplace(&p, t.node_);
    return t;
}

Tensor Tape::record(std::string_view kind, Tensor result, std::span<const Tensor* const> inputs, BackwardFn fn) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool any = false;
    for (const Tensor* in : inputs) {
        if (in->tracked_on(this)) {
            ids.push_back(in->node_);
            any = true;
        } else {
            ids.push_back(-1);
        }
    }
    if (!any) return result.detach();
    return attach(result.detach(), Node{kind, 0, std::move(ids), std::move(fn), nullptr});
}

Gradients Tape::backward(const Tensor& loss) const {
    if (nodes_.empty()) throw std::invalid_argument("backward: tape is empty");
    if (loss.size() != 1)
        throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    if (!loss.tracked_on(this)) throw std::invalid_argument("backward: loss was not recorded on this tape");

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node()].assign(1, 1.0);

    BackwardContext ctx;
    for (int id = loss.node(); id >= 0; --id) {
        const Node& n = nodes_[id];
        if (grads[id].empty() || !n.fn) continue;
        ctx.grad_out = {grads[id].data(), grads[id].size()};
        ctx.slots_.assign(n.inputs.size(), nullptr);
        ctx.sizes_.assign(n.inputs.size(), 0);
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
            if (n.inputs[j] < 0) continue;
            ctx.slots_[j] = &grads[n.inputs[j]];
            ctx.sizes_[j] = nodes_[n.inputs[j]].size;
        }
        n.fn(ctx);
        // Interior buffers are no longer needed once propagated.
        if (n.param == nullptr && !n.inputs.empty()) std::vector<double>().swap(grads[id]);
    }

    Gradients out;
    out.tape_ = this;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (!n.inputs.empty() || grads[id].empty()) continue;
        if (n.param != nullptr)
            out.params_.emplace(n.param, std::move(grads[id]));
        else
            out.leaves_.emplace(static_cast<int>(id), std::move(grads[id]));
    }
    return out;
}

void Tape::clear() {
    nodes_.clear();
    param_nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(t_current) { t_current = &tape; }
TapeScope::~TapeScope() { t_current = previous_; }

NoGradScope::NoGradScope() : previous_(t_current) { t_current = nullptr; }
NoGradScope::~NoGradScope() { t_current = previous_; }

}  // namespace cnerf::ad
