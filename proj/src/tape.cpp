#include "fednorm/tape.hpp"

#include "fednorm/errors.hpp"

namespace fednorm {

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw NumericError("non-finite constant recorded on tape");
    return push(Node{std::move(value), {}, false, {}});
}

Var Tape::parameter(Tensor value) {
    if (!value.all_finite()) throw NumericError("non-finite parameter recorded on tape");
    return push(Node{std::move(value), {}, true, {}});
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    if (consumed_) throw Error("cannot record on a tape after backward()");
    if (!value.all_finite()) throw NumericError("non-finite value produced by forward op");
    bool needs = false;
    for (const auto& in : inputs) {
        if (in.tape_ != this) throw Error("op input belongs to a different tape");
        needs = needs || nodes_[in.id_].requires_grad;
    }
    return push(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
}

Tensor Tape::grad(const Var& v) const {
    const auto& n = nodes_[v.id_];
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
}

Tensor* Tape::grad_buffer(const Var& v) {
    auto& n = nodes_[v.id_];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return &n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
    Tensor* buf = grad_buffer(v);
    if (!buf) return;
    if (buf->size() != g.size()) throw ShapeError("gradient shape mismatch during backward");
    auto dst = buf->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(const Var& loss) {
    if (consumed_) throw Error("tape already consumed by a previous backward()");
    if (loss.tape_ != this) throw Error("loss belongs to a different tape");
    if (value(loss).size() != 1) throw ShapeError("backward() needs a scalar loss");
    consumed_ = true;
    visits_ = 0;
    auto& root = nodes_[loss.id_];
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        const Tensor& g = n.grad;
        n.backward(*this, g);
        ++visits_;
    }
}

}  // namespace fednorm
