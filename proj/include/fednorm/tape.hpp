#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "fednorm/tensor.hpp"

namespace fednorm {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// owning tape is alive.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Records primitive ops in execution order and replays the chain rule in
/// reverse. One tape per forward pass; a tape can be differentiated once.
class Tape {
public:
    /// Called with the gradient of the op's output; accumulates into the
    /// op's inputs through accumulate().
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var parameter(Tensor value);

    /// Appends an op result. Non-finite values raise NumericError. The
    /// backward function is dropped when no input requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

    const Tensor& value(const Var& v) const { return nodes_[v.id_].value; }
    bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }

    /// Gradient that reached `v` during backward(); zeros if none did.
    Tensor grad(const Var& v) const;

    /// Adds `g` into the gradient buffer of `v` (no-op for constants).
    void accumulate(const Var& v, const Tensor& g);
    /// Mutable gradient buffer for in-place accumulation by backward fns.
    /// Returns nullptr for values that do not require a gradient.
    Tensor* grad_buffer(const Var& v);

    /// Reverse sweep from a scalar loss. Throws if called twice.
    void backward(const Var& loss);
    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }
    /// Number of op backward functions run by the last backward().
    std::size_t backward_visits() const { return visits_; }

    /// Branch tracing: piecewise ops (activations, pooling, norm floors)
    /// append which branch each element took so that a finite-difference
    /// probe can tell when a perturbation crossed a kink.
    void set_branch_tracing(bool on) { trace_branches_ = on; }
    bool branch_tracing() const { return trace_branches_; }
    void note_branch(std::uint32_t branch) {
        if (trace_branches_) branches_.push_back(branch);
    }
    const std::vector<std::uint32_t>& branch_trace() const { return branches_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Node node);

    std::deque<Node> nodes_;
    bool consumed_ = false;
    std::size_t visits_ = 0;
    bool trace_branches_ = false;
    std::vector<std::uint32_t> branches_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

}  // namespace fednorm
