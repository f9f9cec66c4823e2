#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mambatrans/common.hpp"

namespace mambatrans {

// Storage node behind a Tensor handle. Values are contiguous, row-major with
// the last axis fastest (channel-last for feature maps). The grad buffer is
// allocated lazily and always mirrors the value shape.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(static_cast<size_t>(mambatrans::numel(t.node_->shape)), T(0));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->value) v = fill;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != mambatrans::numel(shape))
            throw DimensionError("from_data: buffer length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }

    // Gradient buffer; zeros until a backward pass touches this tensor.
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        node_->grad.assign(node_->value.size(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// One recorded operation: the nodes it touched plus a closure that pushes the
// output gradient back to the inputs (accumulating with +=).
template <typename T>
struct TapeOp {
    const char* name;
    std::vector<std::shared_ptr<TensorNode<T>>> inputs;
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> backward;
};

template <typename T>
class GradTape {
public:
    void push(TapeOp<T> op) { ops_.push_back(std::move(op)); }
    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }
    const std::vector<TapeOp<T>>& ops() const { return ops_; }
    std::vector<TapeOp<T>>& ops() { return ops_; }

private:
    std::vector<TapeOp<T>> ops_;
};

template <typename T>
inline thread_local GradTape<T>* g_active_tape = nullptr;

template <typename T>
GradTape<T>* active_tape() { return g_active_tape<T>; }

// RAII activation of a tape; ops record themselves while one is active.
// Without an active tape ops still compute forward (inference mode).
template <typename T>
class TapeScope {
public:
    explicit TapeScope(GradTape<T>& tape) : prev_(g_active_tape<T>) { g_active_tape<T> = &tape; }
    ~TapeScope() { g_active_tape<T> = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape<T>* prev_;
};

template <typename T>
void record_op(const char* name, std::vector<Tensor<T>> inputs, const Tensor<T>& output,
               std::function<void()> backward) {
    GradTape<T>* tape = g_active_tape<T>;
    if (!tape || !output.requires_grad()) return;
    TapeOp<T> op;
    op.name = name;
    op.inputs.reserve(inputs.size());
    for (const auto& t : inputs) op.inputs.push_back(t.node());
    op.output = output.node();
    op.backward = std::move(backward);
    tape->push(op);
}

// Reverse-mode sweep. Zeroes the gradient of every node the tape touched,
// seeds d(loss)/d(loss) = 1, then replays each recorded op exactly once in
// reverse. A tensor consumed k times accumulates the sum of k contributions.
template <typename T>
void backward(const Tensor<T>& loss, GradTape<T>& tape) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    for (auto& op : tape.ops()) {
        op.output->ensure_grad();
        std::fill(op.output->grad.begin(), op.output->grad.end(), T(0));
        for (auto& in : op.inputs) {
            in->ensure_grad();
            std::fill(in->grad.begin(), in->grad.end(), T(0));
        }
    }
    loss.node()->ensure_grad();
    std::fill(loss.node()->grad.begin(), loss.node()->grad.end(), T(0));
    loss.node()->grad[0] = T(1);
    auto& ops = tape.ops();
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) it->backward();
}

// Central finite-difference check. `f` rebuilds a scalar loss from the
// current leaf values; `inputs` are the leaves to probe. Returns the max
// over coordinates of |analytic - cd| / max(|analytic|, |cd|, 1e-8). A kink
// at a probe point is reported through a large error, never masked.
// Gate results at 64-bit; 32-bit runs are informational only.
template <typename T, typename F>
double grad_check(F&& f, const std::vector<Tensor<T>>& inputs, double h = 1e-5) {
    if (h <= 0) throw ContractError("grad_check: h must be positive");
    GradTape<T> tape;
    std::vector<std::vector<T>> analytic;
    {
        TapeScope<T> scope(tape);
        Tensor<T> loss = f();
        backward(loss, tape);
    }
    analytic.reserve(inputs.size());
    for (const auto& in : inputs) analytic.push_back(in.grad());

    double max_rel = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& x = const_cast<Tensor<T>&>(inputs[i]).data();
        for (size_t j = 0; j < x.size(); ++j) {
            const T saved = x[j];
            x[j] = static_cast<T>(saved + h);
            const double fp = static_cast<double>(f().item());
            x[j] = static_cast<T>(saved - h);
            const double fm = static_cast<double>(f().item());
            x[j] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite value probing input " + std::to_string(i) +
                                   " coordinate " + std::to_string(j));
            const double cd = (fp - fm) / (2.0 * h);
            const double a = static_cast<double>(analytic[i][j]);
            const double denom = std::max({std::fabs(a), std::fabs(cd), 1e-8});
            max_rel = std::max(max_rel, std::fabs(a - cd) / denom);
        }
    }
    return max_rel;
}

template <typename T, typename F>
double grad_check(F&& f, std::initializer_list<Tensor<T>> inputs, double h = 1e-5) {
    return grad_check(std::forward<F>(f), std::vector<Tensor<T>>(inputs), h);
}

}  // namespace mambatrans
