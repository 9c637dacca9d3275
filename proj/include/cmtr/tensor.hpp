#pragma once

#include <functional>
#include <memory>
#include <utility>

#include "cmtr/common.hpp"

namespace cmtr {

class Tape;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily; same length as value once in use
    bool requires_grad = false;
    Tape* tape = nullptr;  // non-owning; cleared when the tape dies
};

}  // namespace detail

// Dense row-major float64 tensor. Value-semantics handle: copies share the
// underlying node, clone() makes an independent one.
class Tensor {
public:
    Tensor() : n_(std::make_shared<detail::TensorNode>()) {}

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.n_->value.assign(numel(shape), 0.0);
        t.n_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.n_->value) x = v;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> data) {
        check(numel(shape) == data.size(), "Tensor: shape " + shape_str(shape) +
                                               " does not match data length " +
                                               std::to_string(data.size()));
        Tensor t;
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from_data({}, {v}); }

    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t size() const { return n_->value.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }

    const std::vector<double>& value() const { return n_->value; }
    std::vector<double>& value() { return n_->value; }
    const double* data() const { return n_->value.data(); }
    double* data() { return n_->value.data(); }

    double item() const {
        check(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
        return n_->value[0];
    }

    double at(std::size_t i) const { return n_->value.at(i); }
    double at(std::size_t i, std::size_t j) const {
        check(rank() == 2, "at(i,j) on non-matrix");
        return n_->value.at(i * n_->shape[1] + j);
    }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    Tape* tape() const { return n_->tape; }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        check(has_grad(), "grad(): no gradient present");
        return n_->grad;
    }
    std::vector<double>& grad_mut() {
        if (n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
        return n_->grad;
    }
    void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }
    void drop_grad() { n_->grad.clear(); }

    Tensor clone() const {
        Tensor t;
        t.n_->shape = n_->shape;
        t.n_->value = n_->value;
        t.n_->requires_grad = n_->requires_grad;
        return t;
    }

    // Same node, new handle without autodiff participation. The value buffer
    // is shared, so this is only for read paths.
    Tensor detached_view() const {
        Tensor t;
        t.n_ = std::make_shared<detail::TensorNode>();
        t.n_->shape = n_->shape;
        t.n_->value = n_->value;
        return t;
    }

    std::shared_ptr<detail::TensorNode> node() const { return n_; }

private:
    std::shared_ptr<detail::TensorNode> n_;
    friend class Tape;
};

// Ordered record of executed ops. backward() replays them in exact reverse
// execution order, once; a second backward without re-execution is an error.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ~Tape() {
        for (auto& w : touched_)
            if (auto n = w.lock())
                if (n->tape == this) n->tape = nullptr;
    }

    // Put an existing tensor (typically a parameter) on this tape and clear
    // its gradient accumulator.
    void attach(Tensor& t) {
        check(t.n_->tape == nullptr || t.n_->tape == this,
              "attach: tensor already on another tape");
        t.n_->tape = this;
        t.n_->requires_grad = true;
        t.zero_grad();
        touched_.push_back(t.n_);
    }

    // Called by ops: register a freshly computed result plus its backward.
    void record(Tensor& result, std::function<void()> backward) {
        check(!consumed_, "record: tape already ran backward");
        result.n_->tape = this;
        result.n_->requires_grad = true;
        result.zero_grad();
        touched_.push_back(result.n_);
        ops_.push_back(std::move(backward));
    }

    void backward(const Tensor& loss) {
        check(!consumed_, "backward: tape already consumed; re-execute the forward pass");
        check(loss.tape() == this, "backward: loss was not recorded on this tape");
        check(loss.size() == 1, "backward: loss must be scalar");
        consumed_ = true;
        loss.node()->grad.assign(1, 1.0);
        for (std::size_t i = ops_.size(); i-- > 0;) ops_[i]();
    }

    bool consumed() const { return consumed_; }
    std::size_t num_ops() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
    std::vector<std::weak_ptr<detail::TensorNode>> touched_;
    bool consumed_ = false;
};

namespace detail {

// Tape shared by the inputs of an op; ContractError on a mix of live tapes.
inline Tape* common_tape(std::initializer_list<const Tensor*> ins) {
    Tape* t = nullptr;
    for (const Tensor* in : ins) {
        Tape* it = in->tape();
        if (!it) continue;
        check(t == nullptr || t == it, "op: inputs recorded on different tapes");
        t = it;
    }
    return t;
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* in : ins)
        if (in->requires_grad()) return true;
    return false;
}

}  // namespace detail

}  // namespace cmtr
