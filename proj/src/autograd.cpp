// SPDX-License-Identifier: Apache-2.0
#include "mpreid/autograd.hpp"

#include "mpreid/errors.hpp"

namespace mpreid {

const Tensor& Var::value() const {
    if (tape_ == nullptr) {
        throw StateError("use of an unbound Var");
    }
    tape_->check_live(*this);
    return tape_->nodes_[id_].value;
}

Tape& Var::tape() const {
    if (tape_ == nullptr) {
        throw StateError("use of an unbound Var");
    }
    return *tape_;
}

void Tape::check_live(const Var& v) const {
    if (consumed_) {
        throw StateError("tape already ran backward; its values were released");
    }
    if (v.tape_ != this || v.id_ >= nodes_.size()) {
        throw StateError("Var does not belong to this tape");
    }
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
    if (consumed_) {
        throw StateError("cannot register parameters on a consumed tape");
    }
    if (auto it = params_.find(name); it != params_.end()) {
        return Var(this, it->second);
    }
    Node node;
    node.value = value;
    node.value.set_requires_grad(true);
    node.needs_grad = true;
    nodes_.push_back(std::move(node));
    const auto id = nodes_.size() - 1;
    params_.emplace(name, id);
    return Var(this, id);
}

Var Tape::constant(Tensor value) {
    value.set_requires_grad(false);
    return leaf(std::move(value));
}

Var Tape::leaf(Tensor value) {
    if (consumed_) {
        throw StateError("cannot record on a consumed tape");
    }
    Node node;
    node.needs_grad = value.requires_grad();
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    if (consumed_) {
        throw StateError("cannot record on a consumed tape");
    }
    if (!value.all_finite()) {
        throw NumericError("non-finite value produced by op with output shape " + shape_str(value.shape()));
    }
    bool needs = false;
    for (const auto& in : inputs) {
        check_live(in);
        needs = needs || nodes_[in.id_].needs_grad;
    }
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs;
    if (needs) {
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

bool Tape::needs_grad(const Var& v) const {
    check_live(v);
    return nodes_[v.id_].needs_grad;
}

std::span<double> Tape::grad(std::size_t id) {
    auto& node = nodes_.at(id);
    if (node.grad.empty()) {
        node.grad.assign(node.value.size(), 0.0);
    }
    return node.grad;
}

void Tape::run_backward(const Var& loss) {
    if (consumed_) {
        throw StateError("backward called twice on the same tape");
    }
    check_live(loss);
    if (nodes_[loss.id_].value.size() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id_].value.shape()));
    }
    grad(loss.id_)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (!node.backward || node.grad.empty()) {
            continue;
        }
        // The closure may allocate gradients of earlier nodes, which never
        // reallocates nodes_, so the span stays valid.
        const std::span<const double> g(node.grad);
        node.backward(*this, g);
    }
}

GradientMap Tape::backward(const Var& loss) {
    run_backward(loss);
    GradientMap out;
    for (const auto& [name, id] : params_) {
        auto& node = nodes_[id];
        if (node.grad.empty()) {
            out.emplace(name, Tensor(node.value.shape(), 0.0));
        } else {
            out.emplace(name, Tensor(node.value.shape(), std::move(node.grad)));
        }
    }
    nodes_.clear();
    nodes_.shrink_to_fit();
    consumed_ = true;
    return out;
}

std::vector<Tensor> Tape::backward_all(const Var& loss) {
    run_backward(loss);
    std::vector<Tensor> out;
    out.reserve(nodes_.size());
    for (auto& node : nodes_) {
        if (node.grad.empty()) {
            out.emplace_back(node.value.shape(), 0.0);
        } else {
            out.emplace_back(node.value.shape(), std::move(node.grad));
        }
    }
    nodes_.clear();
    nodes_.shrink_to_fit();
    consumed_ = true;
    return out;
}

}  // namespace mpreid
