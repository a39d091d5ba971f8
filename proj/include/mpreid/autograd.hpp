// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mpreid/tensor.hpp"

namespace mpreid {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// the owning tape is alive and has not run backward.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const;
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

using GradientMap = std::map<std::string, Tensor>;

/// Reverse-mode gradient tape.
///
/// Every op appends one node holding its forward value and a closure that
/// propagates the node's gradient into its inputs. backward() walks the
/// nodes in exact reverse order of recording, returns one gradient per
/// registered parameter and releases the tape. A tape is single-owner and
/// not thread-safe; independent tapes may run concurrently.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::span<const double> grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the first handle.
    Var parameter(const std::string& name, const Tensor& value);
    Var constant(Tensor value);
    /// Leaf that tracks gradients iff value.requires_grad().
    Var leaf(Tensor value);

    bool has_parameter(const std::string& name) const { return params_.contains(name); }
    const std::map<std::string, std::size_t>& parameters() const noexcept { return params_; }

    /// Appends an op result. The backward closure is dropped when no input
    /// needs a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    GradientMap backward(const Var& loss);

    /// Gradient of every node w.r.t. the loss, keyed by node id. Used by
    /// tests that inspect non-parameter inputs. Same contract as backward().
    std::vector<Tensor> backward_all(const Var& loss);

    bool needs_grad(const Var& v) const;
    bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

    /// Mutable gradient buffer of a node, allocated as zeros on first use.
    std::span<double> grad(std::size_t id);

    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

private:
    friend class Var;

    struct Node {
        Tensor value;
        std::vector<double> grad;
        BackwardFn backward;
        bool needs_grad = false;
    };

    void check_live(const Var& v) const;
    void run_backward(const Var& loss);

    std::vector<Node> nodes_;
    std::map<std::string, std::size_t> params_;
    bool consumed_ = false;
};

}  // namespace mpreid
