// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "mpreid/archive.hpp"
#include "mpreid/autograd.hpp"

namespace mpreid {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    /// Applies one bias-corrected Adam update to every parameter that has a
    /// gradient entry. Parameters and moments are visited in name order.
    void step(TensorMap& params, const GradientMap& grads, double lr);

    std::size_t steps() const noexcept { return t_; }

    /// Moments as archive entries: "adam.m/<name>", "adam.v/<name>" plus a
    /// scalar "adam.t".
    TensorMap state() const;
    void load_state(const TensorMap& archive);

private:
    AdamConfig config_;
    TensorMap m_;
    TensorMap v_;
    std::size_t t_ = 0;
};

/// Linear warmup from lr/warmup_steps up to base_lr over the first
/// ceil(warmup_fraction * total_steps) steps, constant afterwards.
double scheduled_lr(double base_lr, std::size_t step, std::size_t total_steps, double warmup_fraction);

}  // namespace mpreid
