// SPDX-License-Identifier: Apache-2.0
#include "mpreid/optimizer.hpp"

#include <cmath>

#include "mpreid/errors.hpp"

namespace mpreid {

void Adam::step(TensorMap& params, const GradientMap& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) {
            throw LookupError("gradient for unknown parameter " + name);
        }
        auto& p = it->second;
        if (p.shape() != g.shape()) {
            throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match parameter " + name + " " +
                                 shape_str(p.shape()));
        }
        auto& m = m_.try_emplace(name, p.shape(), 0.0).first->second;
        auto& v = v_.try_emplace(name, p.shape(), 0.0).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] -= lr * mh / (std::sqrt(vh) + config_.eps);
        }
    }
}

TensorMap Adam::state() const {
    TensorMap out;
    for (const auto& [name, m] : m_) out.emplace("adam.m/" + name, m);
    for (const auto& [name, v] : v_) out.emplace("adam.v/" + name, v);
    out.emplace("adam.t", Tensor::scalar(static_cast<double>(t_)));
    return out;
}

void Adam::load_state(const TensorMap& archive) {
    m_.clear();
    v_.clear();
    t_ = 0;
    for (const auto& [key, t] : archive) {
        if (key.starts_with("adam.m/")) {
            m_.emplace(key.substr(7), t);
        } else if (key.starts_with("adam.v/")) {
            v_.emplace(key.substr(7), t);
        } else if (key == "adam.t") {
            t_ = static_cast<std::size_t>(t.item());
        }
    }
}

double scheduled_lr(double base_lr, std::size_t step, std::size_t total_steps, double warmup_fraction) {
    const auto warmup =
        static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (warmup == 0 || step >= warmup) {
        return base_lr;
    }
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

}  // namespace mpreid
