// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mpreid/autograd.hpp"
#include "mpreid/encoders.hpp"
#include "mpreid/tensor.hpp"

namespace testsupport {

using mpreid::Shape;
using mpreid::Tape;
using mpreid::Tensor;
using mpreid::Var;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(shape, 0.0);
    for (auto& v : t.data()) v = dist(gen);
    return t;
}

/// Scalar function of several tensors recorded on a tape.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double evaluate(const LossBuilder& f, const std::vector<Tensor>& inputs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return f(tape, vars).value().item();
}

/// Largest norm-wise relative error between the tape gradient of every input
/// and its central finite difference with step h.
inline double gradient_error(const LossBuilder& f, const std::vector<Tensor>& inputs, double h = 1e-3) {
    Tape tape;
    std::vector<Var> vars;
    for (auto t : inputs) {
        t.set_requires_grad(true);
        vars.push_back(tape.leaf(t));
    }
    const auto grads = tape.backward_all(f(tape, vars));
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& analytic = grads.at(vars[i].id());
        double diff = 0.0;
        double na = 0.0;
        double nn = 0.0;
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            auto plus = inputs;
            auto minus = inputs;
            plus[i][j] += h;
            minus[i][j] -= h;
            const double numeric = (evaluate(f, plus) - evaluate(f, minus)) / (2.0 * h);
            const double a = analytic.size() ? analytic[j] : 0.0;
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
        worst = std::max(worst, std::sqrt(diff) / scale);
    }
    return worst;
}

/// Scalar function of named parameters bound on a tape.
using ParamLoss = std::function<Var(const mpreid::Binder&)>;

/// Norm-wise relative error between the tape gradient of each named
/// parameter and its central finite difference. At most max_entries entries
/// per parameter are probed, spread evenly.
inline double param_gradient_error(const ParamLoss& f, const mpreid::TensorMap& params,
                                   const std::vector<std::string>& names, double h = 1e-4,
                                   std::size_t max_entries = 24) {
    mpreid::GradientMap grads;
    {
        Tape tape;
        mpreid::Binder p(tape, params);
        grads = tape.backward(f(p));
    }
    auto value = [&](const mpreid::TensorMap& m) {
        Tape tape;
        mpreid::Binder p(tape, m, false);
        return f(p).value().item();
    };
    double worst = 0.0;
    for (const auto& name : names) {
        const auto& base = params.at(name);
        const auto it = grads.find(name);
        const std::size_t stride = std::max<std::size_t>(1, base.size() / max_entries);
        double diff = 0.0;
        double na = 0.0;
        double nn = 0.0;
        for (std::size_t j = 0; j < base.size(); j += stride) {
            auto plus = params;
            auto minus = params;
            plus.at(name)[j] += h;
            minus.at(name)[j] -= h;
            const double numeric = (value(plus) - value(minus)) / (2.0 * h);
            const double a = it == grads.end() ? 0.0 : it->second[j];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
        worst = std::max(worst, std::sqrt(diff) / scale);
    }
    return worst;
}

/// Brute-force retrieval oracle written from the metric definitions:
/// junk items are dropped from the list, AP is the mean precision at each
/// relevant position, CMC@k is whether a relevant item is in the top k.
struct OracleMetrics {
    double map = 0.0;
    std::vector<double> cmc;
};

inline OracleMetrics brute_force_metrics(const Tensor& q, const Tensor& g, const std::vector<std::int64_t>& qid,
                                         const std::vector<std::int64_t>& gid, const std::vector<std::size_t>& qcam,
                                         const std::vector<std::size_t>& gcam, std::size_t max_rank) {
    const std::size_t nq = q.shape()[0];
    const std::size_t ng = g.shape()[0];
    const std::size_t d = q.shape()[1];
    OracleMetrics out;
    out.cmc.assign(max_rank, 0.0);
    std::size_t counted = 0;
    for (std::size_t i = 0; i < nq; ++i) {
        std::vector<std::pair<double, std::size_t>> items;
        for (std::size_t j = 0; j < ng; ++j) {
            if (gid[j] == qid[i] && !qcam.empty() && gcam[j] == qcam[i]) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += std::pow(q[i * d + c] - g[j * d + c], 2);
            items.emplace_back(std::sqrt(s), j);
        }
        std::sort(items.begin(), items.end());
        std::vector<int> rel;
        for (const auto& [dist, j] : items) rel.push_back(gid[j] == qid[i] ? 1 : 0);
        int total = 0;
        for (int r : rel) total += r;
        if (total == 0) continue;
        ++counted;
        double ap = 0.0;
        for (std::size_t k = 0; k < rel.size(); ++k) {
            if (!rel[k]) continue;
            int hits = 0;
            for (std::size_t t = 0; t <= k; ++t) hits += rel[t];
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
        out.map += ap / total;
        for (std::size_t k = 0; k < max_rank; ++k) {
            bool hit = false;
            for (std::size_t t = 0; t <= k && t < rel.size(); ++t) hit = hit || rel[t];
            out.cmc[k] += hit ? 1.0 : 0.0;
        }
    }
    out.map /= static_cast<double>(counted);
    for (auto& c : out.cmc) c /= static_cast<double>(counted);
    return out;
}

}  // namespace testsupport
