// SPDX-License-Identifier: Apache-2.0
#include "mpreid/losses.hpp"

#include <cmath>
#include <limits>

#include "mpreid/errors.hpp"
#include "mpreid/ops.hpp"

namespace mpreid {

namespace {

void check_distributions(const Tensor& q, const Shape& logits_shape, const char* what) {
    if (q.shape() != logits_shape || q.rank() != 2) {
        throw InputError(std::string(what) + ": target shape " + shape_str(q.shape()) + " does not match " +
                         shape_str(logits_shape));
    }
    for (std::size_t r = 0; r < q.rows(); ++r) {
        double s = 0.0;
        for (double v : q.row(r)) {
            if (v < 0.0 || !std::isfinite(v)) throw InputError(std::string(what) + ": target has a negative entry");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) {
            throw InputError(std::string(what) + ": target row " + std::to_string(r) + " sums to " + std::to_string(s));
        }
    }
}

Var diagonal_nll(const Var& log_probs) {
    const auto n = log_probs.value().dim(0);
    std::vector<std::pair<std::size_t, std::size_t>> cells(n);
    for (std::size_t i = 0; i < n; ++i) cells[i] = {i, i};
    return ops::scale(ops::mean(ops::gather_elements(log_probs, cells)), -1.0);
}

void require_square(const Var& s, const char* what) {
    const auto& sv = s.value();
    if (sv.rank() != 2 || sv.dim(0) != sv.dim(1) || sv.dim(0) == 0) {
        throw InputError(std::string(what) + ": similarity matrix must be square, got " + shape_str(sv.shape()));
    }
}

}  // namespace

Tensor smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, double eps) {
    if (classes == 0) throw InputError("smoothed targets need at least one class");
    if (eps < 0.0 || eps > 1.0) throw InputError("label smoothing must lie in [0, 1]");
    Tensor q({labels.size(), classes}, eps / static_cast<double>(classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw InputError("class " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) +
                             " classes");
        }
        q.at(i, labels[i]) = 1.0 - eps + eps / static_cast<double>(classes);
    }
    return q;
}

Var soft_cross_entropy(const Var& logits, const Tensor& q) {
    check_distributions(q, logits.value().shape(), "cross-entropy");
    const auto n = static_cast<double>(q.dim(0));
    const auto ls = ops::log_softmax(logits);
    return ops::scale(ops::sum(ops::mul(ls, logits.tape().constant(q))), -1.0 / n);
}

Var loss_cls(const Var& logits, const Tensor& q) { return soft_cross_entropy(logits, q); }

Var loss_m2p(const Var& s) {
    require_square(s, "m2p");
    return diagonal_nll(ops::log_softmax(s, -1));
}

Var loss_p2m(const Var& s) {
    require_square(s, "p2m");
    return diagonal_nll(ops::log_softmax(s, 0));
}

Var loss_m2pce(const Var& s, const Tensor& q) { return soft_cross_entropy(s, q); }

Var loss_id(const Var& logits, std::span<const std::size_t> labels, double eps) {
    const auto& lv = logits.value();
    if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
        throw InputError("identity logits " + shape_str(lv.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
    }
    return soft_cross_entropy(logits, smoothed_targets(labels, lv.dim(1), eps));
}

double loss_triplet(double d_p, double d_n, double alpha) {
    if (d_p < 0.0 || d_n < 0.0) throw InputError("triplet distances must be non-negative");
    return std::max(d_p - d_n + alpha, 0.0);
}

TripletMining mine_batch_hard(const Tensor& distances, std::span<const std::size_t> labels) {
    const auto n = labels.size();
    if (distances.shape() != Shape{n, n}) {
        throw InputError("distance matrix " + shape_str(distances.shape()) + " does not match " + std::to_string(n) +
                         " labels");
    }
    TripletMining m;
    for (std::size_t a = 0; a < n; ++a) {
        std::size_t pos = n;
        std::size_t neg = n;
        double dp = -std::numeric_limits<double>::infinity();
        double dn = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            const double d = distances.at(a, j);
            if (labels[j] == labels[a]) {
                if (j != a && d > dp) {
                    dp = d;
                    pos = j;
                }
            } else if (d < dn) {
                dn = d;
                neg = j;
            }
        }
        if (neg == n) throw InputError("batch-hard mining needs at least two identities in the batch");
        if (pos == n) continue;
        m.anchors.push_back(a);
        m.positives.push_back(pos);
        m.negatives.push_back(neg);
    }
    return m;
}

Var loss_triplet_batch_hard(const Var& distances, std::span<const std::size_t> labels, double alpha) {
    const auto& dv = distances.value();
    for (double d : dv.data()) {
        if (d < 0.0) throw InputError("triplet distances must be non-negative");
    }
    const auto m = mine_batch_hard(dv, labels);
    if (m.anchors.empty()) throw InputError("batch-hard mining found no anchor with a positive");
    std::vector<std::pair<std::size_t, std::size_t>> pc;
    std::vector<std::pair<std::size_t, std::size_t>> nc;
    for (std::size_t i = 0; i < m.anchors.size(); ++i) {
        pc.emplace_back(m.anchors[i], m.positives[i]);
        nc.emplace_back(m.anchors[i], m.negatives[i]);
    }
    const auto dp = ops::gather_elements(distances, pc);
    const auto dn = ops::gather_elements(distances, nc);
    return ops::mean(ops::relu(ops::add_scalar(ops::sub(dp, dn), alpha)));
}

Var loss_reid(const Var& l_id, const Var& l_tri, double lambda_id, double lambda_tri) {
    return ops::add(ops::scale(l_id, lambda_id), ops::scale(l_tri, lambda_tri));
}

double loss_reid(double l_id, double l_tri, double lambda_id, double lambda_tri) {
    return lambda_id * l_id + lambda_tri * l_tri;
}

Var total_loss(const Var& l_align, const Var& l_reid) { return ops::add(l_align, l_reid); }

double total_loss(double l_align, double l_reid) { return l_align + l_reid; }

}  // namespace mpreid
