// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mpreid/autograd.hpp"

namespace mpreid {

/// Rows of label-smoothed one-hot targets: 1 - eps + eps/classes on the
/// label, eps/classes elsewhere.
Tensor smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, double eps);

/// Mean over rows of -sum_k q_k log softmax(logits)_k. Rows of q must be
/// distributions (sum 1 within 1e-6, non-negative).
Var soft_cross_entropy(const Var& logits, const Tensor& q);

/// Cross-entropy of the classifier logits on f_CLS against q.
Var loss_cls(const Var& logits, const Tensor& q);

/// Image-to-prompt contrastive loss: mean_i -log softmax_row(S)_ii.
Var loss_m2p(const Var& s);
/// Prompt-to-image contrastive loss: mean_i -log softmax_col(S)_ii.
Var loss_p2m(const Var& s);

/// Row-softmax cross-entropy of a Q x P similarity matrix against q.
Var loss_m2pce(const Var& s, const Tensor& q);

/// Label-smoothed identity loss.
Var loss_id(const Var& logits, std::span<const std::size_t> labels, double eps);

/// Hinge max(d_p - d_n + alpha, 0) for a single triple.
double loss_triplet(double d_p, double d_n, double alpha);

struct TripletMining {
    std::vector<std::size_t> anchors;
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
};

/// Hardest positive (largest distance, other index) and hardest negative
/// (smallest distance) per anchor. Anchors without another same-label row
/// are skipped. Ties go to the lowest index.
TripletMining mine_batch_hard(const Tensor& distances, std::span<const std::size_t> labels);

/// Batch-hard triplet loss on a pairwise distance matrix, averaged over anchors.
Var loss_triplet_batch_hard(const Var& distances, std::span<const std::size_t> labels, double alpha);

Var loss_reid(const Var& l_id, const Var& l_tri, double lambda_id, double lambda_tri);
double loss_reid(double l_id, double l_tri, double lambda_id, double lambda_tri);
Var total_loss(const Var& l_align, const Var& l_reid);
double total_loss(double l_align, double l_reid);

}  // namespace mpreid
