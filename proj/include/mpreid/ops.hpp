// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mpreid/autograd.hpp"

/// Differentiable tensor ops. Every op validates shapes (DimensionError
/// naming both shapes), rejects non-finite results (NumericError) and
/// records its gradient rule on the tape of its first input.
namespace mpreid::ops {

Var matmul(const Var& a, const Var& b);     // [m,k] x [k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k] x [n,k]^T
Var transpose(const Var& a);
Var linear(const Var& x, const Var& weight, const Var& bias);  // x[n,in] w[in,out] b[out]

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double c);
Var add_row(const Var& a, const Var& row);  // [n,d] + [d]

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // [n,d] -> [n]

Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var gather_elements(const Var& a, std::span<const std::pair<std::size_t, std::size_t>> cells);
Var reshape(const Var& a, Shape shape);

/// Softmax with max-subtraction, over the last axis (axis = -1) or over
/// rows of a matrix (axis = 0).
Var softmax(const Var& a, int axis = -1);
Var log_softmax(const Var& a, int axis = -1);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var gelu(const Var& x);  // exact erf form
Var relu(const Var& x);
Var l2_normalize(const Var& x, double eps = 1e-12);  // per row

/// Euclidean distance between every pair of rows: sqrt(|xi - xj|^2 + eps).
Var pairwise_distance(const Var& x, double eps = 1e-12);

struct AttentionSegment {
    std::size_t q_begin = 0;
    std::size_t q_len = 0;
    std::size_t k_begin = 0;
    std::size_t k_len = 0;
};

/// Packs many independent attention problems into one op. Queries of a
/// segment attend only to that segment's key rows. key_mask, when set, has
/// one entry per key row; non-zero entries are excluded from every softmax.
struct AttentionLayout {
    std::vector<AttentionSegment> segments;
    std::size_t heads = 1;
    std::vector<std::uint8_t> key_mask;
};

/// Multi-head scaled dot-product attention over packed rows.
/// q [Nq, D], k and v [Nk, D]; D divisible by heads. Returns [Nq, D].
Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout);

/// Attention probabilities of one segment and head, [q_len, k_len].
Tensor attention_probabilities(const Tensor& q, const Tensor& k, const AttentionLayout& layout, std::size_t segment,
                               std::size_t head);

}  // namespace mpreid::ops
