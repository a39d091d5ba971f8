// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpreid/encoders.hpp"

namespace mpreid {

/// Prompt tokens query the concatenation of image tokens and prompt tokens.
/// Output rows are o(softmax(q k^T / sqrt(d_h)) v) without a residual path.
class CrossAttentionBlock {
public:
    CrossAttentionBlock(std::string prefix, std::size_t dim, std::size_t heads);

    void init(TensorMap& params, Rng& rng) const;

    /// One attended feature per prompt row; prompt [Lp, D], image [Li, D].
    Var attend(const Binder& p, const Var& prompt, const Var& image) const;

    /// Attended feature at each pair's EOS row only. pairs hold (image index,
    /// prompt index) into the packed image tokens and prompt encodings.
    Var attend_pooled(const Binder& p, const Var& image_tokens, std::size_t tokens_per_image,
                      const TextEncoding& prompts, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const;

    /// Attention probabilities [Lp, Li + Lp] of one head for attend().
    Tensor weights(const Binder& p, const Var& prompt, const Var& image, std::size_t head) const;

    const std::string& prefix() const noexcept { return prefix_; }

private:
    std::string prefix_;
    std::size_t dim_;
    std::size_t heads_;
};

/// f_e = fc2(gelu(fc1([f_c, f_v]))), rows are samples.
void init_ensemble(TensorMap& params, std::size_t dim, Rng& rng);
Var ensemble_explicit(const Binder& p, const Var& f_c, const Var& f_v);

struct FusionOutput {
    Var sequence;  // [batch * seq_len, D]
    Var cls;       // [batch, D]
    std::size_t seq_len = 0;
};

/// Transformer over [CLS, f_e, image tokens] per sample; without f_e the
/// sequence is [CLS, image tokens].
void init_fusion(TensorMap& params, std::size_t dim, std::size_t hidden, std::size_t depth, std::size_t classes,
                 Rng& rng);
FusionOutput fuse_multimodal(const Binder& p, const std::optional<Var>& f_e, const Var& image_tokens,
                             std::size_t tokens_per_image, std::size_t heads, std::size_t depth);

/// Cross-modal similarity sim(m, p) = u_M(m) . u_P(p), optionally with both
/// projections L2-normalised, divided by tau.
struct SimilarityConfig {
    bool normalize = true;
    double tau = 1.0;
};

void init_projections(TensorMap& params, std::size_t dim, Rng& rng);
Var project_image(const Binder& p, const Var& m, const SimilarityConfig& cfg);
Var project_prompt(const Binder& p, const Var& e, const SimilarityConfig& cfg);
/// [N, M] matrix of similarities between rows of m and rows of e.
Var similarity_matrix(const Binder& p, const Var& m, const Var& e, const SimilarityConfig& cfg);
double similarity(const Binder& p, const Tensor& m, const Tensor& e, const SimilarityConfig& cfg);

struct AlignmentLossBundle {
    Var l_cls;
    Var l_m2p;
    Var l_p2m;
    Var l_m2pce;
    Var l_align;
};

/// Sums the four components in order (cls + m2p) + p2m + m2pce. Throws
/// InvariantError if any component is negative or not a scalar.
AlignmentLossBundle loss_align(const Var& l_cls, const Var& l_m2p, const Var& l_p2m, const Var& l_m2pce);

}  // namespace mpreid
