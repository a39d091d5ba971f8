// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mpreid/archive.hpp"
#include "mpreid/autograd.hpp"
#include "mpreid/ops.hpp"
#include "mpreid/prompts.hpp"
#include "mpreid/rng.hpp"
#include "mpreid/tokenizer.hpp"

namespace mpreid {

struct EncoderConfig {
    std::size_t embed_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t patch_size = 8;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t context_length = 77;
    std::size_t mlp_ratio = 4;

    void validate() const;
    std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t image_tokens() const { return patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t mlp_hidden() const { return embed_dim * mlp_ratio; }
};

/// Resolves parameter names against a TensorMap onto a tape. Trainable
/// binders register tape parameters; frozen ones record constants.
class Binder {
public:
    Binder(Tape& tape, const TensorMap& params, bool trainable = true)
        : tape_(&tape), params_(&params), trainable_(trainable) {}

    Var operator()(const std::string& name) const;
    Tape& tape() const noexcept { return *tape_; }
    const TensorMap& params() const noexcept { return *params_; }
    bool trainable() const noexcept { return trainable_; }

private:
    Tape* tape_;
    const TensorMap* params_;
    bool trainable_;
};

/// Parameter initialisers. Linear weights are [in, out] with N(0, 1/in)
/// entries; biases start at zero; layer norms at gain 1, shift 0.
void init_linear(TensorMap& params, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
void init_layer_norm(TensorMap& params, const std::string& prefix, std::size_t dim);
void init_transformer_block(TensorMap& params, const std::string& prefix, std::size_t dim, std::size_t hidden,
                            Rng& rng);

Var linear_layer(const Binder& p, const std::string& prefix, const Var& x);
Var layer_norm_layer(const Binder& p, const std::string& prefix, const Var& x);

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(x)) with GELU.
/// The layout's segments are self-attention problems over rows of x.
Var transformer_block(const Binder& p, const std::string& prefix, const Var& x, const ops::AttentionLayout& layout);

/// Fixed sine/cosine table [length, dim].
Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

struct ImageEncoding {
    Var tokens;  // [batch * image_tokens, D]: CLS then patches for each image
    Var cls;     // [batch, D]
    std::size_t tokens_per_image = 0;
};

class ImageEncoder {
public:
    explicit ImageEncoder(EncoderConfig config);

    void init(TensorMap& params, Rng& rng) const;
    /// Patch rows of one image in raster order, [patches, patch_dim].
    Tensor patchify(const Tensor& image) const;
    ImageEncoding encode(const Binder& p, std::span<const Tensor* const> images) const;
    ImageEncoding encode(const Binder& p, const Tensor& image) const;

    const EncoderConfig& config() const noexcept { return config_; }

private:
    EncoderConfig config_;
};

struct TextEncoding {
    Var tokens;  // packed token rows of every sequence
    Var eos;     // [batch, D]
    std::vector<std::size_t> offsets;  // first row of each sequence in tokens
    std::vector<std::size_t> lengths;  // rows per sequence
    std::vector<std::size_t> eos_positions;
};

/// Per-identity learnable slot embeddings around a shared template.
struct ImplicitPromptBank {
    std::size_t identities = 0;
    std::size_t tokens = 0;  // T
    ImplicitTemplate templ;

    static constexpr const char* kParam = "implicit.bank";

    ImplicitPromptBank() = default;
    ImplicitPromptBank(const Vocabulary& vocab, std::size_t identity_count, std::size_t slots,
                       std::size_t context_length);
    void init(TensorMap& params, std::size_t dim, Rng& rng) const;
};

class TextEncoder {
public:
    TextEncoder(EncoderConfig config, std::size_t vocab_size, std::size_t slot_count);

    void init(TensorMap& params, Rng& rng) const;

    /// Throws InputError unless seq is SOS ... EOS PAD* of context length
    /// with in-range ids and no placeholders.
    void check(const TokenSequence& seq, bool allow_slots = false) const;

    /// Bidirectional encoder with EOS pooling. With trim, each sequence is cut
    /// after EOS; otherwise the full context is encoded and PAD keys are masked.
    /// Both give identical EOS features. Placeholder ids are rejected unless
    /// allow_slots is set, in which case they read their embedding table rows.
    TextEncoding encode(const Binder& p, std::span<const TokenSequence> seqs, bool trim = true,
                        bool allow_slots = false) const;
    TextEncoding encode(const Binder& p, const TokenSequence& seq, bool trim = true) const;

    /// Template sequences whose slots read rows of the bank for each
    /// requested identity index. Template word embeddings enter as constants.
    TextEncoding encode_implicit(const Binder& p, const ImplicitPromptBank& bank,
                                 std::span<const std::size_t> identities, bool trim = true) const;

    const EncoderConfig& config() const noexcept { return config_; }
    std::size_t vocab_size() const noexcept { return vocab_size_; }

private:
    TextEncoding run(const Binder& p, const Var& embedded, const std::vector<std::size_t>& lengths,
                     const std::vector<std::size_t>& eos, const std::vector<std::uint8_t>& key_mask) const;

    EncoderConfig config_;
    std::size_t vocab_size_;
    std::size_t slot_count_;
};

}  // namespace mpreid
