// SPDX-License-Identifier: Apache-2.0
#include "mpreid/encoders.hpp"

#include <cmath>

#include "mpreid/errors.hpp"

namespace mpreid {

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

Tensor tiled_positions(const Tensor& table, const std::vector<std::size_t>& lengths) {
    std::size_t total = 0;
    for (auto l : lengths) total += l;
    const auto d = table.cols();
    Tensor out({total, d});
    std::size_t r = 0;
    for (auto l : lengths) {
        for (std::size_t i = 0; i < l; ++i, ++r) {
            const auto src = table.row(i);
            std::copy(src.begin(), src.end(), out.row(r).begin());
        }
    }
    return out;
}

ops::AttentionLayout self_layout(const std::vector<std::size_t>& lengths, std::size_t heads) {
    ops::AttentionLayout layout;
    layout.heads = heads;
    std::size_t off = 0;
    for (auto l : lengths) {
        layout.segments.push_back({off, l, off, l});
        off += l;
    }
    return layout;
}

}  // namespace

void EncoderConfig::validate() const {
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw InputError("embed_dim " + std::to_string(embed_dim) + " is not divisible by " + std::to_string(heads) +
                         " heads");
    }
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw InputError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                         std::to_string(patch_size));
    }
    if (layers == 0) throw InputError("encoders need at least one layer");
    if (channels == 0) throw InputError("images need at least one channel");
    if (context_length < 3) throw InputError("context_length must be at least 3");
    if (mlp_ratio == 0) throw InputError("mlp_ratio must be positive");
}

Var Binder::operator()(const std::string& name) const {
    auto it = params_->find(name);
    if (it == params_->end()) throw LookupError("unknown parameter " + name);
    return trainable_ ? tape_->parameter(name, it->second) : tape_->constant(it->second);
}

void init_linear(TensorMap& params, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    params.insert_or_assign(prefix + ".w", normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    params.insert_or_assign(prefix + ".b", Tensor({out}, 0.0));
}

void init_layer_norm(TensorMap& params, const std::string& prefix, std::size_t dim) {
    params.insert_or_assign(prefix + ".g", Tensor({dim}, 1.0));
    params.insert_or_assign(prefix + ".b", Tensor({dim}, 0.0));
}

void init_transformer_block(TensorMap& params, const std::string& prefix, std::size_t dim, std::size_t hidden,
                            Rng& rng) {
    init_layer_norm(params, prefix + ".ln1", dim);
    init_linear(params, prefix + ".attn.q", dim, dim, rng);
    init_linear(params, prefix + ".attn.k", dim, dim, rng);
    init_linear(params, prefix + ".attn.v", dim, dim, rng);
    init_linear(params, prefix + ".attn.o", dim, dim, rng);
    init_layer_norm(params, prefix + ".ln2", dim);
    init_linear(params, prefix + ".mlp.fc1", dim, hidden, rng);
    init_linear(params, prefix + ".mlp.fc2", hidden, dim, rng);
}

Var linear_layer(const Binder& p, const std::string& prefix, const Var& x) {
    return ops::linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

Var layer_norm_layer(const Binder& p, const std::string& prefix, const Var& x) {
    return ops::layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

Var transformer_block(const Binder& p, const std::string& prefix, const Var& x, const ops::AttentionLayout& layout) {
    const auto h = layer_norm_layer(p, prefix + ".ln1", x);
    const auto q = linear_layer(p, prefix + ".attn.q", h);
    const auto k = linear_layer(p, prefix + ".attn.k", h);
    const auto v = linear_layer(p, prefix + ".attn.v", h);
    const auto a = linear_layer(p, prefix + ".attn.o", ops::attention(q, k, v, layout));
    const auto x1 = ops::add(x, a);
    const auto h2 = layer_norm_layer(p, prefix + ".ln2", x1);
    const auto m = linear_layer(p, prefix + ".mlp.fc2", ops::gelu(linear_layer(p, prefix + ".mlp.fc1", h2)));
    return ops::add(x1, m);
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
    Tensor t({length, dim});
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            const double angle = static_cast<double>(pos) * freq;
            t.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------

ImageEncoder::ImageEncoder(EncoderConfig config) : config_(config) { config_.validate(); }

void ImageEncoder::init(TensorMap& params, Rng& rng) const {
    const auto d = config_.embed_dim;
    init_linear(params, "image.patch", config_.patch_dim(), d, rng);
    params.insert_or_assign("image.cls", normal_tensor({1, d}, 1.0, rng));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        init_transformer_block(params, "image.block" + std::to_string(l), d, config_.mlp_hidden(), rng);
    }
    init_layer_norm(params, "image.ln_post", d);
}

Tensor ImageEncoder::patchify(const Tensor& image) const {
    const auto s = config_.image_size;
    const auto c = config_.channels;
    if (image.shape() != Shape{s, s, c}) {
        throw InputError("image shape " + shape_str(image.shape()) + " does not match configured " +
                         shape_str(Shape{s, s, c}));
    }
    const auto ps = config_.patch_size;
    const auto grid = s / ps;
    Tensor out({config_.patches(), config_.patch_dim()});
    for (std::size_t gy = 0; gy < grid; ++gy) {
        for (std::size_t gx = 0; gx < grid; ++gx) {
            auto row = out.row(gy * grid + gx);
            std::size_t k = 0;
            for (std::size_t y = 0; y < ps; ++y) {
                for (std::size_t x = 0; x < ps; ++x) {
                    const auto base = ((gy * ps + y) * s + (gx * ps + x)) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) row[k++] = image[base + ch];
                }
            }
        }
    }
    return out;
}

ImageEncoding ImageEncoder::encode(const Binder& p, std::span<const Tensor* const> images) const {
    if (images.empty()) throw InputError("no images to encode");
    const auto np = config_.patches();
    const auto nt = config_.image_tokens();
    const auto b = images.size();
    Tensor patches({b * np, config_.patch_dim()});
    for (std::size_t i = 0; i < b; ++i) {
        const auto one = patchify(*images[i]);
        std::copy(one.data().begin(), one.data().end(), patches.data().begin() + static_cast<std::ptrdiff_t>(i * one.size()));
    }
    auto& tape = p.tape();
    const auto emb = linear_layer(p, "image.patch", tape.constant(std::move(patches)));
    const auto pool = ops::concat({p("image.cls"), emb}, 0);

    std::vector<std::size_t> order;
    order.reserve(b * nt);
    for (std::size_t i = 0; i < b; ++i) {
        order.push_back(0);
        for (std::size_t j = 0; j < np; ++j) order.push_back(1 + i * np + j);
    }
    const std::vector<std::size_t> lengths(b, nt);
    auto x = ops::gather_rows(pool, order);
    x = ops::add(x, tape.constant(tiled_positions(sinusoidal_positions(nt, config_.embed_dim), lengths)));

    const auto layout = self_layout(lengths, config_.heads);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        x = transformer_block(p, "image.block" + std::to_string(l), x, layout);
    }
    x = layer_norm_layer(p, "image.ln_post", x);

    std::vector<std::size_t> cls_rows(b);
    for (std::size_t i = 0; i < b; ++i) cls_rows[i] = i * nt;
    return {x, ops::gather_rows(x, cls_rows), nt};
}

ImageEncoding ImageEncoder::encode(const Binder& p, const Tensor& image) const {
    const Tensor* one[] = {&image};
    return encode(p, std::span<const Tensor* const>(one));
}

// ---------------------------------------------------------------------------

ImplicitPromptBank::ImplicitPromptBank(const Vocabulary& vocab, std::size_t identity_count, std::size_t slots,
                                       std::size_t context_length)
    : identities(identity_count), tokens(slots), templ(implicit_template(vocab, slots, context_length)) {
    if (identity_count == 0) throw InputError("implicit prompt bank needs at least one identity");
}

void ImplicitPromptBank::init(TensorMap& params, std::size_t dim, Rng& rng) const {
    params.insert_or_assign(kParam, normal_tensor({identities * tokens, dim}, 0.02, rng));
}

TextEncoder::TextEncoder(EncoderConfig config, std::size_t vocab_size, std::size_t slot_count)
    : config_(config), vocab_size_(vocab_size), slot_count_(slot_count) {
    config_.validate();
    if (vocab_size_ < 3 + slot_count_) throw InputError("vocabulary too small for its reserved ids");
}

void TextEncoder::init(TensorMap& params, Rng& rng) const {
    const auto d = config_.embed_dim;
    params.insert_or_assign("text.token_embedding", normal_tensor({vocab_size_, d}, 1.0, rng));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        init_transformer_block(params, "text.block" + std::to_string(l), d, config_.mlp_hidden(), rng);
    }
    init_layer_norm(params, "text.ln_final", d);
}

void TextEncoder::check(const TokenSequence& seq, bool allow_slots) const {
    const auto& ids = seq.ids;
    if (ids.size() != config_.context_length) {
        throw InputError("token sequence has length " + std::to_string(ids.size()) + ", expected " +
                         std::to_string(config_.context_length));
    }
    if (seq.eos_position == 0 || seq.eos_position >= ids.size()) throw InputError("token sequence has no valid EOS");
    if (ids[0] != 0) throw InputError("token sequence does not start with SOS");
    if (ids[seq.eos_position] != 1) throw InputError("token sequence has no EOS at its recorded position");
    for (std::size_t i = 1; i < ids.size(); ++i) {
        const auto id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
            throw InputError("token id " + std::to_string(id) + " outside the vocabulary");
        }
        if (i < seq.eos_position) {
            const bool slot = static_cast<std::size_t>(id) >= 3 && static_cast<std::size_t>(id) < 3 + slot_count_;
            if (id <= 2 || (slot && !allow_slots)) {
                throw InputError("reserved token id " + std::to_string(id) + " inside sequence content");
            }
        } else if (i > seq.eos_position && id != 2) {
            throw InputError("non-PAD token after EOS");
        }
    }
}

TextEncoding TextEncoder::run(const Binder& p, const Var& embedded, const std::vector<std::size_t>& lengths,
                              const std::vector<std::size_t>& eos, const std::vector<std::uint8_t>& key_mask) const {
    auto& tape = p.tape();
    auto x = ops::add(embedded,
                      tape.constant(tiled_positions(sinusoidal_positions(config_.context_length, config_.embed_dim),
                                                    lengths)));
    auto layout = self_layout(lengths, config_.heads);
    layout.key_mask = key_mask;
    for (std::size_t l = 0; l < config_.layers; ++l) {
        x = transformer_block(p, "text.block" + std::to_string(l), x, layout);
    }
    x = layer_norm_layer(p, "text.ln_final", x);

    TextEncoding out;
    out.tokens = x;
    out.lengths = lengths;
    out.eos_positions = eos;
    std::vector<std::size_t> eos_rows;
    std::size_t off = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        out.offsets.push_back(off);
        eos_rows.push_back(off + eos[i]);
        off += lengths[i];
    }
    out.eos = ops::gather_rows(x, eos_rows);
    return out;
}

TextEncoding TextEncoder::encode(const Binder& p, std::span<const TokenSequence> seqs, bool trim,
                                 bool allow_slots) const {
    if (seqs.empty()) throw InputError("no token sequences to encode");
    std::vector<std::size_t> ids;
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> eos;
    std::vector<std::uint8_t> mask;
    for (const auto& s : seqs) {
        check(s, allow_slots);
        const auto len = trim ? s.valid_length() : s.ids.size();
        for (std::size_t i = 0; i < len; ++i) {
            ids.push_back(static_cast<std::size_t>(s.ids[i]));
            if (!trim) mask.push_back(i > s.eos_position ? 1 : 0);
        }
        lengths.push_back(len);
        eos.push_back(s.eos_position);
    }
    const auto emb = ops::gather_rows(p("text.token_embedding"), ids);
    return run(p, emb, lengths, eos, mask);
}

TextEncoding TextEncoder::encode(const Binder& p, const TokenSequence& seq, bool trim) const {
    return encode(p, std::span<const TokenSequence>(&seq, 1), trim);
}

TextEncoding TextEncoder::encode_implicit(const Binder& p, const ImplicitPromptBank& bank,
                                          std::span<const std::size_t> identities, bool trim) const {
    if (identities.empty()) throw InputError("no identities to encode");
    const auto& seq = bank.templ.sequence;
    check(seq, true);
    for (auto id : identities) {
        if (id >= bank.identities) {
            throw LookupError("identity index " + std::to_string(id) + " not in implicit bank of " +
                              std::to_string(bank.identities));
        }
    }
    const auto d = config_.embed_dim;
    const auto len = trim ? seq.valid_length() : seq.ids.size();
    const auto& table = p.params().at("text.token_embedding");

    Tensor words({len, d}, 0.0);
    std::vector<bool> is_slot(len, false);
    std::vector<std::size_t> slot_index(len, 0);
    for (std::size_t t = 0; t < bank.templ.slot_positions.size(); ++t) {
        const auto pos = bank.templ.slot_positions[t];
        is_slot[pos] = true;
        slot_index[pos] = t;
    }
    for (std::size_t i = 0; i < len; ++i) {
        if (is_slot[i]) continue;
        const auto src = table.row(static_cast<std::size_t>(seq.ids[i]));
        std::copy(src.begin(), src.end(), words.row(i).begin());
    }

    std::vector<std::size_t> bank_rows;
    for (auto id : identities) {
        for (std::size_t t = 0; t < bank.tokens; ++t) bank_rows.push_back(id * bank.tokens + t);
    }
    const auto slots = ops::gather_rows(p(ImplicitPromptBank::kParam), bank_rows);
    const auto pool = ops::concat({p.tape().constant(std::move(words)), slots}, 0);

    std::vector<std::size_t> order;
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> eos;
    std::vector<std::uint8_t> mask;
    for (std::size_t n = 0; n < identities.size(); ++n) {
        for (std::size_t i = 0; i < len; ++i) {
            order.push_back(is_slot[i] ? len + n * bank.tokens + slot_index[i] : i);
            if (!trim) mask.push_back(i > seq.eos_position ? 1 : 0);
        }
        lengths.push_back(len);
        eos.push_back(seq.eos_position);
    }
    return run(p, ops::gather_rows(pool, order), lengths, eos, mask);
}

}  // namespace mpreid
