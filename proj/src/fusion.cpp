// SPDX-License-Identifier: Apache-2.0
#include "mpreid/fusion.hpp"

#include "mpreid/errors.hpp"

namespace mpreid {

namespace {

void require_width(const Var& x, std::size_t dim, const char* what) {
    const auto& v = x.value();
    if (v.rank() != 2 || v.dim(1) != dim || v.dim(0) == 0) {
        throw InputError(std::string(what) + ": expected rows of width " + std::to_string(dim) + ", got " +
                         shape_str(v.shape()));
    }
}

}  // namespace

CrossAttentionBlock::CrossAttentionBlock(std::string prefix, std::size_t dim, std::size_t heads)
    : prefix_(std::move(prefix)), dim_(dim), heads_(heads) {
    if (heads_ == 0 || dim_ % heads_ != 0) throw InputError("cross-attention width not divisible by heads");
}

void CrossAttentionBlock::init(TensorMap& params, Rng& rng) const {
    init_linear(params, prefix_ + ".q", dim_, dim_, rng);
    init_linear(params, prefix_ + ".k", dim_, dim_, rng);
    init_linear(params, prefix_ + ".v", dim_, dim_, rng);
    init_linear(params, prefix_ + ".o", dim_, dim_, rng);
}

Var CrossAttentionBlock::attend(const Binder& p, const Var& prompt, const Var& image) const {
    require_width(prompt, dim_, "cross-attention prompt");
    require_width(image, dim_, "cross-attention image");
    const auto lp = prompt.value().dim(0);
    const auto li = image.value().dim(0);
    const auto src = ops::concat({image, prompt}, 0);
    ops::AttentionLayout layout;
    layout.heads = heads_;
    layout.segments.push_back({0, lp, 0, li + lp});
    const auto q = linear_layer(p, prefix_ + ".q", prompt);
    const auto k = linear_layer(p, prefix_ + ".k", src);
    const auto v = linear_layer(p, prefix_ + ".v", src);
    return linear_layer(p, prefix_ + ".o", ops::attention(q, k, v, layout));
}

Tensor CrossAttentionBlock::weights(const Binder& p, const Var& prompt, const Var& image, std::size_t head) const {
    require_width(prompt, dim_, "cross-attention prompt");
    require_width(image, dim_, "cross-attention image");
    const auto lp = prompt.value().dim(0);
    const auto li = image.value().dim(0);
    const auto src = ops::concat({image, prompt}, 0);
    ops::AttentionLayout layout;
    layout.heads = heads_;
    layout.segments.push_back({0, lp, 0, li + lp});
    const auto q = linear_layer(p, prefix_ + ".q", prompt);
    const auto k = linear_layer(p, prefix_ + ".k", src);
    return ops::attention_probabilities(q.value(), k.value(), layout, 0, head);
}

Var CrossAttentionBlock::attend_pooled(const Binder& p, const Var& image_tokens, std::size_t tokens_per_image,
                                       const TextEncoding& prompts,
                                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const {
    require_width(image_tokens, dim_, "cross-attention image");
    require_width(prompts.tokens, dim_, "cross-attention prompt");
    if (pairs.empty()) throw InputError("cross-attention needs at least one (image, prompt) pair");
    const auto ni = image_tokens.value().dim(0);
    if (tokens_per_image == 0 || ni % tokens_per_image != 0) {
        throw InputError("image token rows are not a multiple of tokens per image");
    }
    const auto images = ni / tokens_per_image;

    std::vector<std::size_t> q_rows;
    std::vector<std::size_t> kv_rows;
    ops::AttentionLayout layout;
    layout.heads = heads_;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto [img, pr] = pairs[i];
        if (img >= images || pr >= prompts.offsets.size()) throw InputError("cross-attention pair out of range");
        const auto off = prompts.offsets[pr];
        const auto valid = prompts.eos_positions[pr] + 1;
        q_rows.push_back(off + prompts.eos_positions[pr]);
        const auto begin = kv_rows.size();
        for (std::size_t t = 0; t < tokens_per_image; ++t) kv_rows.push_back(img * tokens_per_image + t);
        for (std::size_t t = 0; t < valid; ++t) kv_rows.push_back(ni + off + t);
        layout.segments.push_back({i, 1, begin, kv_rows.size() - begin});
    }
    const auto src = ops::concat({image_tokens, prompts.tokens}, 0);
    const auto q = linear_layer(p, prefix_ + ".q", ops::gather_rows(prompts.tokens, q_rows));
    const auto k = ops::gather_rows(linear_layer(p, prefix_ + ".k", src), kv_rows);
    const auto v = ops::gather_rows(linear_layer(p, prefix_ + ".v", src), kv_rows);
    return linear_layer(p, prefix_ + ".o", ops::attention(q, k, v, layout));
}

// ---------------------------------------------------------------------------

void init_ensemble(TensorMap& params, std::size_t dim, Rng& rng) {
    init_linear(params, "ensemble.fc1", 2 * dim, dim, rng);
    init_linear(params, "ensemble.fc2", dim, dim, rng);
}

Var ensemble_explicit(const Binder& p, const Var& f_c, const Var& f_v) {
    const auto& c = f_c.value();
    const auto& v = f_v.value();
    if (c.rank() != 2 || c.shape() != v.shape()) {
        throw InputError("ensemble inputs differ in shape: " + shape_str(c.shape()) + " vs " + shape_str(v.shape()));
    }
    const auto h = ops::gelu(linear_layer(p, "ensemble.fc1", ops::concat({f_c, f_v}, 1)));
    return linear_layer(p, "ensemble.fc2", h);
}

void init_fusion(TensorMap& params, std::size_t dim, std::size_t hidden, std::size_t depth, std::size_t classes,
                 Rng& rng) {
    Tensor cls({1, dim});
    for (auto& x : cls.data()) x = rng.normal(0.0, 1.0);
    params.insert_or_assign("fusion.cls", std::move(cls));
    for (std::size_t l = 0; l < depth; ++l) {
        init_transformer_block(params, "fusion.block" + std::to_string(l), dim, hidden, rng);
    }
    init_layer_norm(params, "fusion.ln", dim);
    init_linear(params, "fusion.head", dim, classes, rng);
}

FusionOutput fuse_multimodal(const Binder& p, const std::optional<Var>& f_e, const Var& image_tokens,
                             std::size_t tokens_per_image, std::size_t heads, std::size_t depth) {
    const auto& iv = image_tokens.value();
    if (iv.rank() != 2 || tokens_per_image == 0 || iv.dim(0) % tokens_per_image != 0) {
        throw InputError("image tokens " + shape_str(iv.shape()) + " are not whole images");
    }
    const auto dim = iv.dim(1);
    const auto n = iv.dim(0) / tokens_per_image;
    const auto cls = p("fusion.cls");
    if (cls.value().dim(1) != dim) throw InputError("fusion CLS width does not match image tokens");

    std::vector<Var> parts{cls};
    std::size_t image_base = 1;
    if (f_e) {
        const auto& ev = f_e->value();
        if (ev.rank() != 2 || ev.dim(0) != n || ev.dim(1) != dim) {
            throw InputError("explicit feature " + shape_str(ev.shape()) + " does not match " + std::to_string(n) +
                             " samples of width " + std::to_string(dim));
        }
        parts.push_back(*f_e);
        image_base += n;
    }
    parts.push_back(image_tokens);
    const auto pool = ops::concat(std::span<const Var>(parts), 0);

    const std::size_t seq_len = 1 + (f_e ? 1 : 0) + tokens_per_image;
    std::vector<std::size_t> order;
    order.reserve(n * seq_len);
    ops::AttentionLayout layout;
    layout.heads = heads;
    for (std::size_t s = 0; s < n; ++s) {
        layout.segments.push_back({order.size(), seq_len, order.size(), seq_len});
        order.push_back(0);
        if (f_e) order.push_back(1 + s);
        for (std::size_t t = 0; t < tokens_per_image; ++t) order.push_back(image_base + s * tokens_per_image + t);
    }
    auto x = ops::gather_rows(pool, order);
    for (std::size_t l = 0; l < depth; ++l) x = transformer_block(p, "fusion.block" + std::to_string(l), x, layout);
    x = layer_norm_layer(p, "fusion.ln", x);

    std::vector<std::size_t> cls_rows(n);
    for (std::size_t s = 0; s < n; ++s) cls_rows[s] = s * seq_len;
    return {x, ops::gather_rows(x, cls_rows), seq_len};
}

// ---------------------------------------------------------------------------

void init_projections(TensorMap& params, std::size_t dim, Rng& rng) {
    init_linear(params, "proj.m", dim, dim, rng);
    init_linear(params, "proj.p", dim, dim, rng);
}

Var project_image(const Binder& p, const Var& m, const SimilarityConfig& cfg) {
    const auto u = linear_layer(p, "proj.m", m);
    return cfg.normalize ? ops::l2_normalize(u) : u;
}

Var project_prompt(const Binder& p, const Var& e, const SimilarityConfig& cfg) {
    const auto u = linear_layer(p, "proj.p", e);
    return cfg.normalize ? ops::l2_normalize(u) : u;
}

Var similarity_matrix(const Binder& p, const Var& m, const Var& e, const SimilarityConfig& cfg) {
    if (!(cfg.tau > 0.0)) throw InputError("similarity temperature must be positive");
    const auto& mv = m.value();
    const auto& ev = e.value();
    if (mv.rank() != 2 || ev.rank() != 2 || mv.dim(1) != ev.dim(1)) {
        throw InputError("similarity inputs differ in width: " + shape_str(mv.shape()) + " vs " +
                         shape_str(ev.shape()));
    }
    const auto s = ops::matmul_nt(project_image(p, m, cfg), project_prompt(p, e, cfg));
    return cfg.tau == 1.0 ? s : ops::scale(s, 1.0 / cfg.tau);
}

double similarity(const Binder& p, const Tensor& m, const Tensor& e, const SimilarityConfig& cfg) {
    if (m.size() != e.size()) throw InputError("similarity inputs differ in length");
    auto& tape = p.tape();
    const auto mv = tape.constant(m.reshaped({1, m.size()}));
    const auto ev = tape.constant(e.reshaped({1, e.size()}));
    return similarity_matrix(p, mv, ev, cfg).value()[0];
}

AlignmentLossBundle loss_align(const Var& l_cls, const Var& l_m2p, const Var& l_p2m, const Var& l_m2pce) {
    const std::pair<const char*, const Var*> parts[] = {
        {"l_cls", &l_cls}, {"l_m2p", &l_m2p}, {"l_p2m", &l_p2m}, {"l_m2pce", &l_m2pce}};
    for (const auto& [name, v] : parts) {
        const auto& t = v->value();
        if (t.size() != 1) throw InvariantError(std::string(name) + " is not a scalar");
        if (!(t[0] >= 0.0)) throw InvariantError(std::string(name) + " is negative: " + std::to_string(t[0]));
    }
    const auto total = ops::add(ops::add(ops::add(l_cls, l_m2p), l_p2m), l_m2pce);
    return {l_cls, l_m2p, l_p2m, l_m2pce, total};
}

}  // namespace mpreid
