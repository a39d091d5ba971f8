// SPDX-License-Identifier: Apache-2.0
#include "mpreid/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "mpreid/archive.hpp"
#include "mpreid/errors.hpp"

namespace mpreid {

namespace {

constexpr std::size_t kEmbedChunk = 64;

Tensor averaging_matrix(std::size_t n, std::size_t group) {
    Tensor a({n, n * group}, 0.0);
    const double w = 1.0 / static_cast<double>(group);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < group; ++j) a.at(i, i * group + j) = w;
    }
    return a;
}

// Contrastive terms over K sub-batches holding one sample per identity, so
// every off-diagonal pair belongs to another person.
// Sub-batch k pairs image rows j*K + k with prompt rows j*K + (k + offset) % K.
std::pair<Var, Var> contrastive_pairs(const Binder& p, const Var& f_m, const Var& f_p, const TripletBatch& batch,
                                      const SimilarityConfig& sim, std::size_t offset = 0) {
    Var m2p;
    Var p2m;
    for (std::size_t k = 0; k < batch.k; ++k) {
        std::vector<std::size_t> rows(batch.s);
        std::vector<std::size_t> prompt_rows(batch.s);
        for (std::size_t j = 0; j < batch.s; ++j) {
            rows[j] = j * batch.k + k;
            prompt_rows[j] = j * batch.k + (k + offset) % batch.k;
        }
        const auto s = similarity_matrix(p, ops::gather_rows(f_m, rows), ops::gather_rows(f_p, prompt_rows), sim);
        const auto a = loss_m2p(s);
        const auto b = loss_p2m(s);
        m2p = k == 0 ? a : ops::add(m2p, a);
        p2m = k == 0 ? b : ops::add(p2m, b);
    }
    const double w = 1.0 / static_cast<double>(batch.k);
    return {ops::scale(m2p, w), ops::scale(p2m, w)};
}

std::string losses_str(const StepLosses& l) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "l_cls=%g l_m2p=%g l_p2m=%g l_m2pce=%g l_id=%g l_tri=%g total=%g", l.l_cls,
                  l.l_m2p, l.l_p2m, l.l_m2pce, l.l_id, l.l_tri, l.total);
    return buf;
}

bool finite(const StepLosses& l) {
    return std::isfinite(l.l_cls) && std::isfinite(l.l_m2p) && std::isfinite(l.l_p2m) && std::isfinite(l.l_m2pce) &&
           std::isfinite(l.l_id) && std::isfinite(l.l_tri) && std::isfinite(l.total);
}

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
    auto p = checkpoint;
    p += ".json";
    return p;
}

}  // namespace

Strategy Strategy::parse(const std::string& tag) {
    Strategy s;
    s.tag = tag;
    if (tag == "LP") {
    } else if (tag == "LP+AW") {
        s.cp = Source::attribute_words;
    } else if (tag == "LP+GC") {
        s.cp = Source::caption;
    } else if (tag == "LP+VP") {
        s.vqa = true;
    } else if (tag == "LP+CP") {
        s.cp = Source::chatgpt;
    } else if (tag == "LP+CP&VP") {
        s.cp = Source::chatgpt;
        s.vqa = true;
    } else {
        throw ConfigError("unknown prompt strategy \"" + tag + "\" (expected LP, LP+AW, LP+GC, LP+VP, LP+CP or LP+CP&VP)");
    }
    return s;
}

TripletBatch sample_pk_batch(std::span<const std::size_t> labels, std::size_t s, std::size_t k, Rng& rng) {
    if (s == 0 || k == 0) throw InputError("PK batch needs S >= 1 and K >= 1");
    std::map<std::size_t, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
    if (by_label.size() < s) {
        throw InputError("PK batch needs " + std::to_string(s) + " identities, dataset has " +
                         std::to_string(by_label.size()));
    }
    std::vector<std::size_t> ids;
    ids.reserve(by_label.size());
    for (const auto& [label, idx] : by_label) ids.push_back(label);

    TripletBatch b;
    b.s = s;
    b.k = k;
    for (auto pick : rng.choose(ids.size(), s)) {
        const auto label = ids[pick];
        const auto& pool = by_label[label];
        b.identities.push_back(label);
        if (pool.size() >= k) {
            for (auto j : rng.choose(pool.size(), k)) {
                b.indices.push_back(pool[j]);
                b.labels.push_back(label);
            }
        } else {
            for (std::size_t j = 0; j < k; ++j) {
                b.indices.push_back(pool[rng.index(pool.size())]);
                b.labels.push_back(label);
            }
        }
    }
    return b;
}

std::map<std::int64_t, std::string> load_captions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open caption file " + path.string());
    std::map<std::int64_t, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto id = j.at("id").get<std::int64_t>();
            if (!out.emplace(id, j.at("caption").get<std::string>()).second) {
                throw ParseError("duplicate caption for identity " + std::to_string(id), lineno);
            }
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), lineno);
        }
    }
    return out;
}

TrainingSet build_training_set(const SyntheticDataset& data, const std::vector<PromptSet>& prompts,
                               const Vocabulary& vocab, const Strategy& strategy, std::size_t context_length,
                               const std::map<std::int64_t, std::string>* captions) {
    if (data.train.empty()) throw InputError("training split is empty");
    TrainingSet set;
    std::set<std::int64_t> ids;
    for (const auto& r : data.train) ids.insert(r.identity);
    set.class_identity.assign(ids.begin(), ids.end());
    std::map<std::int64_t, std::size_t> class_of;
    for (std::size_t c = 0; c < set.class_identity.size(); ++c) class_of[set.class_identity[c]] = c;

    for (const auto& r : data.train) {
        set.images.push_back(r.image);
        set.labels.push_back(class_of.at(r.identity));
    }

    std::map<std::int64_t, const PromptSet*> by_id;
    for (const auto& p : prompts) by_id[p.identity] = &p;
    std::map<std::int64_t, const AttributeRecord*> attrs;
    for (const auto& r : data.train) attrs.emplace(r.identity, &r.attributes);

    auto encode = [&](const std::string& text, std::int64_t id) {
        const auto n = vocab.encode_ids(text).size();
        if (n + 2 > context_length) {
            set.warnings.push_back("identity " + std::to_string(id) + ": prompt truncated from " + std::to_string(n) +
                                   " tokens");
        }
        return vocab.encode(text, context_length);
    };

    set.prompts.resize(set.classes());
    for (std::size_t c = 0; c < set.classes(); ++c) {
        const auto id = set.class_identity[c];
        const PromptSet* ps = nullptr;
        if (strategy.cp == Strategy::Source::chatgpt || strategy.vqa) {
            auto it = by_id.find(id);
            if (it == by_id.end()) {
                throw ConfigError("strategy " + strategy.tag + ": prompt dataset has no entry for identity " +
                                  std::to_string(id));
            }
            ps = it->second;
        }
        auto& cp = set.prompts[c];
        switch (strategy.cp) {
            case Strategy::Source::none:
                break;
            case Strategy::Source::chatgpt:
                cp.cp = encode(ps->chatgpt, id);
                break;
            case Strategy::Source::attribute_words: {
                std::string joined;
                for (const auto& w : attribute_words(*attrs.at(id))) joined += (joined.empty() ? "" : ", ") + w;
                cp.cp = encode(joined, id);
                break;
            }
            case Strategy::Source::caption: {
                if (captions == nullptr) {
                    throw ConfigError("strategy " + strategy.tag + " needs a caption file (paths.captions)");
                }
                auto it = captions->find(id);
                if (it == captions->end()) {
                    throw ConfigError("strategy " + strategy.tag + ": caption file has no entry for identity " +
                                      std::to_string(id));
                }
                cp.cp = encode(it->second, id);
                break;
            }
        }
        if (strategy.vqa) {
            if (ps->vqa.size() != kVqaPromptCount) {
                throw ConfigError("strategy " + strategy.tag + ": identity " + std::to_string(id) +
                                  " lacks 7 VQA prompts");
            }
            for (const auto& v : ps->vqa) cp.vqa.push_back(encode(v, id));
        }
    }
    return set;
}

// ---------------------------------------------------------------------------

StepLosses ForwardResult::values() const {
    StepLosses l;
    l.l_cls = align.l_cls.value().item();
    l.l_m2p = align.l_m2p.value().item();
    l.l_p2m = align.l_p2m.value().item();
    l.l_m2pce = align.l_m2pce.value().item();
    l.l_id = l_id.value().item();
    l.l_tri = l_tri.value().item();
    l.total = total.value().item();
    return l;
}

MpReidModel::MpReidModel(const RunConfig& config, const Vocabulary& vocab, std::size_t classes)
    : config_(config),
      strategy_(Strategy::parse(config.strategy)),
      classes_(classes),
      image_(config.encoder),
      text_(config.encoder, vocab.size(), vocab.slot_count()),
      bank_(vocab, classes, config.train.implicit_tokens, config.encoder.context_length),
      cross_cp_(config.train.cross_attention == "separate" ? "cross.cp" : "cross", config.encoder.embed_dim,
                config.encoder.heads),
      cross_vp_(config.train.cross_attention == "separate" ? "cross.vp" : "cross", config.encoder.embed_dim,
                config.encoder.heads) {
    if (classes_ < 2) throw InputError("training needs at least two identities");
}

TensorMap MpReidModel::init(std::uint64_t seed) const {
    Rng rng(derive_seed(seed, {0x1417ull}));
    const auto d = config_.encoder.embed_dim;
    TensorMap params;
    image_.init(params, rng);
    text_.init(params, rng);
    bank_.init(params, d, rng);
    cross_cp_.init(params, rng);
    if (cross_vp_.prefix() != cross_cp_.prefix()) cross_vp_.init(params, rng);
    init_ensemble(params, d, rng);
    if (config_.train.vqa_pooling == "concat") init_linear(params, "vqa_pool", kVqaPromptCount * d, d, rng);
    init_fusion(params, d, config_.encoder.mlp_hidden(), config_.train.fusion_depth, classes_, rng);
    init_projections(params, d, rng);
    init_linear(params, "id_head", d, classes_, rng);
    return params;
}

Var MpReidModel::pooled_vqa(const Binder& p, const Var& attended, std::size_t n) const {
    if (config_.train.vqa_pooling == "concat") {
        const auto d = config_.encoder.embed_dim;
        return linear_layer(p, "vqa_pool", ops::reshape(attended, {n, kVqaPromptCount * d}));
    }
    return ops::matmul(p.tape().constant(averaging_matrix(n, kVqaPromptCount)), attended);
}

ForwardResult MpReidModel::forward(const Binder& p, const TrainingSet& data, TripletBatch& batch) const {
    const auto n = batch.indices.size();
    const auto d = config_.encoder.embed_dim;
    const auto& lc = config_.loss;
    const auto sim = config_.similarity();
    auto& tape = p.tape();

    std::vector<const Tensor*> images;
    images.reserve(n);
    for (auto i : batch.indices) images.push_back(&data.images.at(i));
    const auto img = image_.encode(p, images);
    const auto& f_m = img.cls;

    std::map<std::size_t, std::size_t> column;
    for (std::size_t j = 0; j < batch.identities.size(); ++j) column[batch.identities[j]] = j;

    ForwardResult out;
    out.f_m = f_m;
    const auto zero = tape.constant(Tensor::scalar(0.0));
    Var l_m2p = zero;
    Var l_p2m = zero;

    if (strategy_.has_explicit()) {
        std::vector<TokenSequence> seqs;
        std::map<std::size_t, std::size_t> cp_index;
        std::map<std::size_t, std::size_t> vqa_index;
        for (auto label : batch.identities) {
            const auto& cp = data.prompts.at(label);
            if (strategy_.cp != Strategy::Source::none) {
                if (!cp.cp) throw ConfigError("strategy " + strategy_.tag + ": missing explicit prompt");
                cp_index[label] = seqs.size();
                seqs.push_back(*cp.cp);
            }
            if (strategy_.vqa) {
                if (cp.vqa.size() != kVqaPromptCount) {
                    throw ConfigError("strategy " + strategy_.tag + ": missing VQA prompts");
                }
                vqa_index[label] = seqs.size();
                seqs.insert(seqs.end(), cp.vqa.begin(), cp.vqa.end());
            }
        }
        const auto text = text_.encode(p, seqs);
        Var f_c = tape.constant(Tensor({n, d}, 0.0));
        Var f_v = f_c;
        if (strategy_.cp != Strategy::Source::none) {
            std::vector<std::pair<std::size_t, std::size_t>> pairs;
            for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(i, cp_index.at(batch.labels[i]));
            f_c = cross_cp_.attend_pooled(p, img.tokens, img.tokens_per_image, text, pairs);
        }
        if (strategy_.vqa) {
            std::vector<std::pair<std::size_t, std::size_t>> pairs;
            for (std::size_t i = 0; i < n; ++i) {
                const auto base = vqa_index.at(batch.labels[i]);
                for (std::size_t j = 0; j < kVqaPromptCount; ++j) pairs.emplace_back(i, base + j);
            }
            f_v = pooled_vqa(p, cross_vp_.attend_pooled(p, img.tokens, img.tokens_per_image, text, pairs), n);
        }
        out.f_e = ensemble_explicit(p, f_c, f_v);
        Var target = *out.f_e;
        if (lc.align_target == "prompt") {
            Var t_c = tape.constant(Tensor({n, d}, 0.0));
            Var t_v = t_c;
            if (strategy_.cp != Strategy::Source::none) {
                std::vector<std::size_t> rows(n);
                for (std::size_t i = 0; i < n; ++i) rows[i] = cp_index.at(batch.labels[i]);
                t_c = ops::gather_rows(text.eos, rows);
            }
            if (strategy_.vqa) {
                std::vector<std::size_t> rows;
                rows.reserve(n * kVqaPromptCount);
                for (std::size_t i = 0; i < n; ++i) {
                    const auto base = vqa_index.at(batch.labels[i]);
                    for (std::size_t j = 0; j < kVqaPromptCount; ++j) rows.push_back(base + j);
                }
                t_v = pooled_vqa(p, ops::gather_rows(text.eos, rows), n);
            }
            target = ensemble_explicit(p, t_c, t_v);
        }
        std::tie(l_m2p, l_p2m) =
            contrastive_pairs(p, f_m, target, batch, sim, lc.align_pairing == "sibling" ? 1 : 0);
    }

    const auto fused = fuse_multimodal(p, out.f_e, img.tokens, img.tokens_per_image, config_.encoder.heads,
                                       config_.train.fusion_depth);
    out.f_cls = fused.cls;
    const auto cls_logits = linear_layer(p, "fusion.head", fused.cls);
    Var l_cls = loss_cls(cls_logits, smoothed_targets(batch.labels, classes_, lc.epsilon));

    const auto implicit = text_.encode_implicit(p, bank_, batch.identities);
    const auto s_l = similarity_matrix(p, f_m, implicit.eos, sim);
    std::vector<std::size_t> cols(n);
    for (std::size_t i = 0; i < n; ++i) cols[i] = column.at(batch.labels[i]);
    Var l_m2pce = loss_m2pce(s_l, smoothed_targets(cols, batch.identities.size(), lc.epsilon));

    if (lc.contrastive_on_implicit) {
        const auto [m2p, p2m] = contrastive_pairs(p, f_m, ops::gather_rows(implicit.eos, cols), batch, sim);
        l_m2p = ops::add(l_m2p, m2p);
        l_p2m = ops::add(l_p2m, p2m);
    }

    Var l_id = loss_id(linear_layer(p, "id_head", f_m), batch.labels, lc.epsilon);
    const auto dist = ops::pairwise_distance(f_m);
    batch.mining = mine_batch_hard(dist.value(), batch.labels);
    Var l_tri = loss_triplet_batch_hard(dist, batch.labels, lc.margin);

    if (lc.reduction == "sum") {
        const auto scale = static_cast<double>(n);
        l_cls = ops::scale(l_cls, scale);
        l_m2p = ops::scale(l_m2p, scale);
        l_p2m = ops::scale(l_p2m, scale);
        l_m2pce = ops::scale(l_m2pce, scale);
        l_id = ops::scale(l_id, scale);
        l_tri = ops::scale(l_tri, scale);
    }

    out.align = loss_align(l_cls, l_m2p, l_p2m, l_m2pce);
    out.l_id = l_id;
    out.l_tri = l_tri;
    out.l_reid = loss_reid(l_id, l_tri, lc.lambda_id, lc.lambda_tri);
    out.total = total_loss(out.align.l_align, out.l_reid);
    return out;
}

Tensor MpReidModel::embed(const TensorMap& params, std::span<const Tensor* const> images) const {
    const auto d = config_.encoder.embed_dim;
    Tensor out({images.size(), d});
    for (std::size_t begin = 0; begin < images.size(); begin += kEmbedChunk) {
        const auto count = std::min(kEmbedChunk, images.size() - begin);
        Tape tape;
        Binder p(tape, params, false);
        const auto enc = image_.encode(p, images.subspan(begin, count));
        const auto& v = enc.cls.value();
        std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * d));
    }
    return out;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    TensorMap archive;
    for (const auto& [name, t] : state.params) archive.emplace("param/" + name, t);
    for (auto& [name, t] : state.optimizer.state()) archive.emplace(name, t);
    archive.emplace("state.step", Tensor::scalar(static_cast<double>(state.step)));
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_archive(path, archive);

    nlohmann::json m;
    m["step"] = state.step;
    m["seed"] = state.seed;
    m["config_hash"] = state.config_hash;
    m["optimizer"] = "adam";
    m["optimizer_state"] = "adam.m/*, adam.v/*, adam.t entries of " + path.filename().string();
    m["version"] = MPREID_VERSION;
    write_file_atomic(manifest_path(path), m.dump(2) + "\n");
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    TrainState st;
    const auto archive = load_archive(path);
    std::ifstream in(manifest_path(path));
    if (!in) throw InputError("checkpoint manifest missing for " + path.string());
    try {
        const auto m = nlohmann::json::parse(in);
        st.step = m.at("step").get<std::size_t>();
        st.seed = m.at("seed").get<std::uint64_t>();
        st.config_hash = m.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
        throw InputError("malformed checkpoint manifest: " + std::string(ex.what()));
    }
    TensorMap adam;
    for (const auto& [name, t] : archive) {
        if (name.starts_with("param/")) {
            st.params.emplace(name.substr(6), t);
        } else if (name.starts_with("adam.")) {
            adam.emplace(name, t);
        }
    }
    st.optimizer.load_state(adam);
    return st;
}

std::string format_metrics_row(std::size_t step, const StepLosses& l) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step, l.l_cls, l.l_m2p, l.l_p2m,
                  l.l_m2pce, l.l_id, l.l_tri, l.total);
    return buf;
}

TrainResult train(const RunConfig& config, const MpReidModel& model, const TrainingSet& data,
                  const TrainOptions& options) {
    const auto& tc = config.train;
    TrainResult result;
    auto& st = result.state;
    st.seed = config.seed;
    st.config_hash = config.hash();

    std::vector<std::string> rows;
    if (!options.resume_from.empty()) {
        st = load_checkpoint(options.resume_from);
        if (st.config_hash != config.hash()) {
            throw ConfigError("checkpoint " + options.resume_from.string() + " was written by config " +
                              st.config_hash + ", not " + config.hash());
        }
        if (!options.metrics_path.empty() && std::filesystem::exists(options.metrics_path)) {
            std::ifstream in(options.metrics_path);
            std::string line;
            std::getline(in, line);
            while (rows.size() < st.step && std::getline(in, line)) rows.push_back(line);
        }
    } else {
        st.params = model.init(config.seed);
    }

    auto flush_metrics = [&] {
        if (options.metrics_path.empty()) return;
        std::string text = std::string(kMetricsHeader) + "\n";
        for (const auto& r : rows) text += r + "\n";
        if (options.metrics_path.has_parent_path()) std::filesystem::create_directories(options.metrics_path.parent_path());
        write_file_atomic(options.metrics_path, text);
    };

    for (std::size_t step = st.step; step < tc.steps; ++step) {
        const double lr = scheduled_lr(tc.lr, step, tc.steps, tc.warmup_fraction);
        Rng rng(derive_seed(config.seed, {0x57E9ull, step}));
        auto batch = sample_pk_batch(data.labels, tc.identities_per_batch, tc.samples_per_identity, rng);

        StepLosses losses;
        GradientMap grads;
        {
            Tape tape;
            Binder p(tape, st.params);
            ForwardResult fw;
            try {
                fw = model.forward(p, data, batch);
            } catch (const NumericError& ex) {
                throw TrainingAbort("non-finite value at step " + std::to_string(step) + ": " + ex.what(), step);
            }
            losses = fw.values();
            if (!finite(losses)) {
                throw TrainingAbort("non-finite loss at step " + std::to_string(step) + ": " + losses_str(losses), step);
            }
            try {
                grads = tape.backward(fw.total);
            } catch (const NumericError& ex) {
                throw TrainingAbort("non-finite gradient at step " + std::to_string(step) + " (" + losses_str(losses) +
                                        "): " + ex.what(),
                                    step);
            }
        }
        for (const auto& [name, g] : grads) {
            if (!g.all_finite()) {
                throw TrainingAbort("non-finite gradient for " + name + " at step " + std::to_string(step) + " (" +
                                        losses_str(losses) + ")",
                                    step);
            }
        }
        st.optimizer.step(st.params, grads, lr);
        st.step = step + 1;

        rows.push_back(format_metrics_row(step, losses));
        result.history.push_back(losses);
        if (options.on_step) options.on_step(step, losses);

        if (tc.checkpoint_every > 0 && !options.checkpoint_path.empty() && st.step % tc.checkpoint_every == 0 &&
            st.step < tc.steps) {
            auto periodic = options.checkpoint_path;
            periodic += ".step" + std::to_string(st.step);
            save_checkpoint(periodic, st);
            flush_metrics();
        }
    }
    flush_metrics();
    if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, st);
    return result;
}

}  // namespace mpreid
