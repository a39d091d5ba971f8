// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion. Arguments select a
// subset of criteria by number; no arguments run all of them.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mpreid/errors.hpp"
#include "mpreid/evaluation.hpp"
#include "mpreid/losses.hpp"
#include "support.hpp"

using namespace mpreid;
using testsupport::gradient_error;
using testsupport::LossBuilder;
using testsupport::param_gradient_error;
using testsupport::random_tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            if (!detail.empty()) detail += "; ";
            detail += what;
        }
    }
};

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mpreid_acceptance_" + std::to_string(Clock::now().time_since_epoch().count()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Var probe(Tape& tape, const Var& out, std::uint64_t seed) {
    return ops::sum(ops::mul(out, tape.constant(random_tensor(out.value().shape(), seed + 1000))));
}

Tensor one_hot_rows(const std::vector<std::size_t>& labels, std::size_t classes, double eps) {
    return smoothed_targets(labels, classes, eps);
}

EncoderConfig small_encoder() {
    EncoderConfig c;
    c.embed_dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.patch_size = 4;
    c.image_size = 8;
    c.context_length = 16;
    c.mlp_ratio = 2;
    return c;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome criterion_gradients() {
    Outcome out;
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::size_t checks = 0;
    auto record = [&](const std::string& name, double err) {
        ++checks;
        worst = std::max(worst, err);
        out.require(err < 1e-4, name + " error " + fmt("%.3g", err));
    };

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const std::uint64_t s = seed * 31 + 7;
        std::mt19937_64 gen(s);
        const std::size_t n = 3 + seed % 3;
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = gen() % n;
        const auto q = one_hot_rows(labels, n, 0.1);

        record("L_cls", gradient_error([&](Tape&, const std::vector<Var>& v) { return loss_cls(v[0], q); },
                                       {random_tensor({n, n}, s, -2, 2)}));
        record("L_m2p", gradient_error([](Tape&, const std::vector<Var>& v) { return loss_m2p(v[0]); },
                                       {random_tensor({n, n}, s + 1, -2, 2)}));
        record("L_p2m", gradient_error([](Tape&, const std::vector<Var>& v) { return loss_p2m(v[0]); },
                                       {random_tensor({n, n}, s + 2, -2, 2)}));
        record("L_m2pce", gradient_error([&](Tape&, const std::vector<Var>& v) { return loss_m2pce(v[0], q); },
                                         {random_tensor({n, n}, s + 3, -2, 2)}));
        record("L_id", gradient_error(
                           [&](Tape&, const std::vector<Var>& v) { return loss_id(v[0], labels, 0.1); },
                           {random_tensor({n, n + 2}, s + 4, -2, 2)}));
        // Batch-hard triplet on pairwise distances of embeddings, two rows per label.
        std::vector<std::size_t> pk;
        for (std::size_t i = 0; i < 3; ++i) pk.insert(pk.end(), {i, i});
        record("L_triplet",
               gradient_error(
                   [&](Tape&, const std::vector<Var>& v) {
                       return loss_triplet_batch_hard(ops::pairwise_distance(v[0]), pk, 0.3 + 0.5 * (seed % 3));
                   },
                   {random_tensor({6, 4}, s + 5)}, 1e-6));

        // Layer types.
        TensorMap params;
        Rng rng(s);
        init_linear(params, "lin", 4, 3, rng);
        init_layer_norm(params, "ln", 4);
        params.at("ln.g") = random_tensor({4}, s + 6);
        params.at("ln.b") = random_tensor({4}, s + 7);
        init_transformer_block(params, "blk", 4, 8, rng);
        const auto x = random_tensor({5, 4}, s + 8);
        record("linear", param_gradient_error(
                             [&](const Binder& p) { return probe(p.tape(), linear_layer(p, "lin", p.tape().constant(x)), s); },
                             params, {"lin.w", "lin.b"}, 1e-5));
        record("layer_norm",
               param_gradient_error(
                   [&](const Binder& p) { return probe(p.tape(), layer_norm_layer(p, "ln", p.tape().constant(x)), s); },
                   params, {"ln.g", "ln.b"}, 1e-5));
        record("transformer_block",
               param_gradient_error(
                   [&](const Binder& p) {
                       const ops::AttentionLayout layout{{{0, 5, 0, 5}}, 2, {}};
                       return probe(p.tape(), transformer_block(p, "blk", p.tape().constant(x), layout), s);
                   },
                   params,
                   {"blk.ln1.g", "blk.attn.q.w", "blk.attn.k.w", "blk.attn.v.w", "blk.attn.o.w", "blk.ln2.b",
                    "blk.mlp.fc1.w", "blk.mlp.fc2.w"},
                   1e-5));

        const auto enc_cfg = small_encoder();
        ImageEncoder image(enc_cfg);
        TensorMap ip;
        image.init(ip, rng);
        const auto img = random_tensor({8, 8, 3}, s + 9, 0.0, 1.0);
        record("image_encoder", param_gradient_error(
                                    [&](const Binder& p) { return probe(p.tape(), image.encode(p, img).cls, s); }, ip,
                                    {"image.patch.w", "image.cls", "image.block0.attn.v.w", "image.ln_post.g"}, 1e-5,
                                    12));

        CrossAttentionBlock cross("cross", 8, 2);
        TensorMap cp;
        cross.init(cp, rng);
        const auto prompt = random_tensor({3, 8}, s + 10);
        const auto itok = random_tensor({5, 8}, s + 11);
        record("cross_attention",
               param_gradient_error(
                   [&](const Binder& p) {
                       auto& t = p.tape();
                       return probe(t, cross.attend(p, t.constant(prompt), t.constant(itok)), s);
                   },
                   cp, {"cross.q.w", "cross.k.w", "cross.v.w", "cross.o.w"}, 1e-5, 12));

        TensorMap ep;
        init_ensemble(ep, 8, rng);
        record("ensemble", gradient_error(
                               [&](Tape& t, const std::vector<Var>& v) {
                                   Binder b(t, ep, false);
                                   return probe(t, ensemble_explicit(b, v[0], v[1]), s);
                               },
                               {random_tensor({2, 8}, s + 12), random_tensor({2, 8}, s + 13)}));

        TensorMap fp;
        init_fusion(fp, 8, 16, 1, 3, rng);
        const auto fe = random_tensor({2, 8}, s + 14);
        const auto ftok = random_tensor({6, 8}, s + 15);
        record("fusion", param_gradient_error(
                             [&](const Binder& p) {
                                 auto& t = p.tape();
                                 const auto o = fuse_multimodal(p, t.constant(fe), t.constant(ftok), 3, 2, 1);
                                 return probe(t, o.cls, s);
                             },
                             fp, {"fusion.cls", "fusion.block0.attn.q.w", "fusion.block0.mlp.fc1.w", "fusion.ln.g"},
                             1e-5, 12));

        TensorMap pp;
        init_projections(pp, 8, rng);
        const auto pm = random_tensor({3, 8}, s + 16);
        const auto pe = random_tensor({3, 8}, s + 17);
        record("similarity", param_gradient_error(
                                 [&](const Binder& p) {
                                     auto& t = p.tape();
                                     return loss_m2p(similarity_matrix(p, t.constant(pm), t.constant(pe),
                                                                       SimilarityConfig{true, 0.5}));
                                 },
                                 pp, {"proj.m.w", "proj.p.w"}, 1e-5, 12));
    }

    // Text encoder and implicit prompts on a small vocabulary.
    const auto enc_cfg = small_encoder();
    SyntheticDatasetSpec spec;
    spec.identities = 6;
    spec.samples_per_identity = 2;
    spec.image_size = 8;
    const auto data = generate_synthetic(spec);
    const auto prompts = build_prompt_dataset(data.identities, QuestionBank::defaults(), nullptr, {}).sets;
    const auto vocab = Vocabulary::build(prompt_corpus(prompts), 400);
    TextEncoder text(enc_cfg, vocab.size(), vocab.slot_count());
    ImplicitPromptBank bank(vocab, 6, 2, enc_cfg.context_length);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TensorMap tp;
        Rng rng(seed + 100);
        text.init(tp, rng);
        bank.init(tp, enc_cfg.embed_dim, rng);
        const std::vector<TokenSequence> seqs = {vocab.encode(prompts[seed % 6].vqa[0], enc_cfg.context_length)};
        record("text_encoder", param_gradient_error(
                                   [&](const Binder& p) { return probe(p.tape(), text.encode(p, seqs).eos, seed); },
                                   tp, {"text.token_embedding", "text.block0.attn.k.w", "text.ln_final.g"}, 1e-5, 12));
        const std::vector<std::size_t> ids = {seed % 6, (seed + 1) % 6};
        record("implicit_prompt",
               param_gradient_error(
                   [&](const Binder& p) { return probe(p.tape(), text.encode_implicit(p, bank, ids).eos, seed); }, tp,
                   {ImplicitPromptBank::kParam, "text.block0.mlp.fc1.w"}, 1e-5, 12));
    }

    const double secs = seconds_since(t0);
    out.require(secs < 60.0, "took " + fmt("%.1f", secs) + " s");
    out.detail = std::to_string(checks) + " checks, worst relative error " + fmt("%.2e", worst) + ", " +
                 fmt("%.1f", secs) + " s" + (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

// ---------------------------------------------------------------------------
// 2. Loss identities

Outcome criterion_loss_identities() {
    Outcome out;
    double worst_uniform = 0.0;
    for (std::size_t n = 2; n <= 16; ++n) {
        for (double c : {-3.0, 0.0, 0.7, 5.0}) {
            Tape tape;
            const auto s = tape.constant(Tensor({n, n}, c));
            std::vector<std::size_t> labels(n);
            for (std::size_t i = 0; i < n; ++i) labels[i] = (i * 7) % n;
            const auto q = smoothed_targets(labels, n, 0.1);
            const double ln = std::log(static_cast<double>(n));
            for (const auto& v : {loss_m2p(s), loss_p2m(s), loss_m2pce(s, q), loss_cls(s, q)}) {
                worst_uniform = std::max(worst_uniform, std::abs(v.value().item() - ln));
            }
        }
    }
    out.require(worst_uniform <= 1e-9, "uniform similarity off ln N by " + fmt("%.3g", worst_uniform));

    std::size_t transpose_mismatch = 0;
    std::size_t align_mismatch = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t n = 2 + seed % 9;
        const auto m = random_tensor({n, n}, seed, -4, 4);
        Tape tape;
        const auto s = tape.constant(m);
        const auto st = ops::transpose(s);
        if (loss_m2p(s).value().item() != loss_p2m(st).value().item()) ++transpose_mismatch;
        if (loss_p2m(s).value().item() != loss_m2p(st).value().item()) ++transpose_mismatch;

        std::vector<std::size_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = i;
        const auto q = smoothed_targets(labels, n, 0.1);
        const auto cls = loss_cls(tape.constant(random_tensor({n, n}, seed + 1, -2, 2)), q);
        const auto m2p = loss_m2p(s);
        const auto p2m = loss_p2m(s);
        const auto m2pce = loss_m2pce(tape.constant(random_tensor({n, n}, seed + 2, -2, 2)), q);
        const auto bundle = loss_align(cls, m2p, p2m, m2pce);
        const double direct = ((cls.value().item() + m2p.value().item()) + p2m.value().item()) + m2pce.value().item();
        if (bundle.l_align.value().item() != direct) ++align_mismatch;
    }
    out.require(transpose_mismatch == 0, std::to_string(transpose_mismatch) + " transpose mismatches");
    out.require(align_mismatch == 0, std::to_string(align_mismatch) + " L_align mismatches");

    std::mt19937_64 gen(2024);
    std::uniform_real_distribution<double> dist(0.0, 3.0);
    std::size_t triplet_violations = 0;
    for (int i = 0; i < 1000; ++i) {
        const double dp = dist(gen);
        const double dn = dist(gen);
        const double alpha = dist(gen) / 3.0;
        const bool zero = loss_triplet(dp, dn, alpha) == 0.0;
        if (zero != (dn >= dp + alpha)) ++triplet_violations;
    }
    out.require(triplet_violations == 0, std::to_string(triplet_violations) + " triplet violations");
    out.detail = "max |L - ln N| " + fmt("%.2e", worst_uniform) + ", transpose and L_align exact, 1000 triples" +
                 (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

// ---------------------------------------------------------------------------
// 3. Metric oracle

Outcome criterion_metric_oracle() {
    Outcome out;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 gen(seed + 77);
        EmbeddingSet q{random_tensor({50, 16}, seed * 2 + 1), {}, {}};
        EmbeddingSet g{random_tensor({200, 16}, seed * 2 + 2), {}, {}};
        for (int i = 0; i < 50; ++i) {
            q.identities.push_back(static_cast<std::int64_t>(gen() % 40));
            q.cameras.push_back(gen() % 4);
        }
        for (int j = 0; j < 200; ++j) {
            g.identities.push_back(static_cast<std::int64_t>(gen() % 40));
            g.cameras.push_back(gen() % 4);
        }
        const auto m = compute_metrics(rank_gallery(q, g), 10);
        const auto o = testsupport::brute_force_metrics(q.features, g.features, q.identities, g.identities, q.cameras,
                                                        g.cameras, 10);
        worst = std::max(worst, std::abs(m.map - o.map));
        for (std::size_t k = 0; k < 10; ++k) worst = std::max(worst, std::abs(m.cmc[k] - o.cmc[k]));
    }
    out.require(worst <= 1e-12, "difference " + fmt("%.3g", worst));
    out.detail = "20 instances of 50 x 200, max difference " + fmt("%.2e", worst) +
                 (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

// ---------------------------------------------------------------------------
// 4. Directional ablation on the default synthetic dataset

Outcome criterion_directional() {
    Outcome out;
    RunConfig cfg;  // default dataset: 64 identities x 8 samples
    const std::vector<std::uint64_t> seeds = {0, 1, 2};
    const auto data = generate_synthetic(cfg.data);
    PromptBuildOptions po;
    po.implicit_tokens = cfg.train.implicit_tokens;
    const auto prompts = build_prompt_dataset(data.identities, QuestionBank::defaults(), nullptr, po).sets;
    const auto vocab = Vocabulary::build(prompt_corpus(prompts), cfg.prompts.vocab_size);
    const ExperimentInputs inputs{&data, &prompts, &vocab, nullptr};
    out.require(cfg.train.steps <= 2000, "step budget exceeded");

    double mean[2] = {0.0, 0.0};
    const char* rows[2] = {"LP", "LP+CP&VP"};
    std::string detail;
    for (int r = 0; r < 2; ++r) {
        const auto t0 = Clock::now();
        const auto reports = run_ablation(AblationSpec{{rows[r]}}, cfg, seeds, inputs);
        const double secs = seconds_since(t0);
        for (const auto& rep : reports) mean[r] += rep.map / static_cast<double>(reports.size());
        detail += std::string(r ? ", " : "") + rows[r] + " mAP " + fmt("%.4f", mean[r]) + " (";
        for (std::size_t i = 0; i < reports.size(); ++i) detail += (i ? " " : "") + fmt("%.4f", reports[i].map);
        detail += ", " + fmt("%.0f", secs) + " s)";
        out.require(secs < 900.0, std::string(rows[r]) + " took " + fmt("%.0f", secs) + " s");
    }
    const double margin = mean[1] - mean[0];
    out.require(margin >= 0.05, "margin " + fmt("%.4f", margin) + " below 0.05");
    out.detail = detail + ", margin " + fmt("%+.4f", margin) + (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

// ---------------------------------------------------------------------------
// 5. Determinism and resume

RunConfig small_run() {
    RunConfig c;
    c.encoder.embed_dim = 16;
    c.encoder.layers = 1;
    c.encoder.heads = 2;
    c.encoder.patch_size = 8;
    c.encoder.image_size = 16;
    c.encoder.context_length = 40;
    c.encoder.mlp_ratio = 2;
    c.data.identities = 12;
    c.data.samples_per_identity = 4;
    c.data.image_size = 16;
    c.prompts.vocab_size = 400;
    c.train.identities_per_batch = 3;
    c.train.samples_per_identity = 2;
    c.train.steps = 8;
    c.train.checkpoint_every = 4;
    c.seed = 1;
    return c;
}

Outcome criterion_determinism() {
    Outcome out;
    TempDir dir;
    const auto cfg = small_run();
    auto run = [&](const std::string& tag, const TrainOptions& extra) {
        const auto data = generate_synthetic(cfg.data);
        const auto prompts = build_prompt_dataset(data.identities, QuestionBank::defaults(), nullptr, {}).sets;
        const auto vocab = Vocabulary::build(prompt_corpus(prompts), cfg.prompts.vocab_size);
        const auto set = build_training_set(data, prompts, vocab, Strategy::parse(cfg.strategy),
                                            cfg.encoder.context_length);
        const MpReidModel model(cfg, vocab, set.classes());
        TrainOptions opt = extra;
        if (opt.metrics_path.empty()) opt.metrics_path = dir.path / (tag + ".csv");
        return train(cfg, model, set, opt);
    };
    TrainOptions first;
    first.checkpoint_path = dir.path / "a.mpt";
    const auto a = run("a", first);
    const auto b = run("b", {});
    const auto csv_a = read_all(dir.path / "a.csv");
    out.require(!csv_a.empty() && csv_a == read_all(dir.path / "b.csv"), "metrics CSVs differ");

    fs::copy_file(dir.path / "a.csv", dir.path / "resumed.csv");
    TrainOptions resume;
    resume.metrics_path = dir.path / "resumed.csv";
    resume.resume_from = dir.path / "a.mpt.step4";
    const auto rest = run("resumed", resume);
    const bool next_equal = !rest.history.empty() && rest.history.front().total == a.history.at(4).total;
    out.require(next_equal, "next-step loss after resume differs");
    out.require(read_all(dir.path / "resumed.csv") == csv_a, "resumed metrics differ");
    out.detail = "identical metrics over " + std::to_string(a.history.size()) + " steps, step-5 loss after resume " +
                 fmt("%.17g", rest.history.empty() ? std::nan("") : rest.history.front().total) +
                 (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

// ---------------------------------------------------------------------------
// 6. Prompt pipeline

Outcome criterion_prompts() {
    Outcome out;
    SyntheticDatasetSpec spec;
    spec.identities = 100;
    spec.samples_per_identity = 2;
    spec.image_size = 8;
    const auto data = generate_synthetic(spec);
    const auto bank = QuestionBank::defaults();
    const auto first = build_prompt_dataset(data.identities, bank, nullptr, {});
    const auto second = build_prompt_dataset(data.identities, bank, nullptr, {});
    out.require(first.sets.size() == 100, std::to_string(first.sets.size()) + " prompt sets");
    out.require(serialize_prompt_dataset(first.sets) == serialize_prompt_dataset(second.sets),
                "serialized datasets differ");
    std::size_t invalid = 0;
    std::size_t uncovered = 0;
    for (std::size_t i = 0; i < first.sets.size(); ++i) {
        const auto& set = first.sets[i];
        const auto& rec = data.identities.at(i);
        try {
            validate_prompt_set(set, first.sets.size());
        } catch (const InvariantError&) {
            ++invalid;
        }
        if (set.identity != rec.identity || set.vqa.size() != 7) ++invalid;
        if (!covers_attribute_words(set.chatgpt, attribute_words(rec))) ++uncovered;
        for (const auto& sentence : set.vqa) {
            bool grounded = false;
            for (const auto& q : bank.questions()) {
                if (bank.answer(q, rec) != sentence) continue;
                const auto& value = rec.attributes.at(q.attribute);
                const std::string word = (value == "yes" || value == "no") ? q.attribute : value;
                grounded = grounded || covers_attribute_words(sentence, {word});
            }
            if (!grounded) ++uncovered;
        }
    }
    out.require(invalid == 0, std::to_string(invalid) + " invalid sets");
    out.require(uncovered == 0, std::to_string(uncovered) + " sentences fail coverage");
    out.detail = std::to_string(first.sets.size()) + " sets of 1 + 7 sentences, byte-identical, coverage checked" +
                 (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

// ---------------------------------------------------------------------------
// 7. Tokenizer

Outcome criterion_tokenizer() {
    Outcome out;
    SyntheticDatasetSpec spec;
    spec.identities = 100;
    spec.samples_per_identity = 2;
    spec.image_size = 8;
    const auto data = generate_synthetic(spec);
    TemplateComposer composer;
    std::vector<std::string> sentences;
    for (const auto& rec : data.identities) sentences.push_back(composer.compose(rec));
    const auto vocab = Vocabulary::build(sentences, kDefaultVocabSize);
    std::size_t mismatches = 0;
    std::size_t invalid = 0;
    for (const auto& s : sentences) {
        const auto seq = vocab.encode(s, 77);
        try {
            vocab.validate(seq);
        } catch (const InvariantError&) {
            ++invalid;
        }
        if (seq.ids.size() != 77 || seq.ids.front() != vocab.sos() || seq.ids[seq.eos_position] != vocab.eos()) {
            ++invalid;
        }
        for (std::size_t i = seq.eos_position + 1; i < seq.ids.size(); ++i) {
            if (seq.ids[i] != vocab.pad()) ++invalid;
        }
        if (vocab.decode(seq.ids) != normalize_text(s)) ++mismatches;
    }
    out.require(mismatches == 0, std::to_string(mismatches) + " round-trip mismatches");
    out.require(invalid == 0, std::to_string(invalid) + " invariant violations");
    out.detail = std::to_string(sentences.size()) + " template sentences round-trip" +
                 (out.detail.empty() ? "" : "; " + out.detail);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient suite", criterion_gradients},
        {"loss identities", criterion_loss_identities},
        {"metric oracle", criterion_metric_oracle},
        {"directional ablation LP+CP&VP vs LP", criterion_directional},
        {"determinism and resume", criterion_determinism},
        {"prompt pipeline", criterion_prompts},
        {"tokenizer round trip", criterion_tokenizer},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::strtoul(argv[i], nullptr, 10)));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(i + 1)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& ex) {
            o.pass = false;
            o.detail = std::string("exception: ") + ex.what();
        }
        all = all && o.pass;
        std::printf("criterion %zu (%s): %s - %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL",
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return all ? EXIT_SUCCESS : EXIT_FAILURE;
}
