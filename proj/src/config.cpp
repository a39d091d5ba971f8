// SPDX-License-Identifier: Apache-2.0
#include "mpreid/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <set>

#include "mpreid/errors.hpp"
#include "mpreid/training.hpp"

namespace mpreid {

namespace {

template <class F>
void visit_encoder(EncoderConfig& c, F&& f) {
    f("embed_dim", c.embed_dim);
    f("layers", c.layers);
    f("heads", c.heads);
    f("patch_size", c.patch_size);
    f("image_size", c.image_size);
    f("channels", c.channels);
    f("context_length", c.context_length);
    f("mlp_ratio", c.mlp_ratio);
}

template <class F>
void visit_loss(LossConfig& c, F&& f) {
    f("lambda_id", c.lambda_id);
    f("lambda_tri", c.lambda_tri);
    f("epsilon", c.epsilon);
    f("margin", c.margin);
    f("tau", c.tau);
    f("normalize", c.normalize);
    f("reduction", c.reduction);
    f("contrastive_on_implicit", c.contrastive_on_implicit);
    f("align_target", c.align_target);
    f("align_pairing", c.align_pairing);
}

template <class F>
void visit_train(TrainConfig& c, F&& f) {
    f("S", c.identities_per_batch);
    f("K", c.samples_per_identity);
    f("steps", c.steps);
    f("lr", c.lr);
    f("warmup_fraction", c.warmup_fraction);
    f("T", c.implicit_tokens);
    f("checkpoint_every", c.checkpoint_every);
    f("fusion_depth", c.fusion_depth);
    f("vqa_pooling", c.vqa_pooling);
    f("cross_attention", c.cross_attention);
}

template <class F>
void visit_prompts(PromptConfig& c, F&& f) {
    f("vocab_size", c.vocab_size);
    f("vqa_sampling", c.vqa_sampling);
    f("workers", c.workers);
    f("offline", c.offline);
}

template <class F>
void visit_data(SyntheticDatasetSpec& c, F&& f) {
    f("identities", c.identities);
    f("samples_per_identity", c.samples_per_identity);
    f("image_size", c.image_size);
    f("noise", c.noise);
    f("cameras", c.cameras);
    f("camera_shift", c.camera_shift);
    f("seed", c.seed);
    f("train_identities", c.train_identities);
    f("query_per_identity", c.query_per_identity);
}

template <class F>
void visit_paths(PathConfig& c, F&& f) {
    f("data_dir", c.data_dir);
    f("prompts", c.prompts);
    f("vocab", c.vocab);
    f("question_bank", c.question_bank);
    f("captions", c.captions);
    f("output_dir", c.output_dir);
    f("checkpoint", c.checkpoint);
    f("resume", c.resume);
}

template <class S, class V>
nlohmann::json section_to_json(const S& s, V visit) {
    nlohmann::json j = nlohmann::json::object();
    auto copy = s;
    visit(copy, [&](const char* name, auto& v) { j[name] = v; });
    return j;
}

template <class S, class V>
void section_from_json(S& s, const nlohmann::json& j, const std::string& section, V visit,
                       std::vector<std::string>& errors) {
    if (!j.is_object()) {
        errors.push_back(section + ": expected an object");
        return;
    }
    std::set<std::string> known;
    visit(s, [&](const char* name, auto& v) {
        known.insert(name);
        if (!j.contains(name)) return;
        try {
            v = j.at(name).template get<std::remove_reference_t<decltype(v)>>();
        } catch (const nlohmann::json::exception&) {
            errors.push_back(section + "." + name + ": wrong type (" + j.at(name).dump() + ")");
        }
    });
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) errors.push_back("unknown key " + section + "." + k);
    }
}

void join_errors(const std::vector<std::string>& errors, const char* header) {
    if (errors.empty()) return;
    std::string msg = header;
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["encoder"] = section_to_json(encoder, [](auto& s, auto&& f) { visit_encoder(s, f); });
    j["loss"] = section_to_json(loss, [](auto& s, auto&& f) { visit_loss(s, f); });
    j["train"] = section_to_json(train, [](auto& s, auto&& f) { visit_train(s, f); });
    j["prompts"] = section_to_json(prompts, [](auto& s, auto&& f) { visit_prompts(s, f); });
    j["data"] = section_to_json(data, [](auto& s, auto&& f) { visit_data(s, f); });
    j["paths"] = section_to_json(paths, [](auto& s, auto&& f) { visit_paths(s, f); });
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["seeds"] = seeds;
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
    RunConfig c;
    std::vector<std::string> errors;
    for (const auto& [key, value] : doc.items()) {
        if (key == "encoder") {
            section_from_json(c.encoder, value, key, [](auto& s, auto&& f) { visit_encoder(s, f); }, errors);
        } else if (key == "loss") {
            section_from_json(c.loss, value, key, [](auto& s, auto&& f) { visit_loss(s, f); }, errors);
        } else if (key == "train") {
            section_from_json(c.train, value, key, [](auto& s, auto&& f) { visit_train(s, f); }, errors);
        } else if (key == "prompts") {
            section_from_json(c.prompts, value, key, [](auto& s, auto&& f) { visit_prompts(s, f); }, errors);
        } else if (key == "data") {
            section_from_json(c.data, value, key, [](auto& s, auto&& f) { visit_data(s, f); }, errors);
        } else if (key == "paths") {
            section_from_json(c.paths, value, key, [](auto& s, auto&& f) { visit_paths(s, f); }, errors);
        } else if (key == "strategy") {
            if (value.is_string()) {
                c.strategy = value.get<std::string>();
            } else {
                errors.push_back("strategy: expected a string");
            }
        } else if (key == "seed") {
            if (value.is_number_unsigned()) {
                c.seed = value.get<std::uint64_t>();
            } else {
                errors.push_back("seed: expected a non-negative integer");
            }
        } else if (key == "seeds") {
            try {
                c.seeds = value.get<std::vector<std::uint64_t>>();
            } catch (const nlohmann::json::exception&) {
                errors.push_back("seeds: expected a list of non-negative integers");
            }
        } else {
            errors.push_back("unknown key " + key);
        }
    }
    join_errors(errors, "invalid configuration:");
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open configuration " + path.string());
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& ex) {
        throw ConfigError("configuration " + path.string() + ": " + ex.what());
    }
}

void RunConfig::apply_overrides(const std::vector<std::string>& assignments) {
    auto doc = to_json();
    std::vector<std::string> errors;
    for (const auto& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos || eq == 0) {
            errors.push_back("override \"" + a + "\" is not key=value");
            continue;
        }
        const auto key = a.substr(0, eq);
        const auto raw = a.substr(eq + 1);
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        nlohmann::json* node = &doc;
        std::size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (dot == std::string::npos) {
                if (!node->is_object() || !node->contains(part)) {
                    errors.push_back("unknown key " + key);
                } else {
                    const auto& old = (*node)[part];
                    if (old.is_string() && !value.is_string()) value = raw;
                    if (old.is_number_float() && value.is_number()) value = value.get<double>();
                    (*node)[part] = value;
                }
                break;
            }
            if (!node->is_object() || !node->contains(part)) {
                errors.push_back("unknown key " + key);
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
    join_errors(errors, "invalid overrides:");
    *this = from_json(doc);
}

void RunConfig::validate(const std::vector<std::string>& required_paths) const {
    std::vector<std::string> errors;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) errors.push_back(msg);
    };
    try {
        encoder.validate();
    } catch (const Error& e) {
        errors.push_back(std::string("encoder: ") + e.what());
    }
    check(encoder.image_size == data.image_size, "encoder.image_size must equal data.image_size");
    check(encoder.channels == 3, "encoder.channels must be 3 for the synthetic images");
    check(loss.lambda_id >= 0.0 && std::isfinite(loss.lambda_id), "loss.lambda_id must be finite and >= 0");
    check(loss.lambda_tri >= 0.0 && std::isfinite(loss.lambda_tri), "loss.lambda_tri must be finite and >= 0");
    check(loss.epsilon >= 0.0 && loss.epsilon < 1.0, "loss.epsilon must lie in [0, 1)");
    check(loss.margin >= 0.0 && std::isfinite(loss.margin), "loss.margin must be finite and >= 0");
    check(loss.tau > 0.0 && std::isfinite(loss.tau), "loss.tau must be positive");
    check(loss.reduction == "mean" || loss.reduction == "sum", "loss.reduction must be mean or sum");
    check(loss.align_target == "attended" || loss.align_target == "prompt",
          "loss.align_target must be attended or prompt");
    check(loss.align_pairing == "sample" || loss.align_pairing == "sibling",
          "loss.align_pairing must be sample or sibling");
    check(train.identities_per_batch >= 2, "train.S must be at least 2");
    check(train.samples_per_identity >= 2, "train.K must be at least 2");
    check(train.steps >= 1, "train.steps must be at least 1");
    check(train.lr >= 0.0 && std::isfinite(train.lr), "train.lr must be finite and >= 0");
    check(train.warmup_fraction >= 0.0 && train.warmup_fraction <= 1.0, "train.warmup_fraction must lie in [0, 1]");
    check(train.implicit_tokens >= 1 && train.implicit_tokens + 6 <= encoder.context_length,
          "train.T must lie in [1, context_length - 6]");
    check(train.implicit_tokens <= kDefaultSlotCount, "train.T exceeds the reserved placeholder ids");
    check(train.fusion_depth >= 1, "train.fusion_depth must be at least 1");
    check(train.vqa_pooling == "mean" || train.vqa_pooling == "concat", "train.vqa_pooling must be mean or concat");
    check(train.cross_attention == "shared" || train.cross_attention == "separate",
          "train.cross_attention must be shared or separate");
    check(prompts.vocab_size >= 3 + kDefaultSlotCount + kByteAlphabet, "prompts.vocab_size below the byte alphabet");
    check(prompts.vqa_sampling == "per_identity" || prompts.vqa_sampling == "shared",
          "prompts.vqa_sampling must be per_identity or shared");
    check(prompts.workers >= 1, "prompts.workers must be at least 1");
    try {
        data.validate();
    } catch (const Error& e) {
        errors.push_back(std::string("data: ") + e.what());
    }
    check(data.resolved_train_identities() >= train.identities_per_batch,
          "train.S exceeds the number of training identities");
    try {
        (void)Strategy::parse(strategy);
    } catch (const Error& e) {
        errors.push_back(e.what());
    }
    check(!seeds.empty(), "seeds must not be empty");

    auto copy = paths;
    visit_paths(copy, [&](const char* name, std::string& value) {
        for (const auto& r : required_paths) {
            if (r != name) continue;
            if (value.empty()) {
                errors.push_back(std::string("paths.") + name + " is required");
            } else if (!std::filesystem::exists(value)) {
                errors.push_back(std::string("paths.") + name + " does not exist: " + value);
            }
        }
    });
    join_errors(errors, "configuration has errors:");
}

std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string RunConfig::hash() const {
    auto j = to_json();
    for (const char* k : {"resume", "checkpoint", "output_dir"}) j["paths"].erase(k);
    return sha256_hex(j.dump());
}

}  // namespace mpreid
