// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpreid/encoders.hpp"
#include "mpreid/fusion.hpp"
#include "mpreid/synthetic.hpp"

namespace mpreid {

inline constexpr int kReportSchemaVersion = 1;

struct LossConfig {
    double lambda_id = 0.25;
    double lambda_tri = 1.0;
    double epsilon = 0.1;  // label smoothing for L_cls, L_m2pce and L_id
    double margin = 0.3;
    double tau = 1.0;
    bool normalize = true;
    std::string reduction = "mean";  // mean | sum
    bool contrastive_on_implicit = false;
    // Prompt side of L_m2p/L_p2m: "attended" uses f_e after cross-attention,
    // "prompt" ensembles the text-only EOS features.
    std::string align_target = "attended";
    // "sample" pairs each image with the prompt feature attended over its own
    // tokens; "sibling" uses the next sample of the same identity in the batch.
    std::string align_pairing = "sample";
};

struct TrainConfig {
    std::size_t identities_per_batch = 8;  // S
    std::size_t samples_per_identity = 4;  // K
    std::size_t steps = 600;
    double lr = 1e-3;
    double warmup_fraction = 0.1;
    std::size_t implicit_tokens = 4;  // T
    std::size_t checkpoint_every = 0;
    std::size_t fusion_depth = 1;
    std::string vqa_pooling = "mean";         // mean | concat
    std::string cross_attention = "shared";   // shared | separate
};

struct PromptConfig {
    std::size_t vocab_size = kDefaultVocabSize;
    std::string vqa_sampling = "per_identity";  // per_identity | shared
    std::size_t workers = 1;
    bool offline = true;
};

struct PathConfig {
    std::string data_dir;
    std::string prompts;
    std::string vocab;
    std::string question_bank;
    std::string captions;
    std::string output_dir = "runs";
    std::string checkpoint;
    std::string resume;
};

struct RunConfig {
    EncoderConfig encoder;
    LossConfig loss;
    TrainConfig train;
    PromptConfig prompts;
    SyntheticDatasetSpec data;
    PathConfig paths;
    std::string strategy = "LP+CP&VP";
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds = {0, 1, 2};

    nlohmann::json to_json() const;
    /// Rejects unknown keys; missing keys keep their defaults.
    static RunConfig from_json(const nlohmann::json& doc);
    static RunConfig load(const std::filesystem::path& path);

    /// Applies "section.key=value" overrides. Values parse as JSON when they
    /// can, otherwise as strings.
    void apply_overrides(const std::vector<std::string>& assignments);

    /// Collects every violation into one ConfigError. Listed path fields must
    /// be set and exist.
    void validate(const std::vector<std::string>& required_paths = {}) const;

    /// Hex SHA-256 of the canonical JSON form, leaving out the resume,
    /// checkpoint and output locations.
    std::string hash() const;

    SimilarityConfig similarity() const { return {loss.normalize, loss.tau}; }
};

std::string sha256_hex(const std::string& data);

}  // namespace mpreid
