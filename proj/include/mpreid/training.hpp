// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpreid/config.hpp"
#include "mpreid/encoders.hpp"
#include "mpreid/fusion.hpp"
#include "mpreid/losses.hpp"
#include "mpreid/optimizer.hpp"
#include "mpreid/prompts.hpp"
#include "mpreid/synthetic.hpp"

namespace mpreid {

/// One row of the prompt-strategy ablation: which explicit prompt fills the
/// ChatGPT slot and whether VQA prompts are used. The implicit (LP) prompt is
/// always present.
struct Strategy {
    enum class Source { none, chatgpt, attribute_words, caption };

    std::string tag;
    Source cp = Source::none;
    bool vqa = false;

    /// Accepts LP, LP+AW, LP+GC, LP+VP, LP+CP and LP+CP&VP.
    static Strategy parse(const std::string& tag);
    bool has_explicit() const noexcept { return cp != Source::none || vqa; }
};

struct TripletBatch {
    std::vector<std::size_t> indices;     // sample indices, identity-major
    std::vector<std::size_t> labels;      // class label per sample
    std::vector<std::size_t> identities;  // the S distinct labels in draw order
    std::size_t s = 0;
    std::size_t k = 0;
    TripletMining mining;  // filled by the training step
};

/// S distinct labels without replacement, then K samples of each (with
/// replacement only when a label has fewer than K samples).
TripletBatch sample_pk_batch(std::span<const std::size_t> labels, std::size_t s, std::size_t k, Rng& rng);

struct ClassPrompts {
    std::optional<TokenSequence> cp;
    std::vector<TokenSequence> vqa;
};

/// Training split prepared for one strategy. Class c is the c-th smallest
/// training identity.
struct TrainingSet {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    std::vector<std::int64_t> class_identity;
    std::vector<ClassPrompts> prompts;
    std::vector<std::string> warnings;

    std::size_t classes() const noexcept { return class_identity.size(); }
};

/// Caption file: JSON lines {"id", "caption"}.
std::map<std::int64_t, std::string> load_captions(const std::filesystem::path& path);

TrainingSet build_training_set(const SyntheticDataset& data, const std::vector<PromptSet>& prompts,
                               const Vocabulary& vocab, const Strategy& strategy, std::size_t context_length,
                               const std::map<std::int64_t, std::string>* captions = nullptr);

struct StepLosses {
    double l_cls = 0.0;
    double l_m2p = 0.0;
    double l_p2m = 0.0;
    double l_m2pce = 0.0;
    double l_id = 0.0;
    double l_tri = 0.0;
    double total = 0.0;
};

struct ForwardResult {
    AlignmentLossBundle align;
    Var l_id;
    Var l_tri;
    Var l_reid;
    Var total;
    Var f_m;
    std::optional<Var> f_e;
    Var f_cls;

    StepLosses values() const;
};

class MpReidModel {
public:
    MpReidModel(const RunConfig& config, const Vocabulary& vocab, std::size_t classes);

    TensorMap init(std::uint64_t seed) const;
    ForwardResult forward(const Binder& p, const TrainingSet& data, TripletBatch& batch) const;

    /// Image features f_m (retrieval embedding), [N, D].
    Tensor embed(const TensorMap& params, std::span<const Tensor* const> images) const;

    const ImageEncoder& image_encoder() const noexcept { return image_; }
    const TextEncoder& text_encoder() const noexcept { return text_; }
    const ImplicitPromptBank& bank() const noexcept { return bank_; }
    const Strategy& strategy() const noexcept { return strategy_; }
    std::size_t classes() const noexcept { return classes_; }

private:
    Var pooled_vqa(const Binder& p, const Var& attended, std::size_t n) const;

    RunConfig config_;
    Strategy strategy_;
    std::size_t classes_;
    ImageEncoder image_;
    TextEncoder text_;
    ImplicitPromptBank bank_;
    CrossAttentionBlock cross_cp_;
    CrossAttentionBlock cross_vp_;
};

struct TrainState {
    std::size_t step = 0;
    TensorMap params;
    Adam optimizer;
    std::uint64_t seed = 0;
    std::string config_hash;
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
    std::filesystem::path metrics_path;     // CSV; empty to skip
    std::filesystem::path checkpoint_path;  // final and periodic checkpoints; empty to skip
    std::filesystem::path resume_from;      // checkpoint to continue from
    std::function<void(std::size_t, const StepLosses&)> on_step;
};

struct TrainResult {
    TrainState state;
    std::vector<StepLosses> history;  // steps run in this call
};

inline constexpr const char* kMetricsHeader = "step,l_cls,l_m2p,l_p2m,l_m2pce,l_id,l_tri,total";
std::string format_metrics_row(std::size_t step, const StepLosses& l);

/// Runs config.train.steps optimisation steps (or the remainder after a
/// resume). The batch of step t is drawn from a generator seeded by
/// (config.seed, t), so resumed runs replay exactly. Non-finite values abort
/// with TrainingAbort naming the step and the component losses.
TrainResult train(const RunConfig& config, const MpReidModel& model, const TrainingSet& data,
                  const TrainOptions& options = {});

}  // namespace mpreid
