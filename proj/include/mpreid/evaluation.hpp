// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpreid/config.hpp"
#include "mpreid/training.hpp"

namespace mpreid {

/// Embedding rows with optional identity and camera tags per row.
struct EmbeddingSet {
    Tensor features;                      // [n, D]
    std::vector<std::int64_t> identities;  // empty or n entries
    std::vector<std::size_t> cameras;      // empty or n entries
};

/// Gallery orderings by ascending Euclidean distance, ties by gallery index.
/// Relevant items share the query identity from another camera; same
/// identity and same camera items are junk: they stay in the ordering but
/// count neither as hits nor as misses.
struct RankingResult {
    std::vector<std::vector<std::size_t>> order;
    std::vector<std::vector<double>> distance;        // aligned with order
    std::vector<std::vector<std::uint8_t>> relevant;  // by gallery index
    std::vector<std::vector<std::uint8_t>> junk;      // by gallery index

    std::size_t queries() const noexcept { return order.size(); }
    bool has_relevance() const noexcept { return !relevant.empty(); }
};

RankingResult rank_gallery(const EmbeddingSet& query, const EmbeddingSet& gallery);
/// Orderings only, without relevance.
RankingResult rank_gallery(const Tensor& query, const Tensor& gallery);

struct RetrievalMetrics {
    double map = 0.0;
    std::vector<double> cmc;                 // cmc[k-1] = Rank@k
    std::vector<double> per_query_ap;        // evaluated queries only
    std::vector<std::size_t> evaluated;      // query indices behind per_query_ap
    std::vector<std::size_t> excluded;       // queries without a relevant item
    std::vector<std::string> warnings;

    double rank(std::size_t k) const;
};

/// Average precision of one query: the mean over its relevant items of the
/// precision at their positions. Throws EvaluationError when the query has
/// no relevant item.
double average_precision(const RankingResult& result, std::size_t query);

/// AP and CMC up to max_rank over the queries that have a relevant item.
/// Throws EvaluationError if no query does.
RetrievalMetrics compute_metrics(const RankingResult& result, std::size_t max_rank = 10);
double compute_map(const RankingResult& result);
double compute_cmc(const RankingResult& result, std::size_t k);

struct EvalReport {
    int schema_version = kReportSchemaVersion;
    std::string strategy;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string version = MPREID_VERSION;
    double map = 0.0;
    double r1 = 0.0;
    double r5 = 0.0;
    double r10 = 0.0;
    std::vector<double> per_query_ap;
    std::size_t excluded_queries = 0;

    /// Throws InvariantError unless metrics lie in [0, 1] and r1 <= r5 <= r10.
    void validate() const;
    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& doc);
    void save(const std::filesystem::path& path) const;
    static EvalReport load(const std::filesystem::path& path);
};

EvalReport make_report(const RetrievalMetrics& metrics, const std::string& strategy, std::uint64_t seed,
                       const std::string& config_hash);

/// Embeds the query and gallery splits with the trained image encoder and
/// scores the ranking.
RetrievalMetrics evaluate_model(const MpReidModel& model, const TensorMap& params, const SyntheticDataset& data);

struct ExperimentInputs {
    const SyntheticDataset* data = nullptr;
    const std::vector<PromptSet>* prompts = nullptr;
    const Vocabulary* vocab = nullptr;
    const std::map<std::int64_t, std::string>* captions = nullptr;
};

struct ExperimentResult {
    EvalReport report;
    TrainResult training;
    std::vector<std::string> warnings;
};

/// Trains config.strategy with config.seed and evaluates the result.
ExperimentResult run_experiment(const RunConfig& config, const ExperimentInputs& inputs,
                                const TrainOptions& options = {});

/// Rows of the strategy matrix; every row includes the implicit prompt.
struct AblationSpec {
    std::vector<std::string> rows;

    static AblationSpec defaults();  // LP, LP+AW, LP+GC, LP+VP, LP+CP, LP+CP&VP
    void validate() const;
};

struct AblationOptions {
    std::size_t workers = 1;
    std::filesystem::path output_dir;  // per-run reports and metrics; empty to skip
    std::function<void(const EvalReport&)> on_report;
};

/// One report per (row, seed), rows outer and seeds inner. Every row's prompt
/// kinds are checked before any training starts; a missing kind raises
/// ConfigError naming the row.
std::vector<EvalReport> run_ablation(const AblationSpec& spec, const RunConfig& base,
                                     std::span<const std::uint64_t> seeds, const ExperimentInputs& inputs,
                                     const AblationOptions& options = {});

struct AblationRow {
    std::string strategy;
    std::size_t runs = 0;
    double map_mean = 0.0, map_std = 0.0;
    double r1_mean = 0.0, r1_std = 0.0;
    double r5_mean = 0.0, r5_std = 0.0;
    double r10_mean = 0.0, r10_std = 0.0;
};

/// Mean and sample standard deviation per strategy, in first-seen order.
/// Throws InputError if the reports carry different schema versions.
std::vector<AblationRow> aggregate_reports(std::span<const EvalReport> reports);

/// CSV with columns strategy,seed,mAP,r1,r5,r10, one line per report.
std::string ablation_csv(std::span<const EvalReport> reports);
/// Aligned text table of the aggregated rows, metrics in percent.
std::string ablation_table(std::span<const AblationRow> rows);

}  // namespace mpreid
