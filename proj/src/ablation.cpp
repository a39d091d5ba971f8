// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "mpreid/errors.hpp"
#include "mpreid/evaluation.hpp"

namespace mpreid {

namespace {

std::string run_dir_name(const std::string& strategy, std::uint64_t seed) {
    std::string s;
    for (char c : strategy) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return s + "_seed" + std::to_string(seed);
}

void check_inputs(const ExperimentInputs& inputs) {
    if (inputs.data == nullptr || inputs.vocab == nullptr) {
        throw ConfigError("experiment needs a dataset and a vocabulary");
    }
}

TrainingSet prepare(const RunConfig& config, const ExperimentInputs& inputs) {
    static const std::vector<PromptSet> kNoPrompts;
    const auto strategy = Strategy::parse(config.strategy);
    try {
        return build_training_set(*inputs.data, inputs.prompts ? *inputs.prompts : kNoPrompts, *inputs.vocab,
                                  strategy, config.encoder.context_length, inputs.captions);
    } catch (const ConfigError& ex) {
        throw ConfigError("ablation row " + config.strategy + ": " + ex.what());
    }
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    double mean = 0.0;
    for (auto x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (auto x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& config, const ExperimentInputs& inputs, const TrainOptions& options) {
    check_inputs(inputs);
    ExperimentResult out;
    const auto set = prepare(config, inputs);
    out.warnings = set.warnings;
    MpReidModel model(config, *inputs.vocab, set.classes());
    out.training = train(config, model, set, options);
    const auto metrics = evaluate_model(model, out.training.state.params, *inputs.data);
    out.warnings.insert(out.warnings.end(), metrics.warnings.begin(), metrics.warnings.end());
    out.report = make_report(metrics, config.strategy, config.seed, config.hash());
    return out;
}

AblationSpec AblationSpec::defaults() { return {{"LP", "LP+AW", "LP+GC", "LP+VP", "LP+CP", "LP+CP&VP"}}; }

void AblationSpec::validate() const {
    if (rows.empty()) throw ConfigError("ablation spec has no rows");
    for (const auto& r : rows) {
        if (!r.starts_with("LP")) throw ConfigError("ablation row " + r + " lacks the implicit prompt LP");
        Strategy::parse(r);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            if (rows[i] == rows[j]) throw ConfigError("ablation row " + rows[i] + " is listed twice");
        }
    }
}

std::vector<EvalReport> run_ablation(const AblationSpec& spec, const RunConfig& base,
                                     std::span<const std::uint64_t> seeds, const ExperimentInputs& inputs,
                                     const AblationOptions& options) {
    spec.validate();
    check_inputs(inputs);
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");

    std::vector<RunConfig> jobs;
    for (const auto& row : spec.rows) {
        RunConfig cfg = base;
        cfg.strategy = row;
        prepare(cfg, inputs);
        for (auto seed : seeds) {
            cfg.seed = seed;
            jobs.push_back(cfg);
        }
    }

    std::vector<EvalReport> reports(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            {
                std::lock_guard lock(mu);
                if (failure) return;
            }
            try {
                const auto& cfg = jobs[i];
                TrainOptions topt;
                std::filesystem::path dir;
                if (!options.output_dir.empty()) {
                    dir = options.output_dir / run_dir_name(cfg.strategy, cfg.seed);
                    topt.metrics_path = dir / "metrics.csv";
                }
                auto result = run_experiment(cfg, inputs, topt);
                if (!dir.empty()) result.report.save(dir / "report.json");
                reports[i] = std::move(result.report);
                if (options.on_report) {
                    std::lock_guard lock(mu);
                    options.on_report(reports[i]);
                }
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };

    const auto workers = std::max<std::size_t>(1, std::min(options.workers, jobs.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    return reports;
}

std::vector<AblationRow> aggregate_reports(std::span<const EvalReport> reports) {
    if (reports.empty()) throw InputError("no reports to aggregate");
    for (const auto& r : reports) {
        if (r.schema_version != reports.front().schema_version) {
            throw InputError("reports mix schema versions " + std::to_string(reports.front().schema_version) +
                             " and " + std::to_string(r.schema_version));
        }
    }
    std::vector<std::string> order;
    std::map<std::string, std::vector<const EvalReport*>> groups;
    for (const auto& r : reports) {
        if (!groups.contains(r.strategy)) order.push_back(r.strategy);
        groups[r.strategy].push_back(&r);
    }
    std::vector<AblationRow> rows;
    for (const auto& s : order) {
        const auto& g = groups[s];
        std::vector<double> map, r1, r5, r10;
        for (const auto* r : g) {
            map.push_back(r->map);
            r1.push_back(r->r1);
            r5.push_back(r->r5);
            r10.push_back(r->r10);
        }
        AblationRow row;
        row.strategy = s;
        row.runs = g.size();
        std::tie(row.map_mean, row.map_std) = mean_std(map);
        std::tie(row.r1_mean, row.r1_std) = mean_std(r1);
        std::tie(row.r5_mean, row.r5_std) = mean_std(r5);
        std::tie(row.r10_mean, row.r10_std) = mean_std(r10);
        rows.push_back(row);
    }
    return rows;
}

std::string ablation_csv(std::span<const EvalReport> reports) {
    std::string out = "strategy,seed,mAP,r1,r5,r10\n";
    char buf[256];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, ",%llu,%.6f,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(r.seed), r.map,
                      r.r1, r.r5, r.r10);
        out += r.strategy + buf;
    }
    return out;
}

std::string ablation_table(std::span<const AblationRow> rows) {
    std::size_t width = 8;
    for (const auto& r : rows) width = std::max(width, r.strategy.size());
    char buf[512];
    std::snprintf(buf, sizeof buf, "%-*s  %4s  %-15s  %-15s  %-15s  %-15s\n", static_cast<int>(width), "strategy",
                  "runs", "mAP", "R@1", "R@5", "R@10");
    std::string out = buf;
    auto cell = [](double mean, double sd) {
        char c[32];
        std::snprintf(c, sizeof c, "%6.2f +- %5.2f", 100.0 * mean, 100.0 * sd);
        return std::string(c);
    };
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-*s  %4zu  %-15s  %-15s  %-15s  %-15s\n", static_cast<int>(width),
                      r.strategy.c_str(), r.runs, cell(r.map_mean, r.map_std).c_str(),
                      cell(r.r1_mean, r.r1_std).c_str(), cell(r.r5_mean, r.r5_std).c_str(),
                      cell(r.r10_mean, r.r10_std).c_str());
        out += buf;
    }
    return out;
}

}  // namespace mpreid
