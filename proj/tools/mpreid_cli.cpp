// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpreid/archive.hpp"
#include "mpreid/config.hpp"
#include "mpreid/errors.hpp"
#include "mpreid/evaluation.hpp"
#include "mpreid/http_generator.hpp"
#include "mpreid/prompts.hpp"
#include "mpreid/synthetic.hpp"
#include "mpreid/training.hpp"

namespace fs = std::filesystem;
using namespace mpreid;

namespace {

struct GlobalOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    bool offline = false;
};

RunConfig resolve_config(const GlobalOptions& g) {
    RunConfig cfg = g.config.empty() ? RunConfig{} : RunConfig::load(g.config);
    cfg.apply_overrides(g.overrides);
    if (g.seed) {
        cfg.seed = *g.seed;
        cfg.seeds = {*g.seed};
    }
    if (g.offline) cfg.prompts.offline = true;
    return cfg;
}

void warn(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

void write_manifest(const fs::path& path, const std::string& command, const RunConfig& cfg,
                    nlohmann::json extra = nlohmann::json::object()) {
    extra["command"] = command;
    extra["config_hash"] = cfg.hash();
    extra["seed"] = cfg.seed;
    extra["version"] = MPREID_VERSION;
    extra["schema_version"] = kReportSchemaVersion;
    extra["config"] = cfg.to_json();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, extra.dump(2) + "\n");
}

fs::path or_default(const std::string& value, const fs::path& fallback) {
    return value.empty() ? fallback : fs::path(value);
}

struct Inputs {
    SyntheticDataset data;
    std::vector<PromptSet> prompts;
    std::optional<Vocabulary> vocab;
    std::map<std::int64_t, std::string> captions;
    bool has_captions = false;

    ExperimentInputs view() const {
        return {&data, &prompts, &*vocab, has_captions ? &captions : nullptr};
    }
};

Inputs load_inputs(const RunConfig& cfg) {
    Inputs in;
    in.data = load_dataset(cfg.paths.data_dir);
    in.prompts = read_prompt_dataset(cfg.paths.prompts);
    in.vocab = Vocabulary::load(cfg.paths.vocab);
    if (!cfg.paths.captions.empty()) {
        in.captions = load_captions(cfg.paths.captions);
        in.has_captions = true;
    }
    return in;
}

std::vector<std::string> training_paths(const RunConfig& cfg) {
    std::vector<std::string> req = {"data_dir", "prompts", "vocab"};
    if (!cfg.paths.captions.empty()) req.push_back("captions");
    return req;
}

int cmd_gen_data(const GlobalOptions& g, const std::string& out) {
    auto cfg = resolve_config(g);
    cfg.data.seed = g.seed ? *g.seed : cfg.data.seed;
    cfg.validate();
    const auto dir = out.empty() ? or_default(cfg.paths.data_dir, fs::path(cfg.paths.output_dir) / "data") : fs::path(out);
    const auto data = generate_synthetic(cfg.data);
    save_dataset(dir, data);
    write_manifest(dir / "manifest.json", "gen-data", cfg,
                   {{"train", data.train.size()}, {"query", data.query.size()}, {"gallery", data.gallery.size()}});
    std::cout << "wrote " << data.train.size() << " train, " << data.query.size() << " query, "
              << data.gallery.size() << " gallery records to " << dir.string() << "\n";
    return 0;
}

int cmd_gen_prompts(const GlobalOptions& g, const std::string& out, const std::string& vocab_out) {
    auto cfg = resolve_config(g);
    std::vector<std::string> req = {"data_dir"};
    if (!cfg.paths.question_bank.empty()) req.push_back("question_bank");
    cfg.validate(req);
    const auto data = load_dataset(cfg.paths.data_dir);
    const auto bank =
        cfg.paths.question_bank.empty() ? QuestionBank::defaults() : QuestionBank::load(cfg.paths.question_bank);

    std::unique_ptr<GeneratorClient> client;
    if (cfg.prompts.offline || std::getenv(kGeneratorUrlEnv) == nullptr) {
        client = std::make_unique<TemplateComposer>();
    } else {
        client = std::make_unique<HttpGenerator>(HttpGeneratorConfig::from_environment());
    }
    PromptBuildOptions opt;
    opt.seed = cfg.seed;
    opt.implicit_tokens = cfg.train.implicit_tokens;
    opt.sampling = cfg.prompts.vqa_sampling == "shared" ? VqaSampling::shared : VqaSampling::per_identity;
    opt.workers = cfg.prompts.workers;
    opt.context_length = cfg.encoder.context_length;
    auto built = build_prompt_dataset(data.identities, bank, client.get(), opt);

    const auto vocab = Vocabulary::build(prompt_corpus(built.sets), cfg.prompts.vocab_size);
    for (const auto& s : built.sets) {
        if (vocab.encode_ids(s.chatgpt).size() + 2 > cfg.encoder.context_length) {
            built.warnings.push_back("identity " + std::to_string(s.identity) + ": prompt exceeds the context");
        }
    }
    warn(built.warnings);

    const auto prompts_path = out.empty() ? or_default(cfg.paths.prompts, fs::path(cfg.paths.output_dir) / "prompts.jsonl")
                                          : fs::path(out);
    const auto vocab_path = vocab_out.empty() ? or_default(cfg.paths.vocab, fs::path(cfg.paths.output_dir) / "vocab.json")
                                              : fs::path(vocab_out);
    if (prompts_path.has_parent_path()) fs::create_directories(prompts_path.parent_path());
    if (vocab_path.has_parent_path()) fs::create_directories(vocab_path.parent_path());
    write_prompt_dataset(prompts_path, built.sets);
    vocab.save(vocab_path);
    auto manifest = prompts_path;
    manifest += ".manifest.json";
    write_manifest(manifest, "gen-prompts", cfg,
                   {{"prompts", prompts_path.string()},
                    {"vocab", vocab_path.string()},
                    {"identities", built.sets.size()},
                    {"generator", cfg.prompts.offline || std::getenv(kGeneratorUrlEnv) == nullptr ? "template" : "http"}});
    std::cout << "wrote " << built.sets.size() << " prompt sets to " << prompts_path.string() << " and vocabulary ("
              << vocab.size() << " tokens) to " << vocab_path.string() << "\n";
    return 0;
}

int cmd_train(const GlobalOptions& g, const std::string& out, const std::string& resume) {
    auto cfg = resolve_config(g);
    if (!resume.empty()) cfg.paths.resume = resume;
    auto req = training_paths(cfg);
    if (!cfg.paths.resume.empty()) req.push_back("resume");
    cfg.validate(req);
    const auto inputs = load_inputs(cfg);
    const auto set = build_training_set(inputs.data, inputs.prompts, *inputs.vocab, Strategy::parse(cfg.strategy),
                                        cfg.encoder.context_length, inputs.has_captions ? &inputs.captions : nullptr);
    warn(set.warnings);
    MpReidModel model(cfg, *inputs.vocab, set.classes());

    const fs::path dir = out.empty() ? fs::path(cfg.paths.output_dir) : fs::path(out);
    fs::create_directories(dir);
    TrainOptions opt;
    opt.metrics_path = dir / "metrics.csv";
    opt.checkpoint_path = or_default(cfg.paths.checkpoint, dir / "checkpoint.mpt");
    opt.resume_from = cfg.paths.resume;
    opt.on_step = [&](std::size_t step, const StepLosses& l) {
        if ((step + 1) % 50 == 0 || step + 1 == cfg.train.steps) {
            std::fprintf(stderr, "step %zu/%zu total %.4f (cls %.4f m2p %.4f p2m %.4f m2pce %.4f id %.4f tri %.4f)\n",
                         step + 1, cfg.train.steps, l.total, l.l_cls, l.l_m2p, l.l_p2m, l.l_m2pce, l.l_id, l.l_tri);
        }
    };
    const auto result = train(cfg, model, set, opt);
    write_manifest(dir / "manifest.json", "train", cfg,
                   {{"metrics", opt.metrics_path.string()},
                    {"checkpoint", opt.checkpoint_path.string()},
                    {"steps", result.state.step},
                    {"resumed_from", cfg.paths.resume}});
    std::cout << "trained " << cfg.strategy << " for " << result.state.step << " steps; checkpoint "
              << opt.checkpoint_path.string() << "\n";
    return 0;
}

int cmd_eval(const GlobalOptions& g, const std::string& out, const std::string& checkpoint) {
    auto cfg = resolve_config(g);
    if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;
    cfg.validate({"data_dir", "vocab", "checkpoint"});
    const auto data = load_dataset(cfg.paths.data_dir);
    const auto vocab = Vocabulary::load(cfg.paths.vocab);
    const auto state = load_checkpoint(cfg.paths.checkpoint);
    if (state.config_hash != cfg.hash()) {
        throw ConfigError("checkpoint " + cfg.paths.checkpoint + " was trained with config " + state.config_hash +
                          ", current config is " + cfg.hash());
    }
    std::set<std::int64_t> ids;
    for (const auto& r : data.train) ids.insert(r.identity);
    MpReidModel model(cfg, vocab, ids.size());
    const auto metrics = evaluate_model(model, state.params, data);
    warn(metrics.warnings);
    const auto report = make_report(metrics, cfg.strategy, cfg.seed, cfg.hash());
    const fs::path path = out.empty() ? fs::path(cfg.paths.output_dir) / "report.json" : fs::path(out);
    report.save(path);
    std::printf("%s seed %llu: mAP %.2f  R@1 %.2f  R@5 %.2f  R@10 %.2f  (%s)\n", report.strategy.c_str(),
                static_cast<unsigned long long>(report.seed), 100 * report.map, 100 * report.r1, 100 * report.r5,
                100 * report.r10, path.string().c_str());
    return 0;
}

int cmd_ablate(const GlobalOptions& g, const std::string& out, const std::vector<std::string>& rows,
               std::size_t workers) {
    auto cfg = resolve_config(g);
    cfg.validate(training_paths(cfg));
    const auto inputs = load_inputs(cfg);
    AblationSpec spec = rows.empty() ? AblationSpec::defaults() : AblationSpec{rows};
    const fs::path dir = out.empty() ? fs::path(cfg.paths.output_dir) / "ablation" : fs::path(out);
    AblationOptions opt;
    opt.workers = workers;
    opt.output_dir = dir;
    opt.on_report = [](const EvalReport& r) {
        std::fprintf(stderr, "%s seed %llu: mAP %.2f R@1 %.2f\n", r.strategy.c_str(),
                     static_cast<unsigned long long>(r.seed), 100 * r.map, 100 * r.r1);
    };
    const auto reports = run_ablation(spec, cfg, cfg.seeds, inputs.view(), opt);
    const auto rows_agg = aggregate_reports(reports);
    const auto table = ablation_table(rows_agg);
    write_file_atomic(dir / "ablation.csv", ablation_csv(reports));
    write_file_atomic(dir / "ablation.txt", table);
    write_manifest(dir / "manifest.json", "ablate", cfg, {{"rows", spec.rows}, {"seeds", cfg.seeds}});
    std::cout << table;
    return 0;
}

void collect_reports(const fs::path& p, std::vector<fs::path>& out) {
    if (fs::is_directory(p)) {
        std::vector<fs::path> found;
        for (const auto& e : fs::recursive_directory_iterator(p)) {
            if (e.is_regular_file() && e.path().filename() == "report.json") found.push_back(e.path());
        }
        std::sort(found.begin(), found.end());
        out.insert(out.end(), found.begin(), found.end());
    } else {
        out.push_back(p);
    }
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<fs::path> files;
    for (const auto& i : inputs) collect_reports(i, files);
    if (files.empty()) throw InputError("no report.json files found");
    std::vector<EvalReport> reports;
    for (const auto& f : files) {
        reports.push_back(EvalReport::load(f));
        if (reports.back().schema_version != kReportSchemaVersion) {
            throw InputError(f.string() + " has report schema version " +
                             std::to_string(reports.back().schema_version) + ", expected " +
                             std::to_string(kReportSchemaVersion));
        }
    }
    const auto rows = aggregate_reports(reports);
    std::cout << ablation_table(rows);
    if (!out.empty()) write_file_atomic(out, ablation_csv(reports));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-prompt person re-identification toolkit"};
    app.set_version_flag("--version", std::string(MPREID_VERSION));
    app.require_subcommand(1);

    GlobalOptions g;
    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--set", g.overrides, "Override a config key, e.g. --set train.steps=200")->take_all();
        sub->add_option("--seed", g.seed, "Run seed (overrides config seed and seeds)");
        sub->add_flag("--offline", g.offline, "Force the template composer for prompt generation");
    };

    std::string out;
    std::string vocab_out;
    std::string resume;
    std::string checkpoint;
    std::vector<std::string> rows;
    std::vector<std::string> report_inputs;
    std::size_t workers = 1;

    auto* gen_data = app.add_subcommand("gen-data", "Generate the synthetic dataset");
    add_globals(gen_data);
    gen_data->add_option("--out", out, "Dataset directory (default paths.data_dir)");

    auto* gen_prompts = app.add_subcommand("gen-prompts", "Build the prompt dataset and BPE vocabulary");
    add_globals(gen_prompts);
    gen_prompts->add_option("--out", out, "Prompt JSONL (default paths.prompts)");
    gen_prompts->add_option("--vocab-out", vocab_out, "Vocabulary JSON (default paths.vocab)");

    auto* train_cmd = app.add_subcommand("train", "Train one strategy");
    add_globals(train_cmd);
    train_cmd->add_option("--out", out, "Run directory (default paths.output_dir)");
    train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on query and gallery");
    add_globals(eval_cmd);
    eval_cmd->add_option("--out", out, "Report JSON (default <output_dir>/report.json)");
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (default paths.checkpoint)");

    auto* ablate = app.add_subcommand("ablate", "Train and evaluate every strategy row for every seed");
    add_globals(ablate);
    ablate->add_option("--out", out, "Output directory (default <output_dir>/ablation)");
    ablate->add_option("--rows", rows, "Strategy rows (default: all six)")->take_all();
    ablate->add_option("--workers", workers, "Parallel runs")->check(CLI::PositiveNumber);

    auto* report = app.add_subcommand("report", "Aggregate evaluation reports");
    report->add_option("inputs", report_inputs, "report.json files or directories")->required();
    report->add_option("--out", out, "Write the per-run CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::validation);
    }

    try {
        if (*gen_data) return cmd_gen_data(g, out);
        if (*gen_prompts) return cmd_gen_prompts(g, out, vocab_out);
        if (*train_cmd) return cmd_train(g, out, resume);
        if (*eval_cmd) return cmd_eval(g, out, checkpoint);
        if (*ablate) return cmd_ablate(g, out, rows, workers);
        if (*report) return cmd_report(report_inputs, out);
    } catch (const TrainingAbort& e) {
        std::cerr << "error: training aborted at step " << e.step() << ": " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
