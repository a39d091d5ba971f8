// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mpreid/config.hpp"
#include "mpreid/errors.hpp"
#include "mpreid/evaluation.hpp"
#include "mpreid/prompts.hpp"
#include "mpreid/synthetic.hpp"
#include "mpreid/tokenizer.hpp"
#include "mpreid/training.hpp"

namespace py = pybind11;
using namespace mpreid;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

RunConfig config_from(const std::string& json_text, const std::vector<std::string>& overrides) {
    auto cfg = json_text.empty() ? RunConfig{} : RunConfig::from_json(nlohmann::json::parse(json_text));
    cfg.apply_overrides(overrides);
    cfg.validate();
    return cfg;
}

py::dict record_dict(const PersonRecord& r) {
    py::dict d;
    d["identity"] = r.identity;
    d["camera"] = r.camera;
    d["attributes"] = r.attributes.attributes;
    return d;
}

py::dict dataset_dict(const SyntheticDataset& data) {
    py::dict out;
    for (const auto& [name, split] :
         {std::pair{"train", &data.train}, std::pair{"query", &data.query}, std::pair{"gallery", &data.gallery}}) {
        py::list records;
        const auto size = data.spec.image_size;
        Array images({static_cast<py::ssize_t>(split->size()), static_cast<py::ssize_t>(size),
                      static_cast<py::ssize_t>(size), py::ssize_t{3}});
        auto* dst = images.mutable_data();
        for (const auto& r : *split) {
            records.append(record_dict(r));
            dst = std::copy(r.image.data().begin(), r.image.data().end(), dst);
        }
        py::dict s;
        s["records"] = records;
        s["images"] = images;
        out[name] = s;
    }
    return out;
}

py::dict metrics_dict(const RetrievalMetrics& m) {
    py::dict d;
    d["mAP"] = m.map;
    d["cmc"] = m.cmc;
    d["per_query_ap"] = m.per_query_ap;
    d["excluded"] = m.excluded;
    d["warnings"] = m.warnings;
    return d;
}

}  // namespace

PYBIND11_MODULE(_mpreid, m) {
    m.doc() = "Multi-prompt person re-identification core";
    m.attr("__version__") = MPREID_VERSION;
    m.attr("REPORT_SCHEMA_VERSION") = kReportSchemaVersion;

    auto base = py::register_exception<Error>(m, "MpreidError", PyExc_RuntimeError);
    py::register_exception<InputError>(m, "InputError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<EvaluationError>(m, "EvaluationError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());

    py::class_<TokenSequence>(m, "TokenSequence")
        .def_readonly("ids", &TokenSequence::ids)
        .def_readonly("eos_position", &TokenSequence::eos_position)
        .def_property_readonly("valid_length", &TokenSequence::valid_length);

    py::class_<Vocabulary>(m, "Vocabulary")
        .def_static("build", [](const std::vector<std::string>& corpus, std::size_t target_size,
                                std::size_t slot_count) { return Vocabulary::build(corpus, target_size, slot_count); },
                    py::arg("corpus"), py::arg("target_size"), py::arg("slot_count") = kDefaultSlotCount)
        .def_static("load", [](const std::string& path) { return Vocabulary::load(path); })
        .def("save", [](const Vocabulary& v, const std::string& path) { v.save(path); })
        .def("encode", &Vocabulary::encode, py::arg("sentence"), py::arg("context_length") = 77)
        .def("encode_ids", &Vocabulary::encode_ids)
        .def("decode", [](const Vocabulary& v, const std::vector<TokenId>& ids) { return v.decode(ids); })
        .def("validate", &Vocabulary::validate)
        .def("__len__", &Vocabulary::size)
        .def_property_readonly("slot_count", &Vocabulary::slot_count);

    m.def(
        "generate_dataset",
        [](const std::vector<std::string>& overrides) {
            RunConfig cfg;
            cfg.apply_overrides(overrides);
            return dataset_dict(generate_synthetic(cfg.data));
        },
        py::arg("overrides") = std::vector<std::string>{},
        "Synthetic dataset as {split: {records, images[n, H, W, 3]}}; overrides use data.* keys.");

    m.def(
        "build_prompts",
        [](const std::vector<std::string>& overrides, std::uint64_t seed) {
            RunConfig cfg;
            cfg.apply_overrides(overrides);
            const auto data = generate_synthetic(cfg.data);
            TemplateComposer composer;
            PromptBuildOptions opt;
            opt.seed = seed;
            opt.implicit_tokens = cfg.train.implicit_tokens;
            const auto built = build_prompt_dataset(data.identities, QuestionBank::defaults(), &composer, opt);
            py::list out;
            for (const auto& s : built.sets) {
                py::dict d;
                d["id"] = s.identity;
                d["chatgpt"] = s.chatgpt;
                d["vqa"] = s.vqa;
                d["T"] = s.implicit_tokens;
                out.append(d);
            }
            return out;
        },
        py::arg("overrides") = std::vector<std::string>{}, py::arg("seed") = 0,
        "Offline prompt sets for every identity of the synthetic dataset.");

    m.def(
        "rank_gallery",
        [](const Array& query, const Array& gallery) {
            const auto r = rank_gallery(to_tensor(query), to_tensor(gallery));
            return r.order;
        },
        py::arg("query"), py::arg("gallery"), "Gallery indices per query by ascending Euclidean distance.");

    m.def(
        "evaluate",
        [](const Array& query, const Array& gallery, const std::vector<std::int64_t>& query_ids,
           const std::vector<std::int64_t>& gallery_ids, const std::vector<std::size_t>& query_cams,
           const std::vector<std::size_t>& gallery_cams, std::size_t max_rank) {
            const EmbeddingSet q{to_tensor(query), query_ids, query_cams};
            const EmbeddingSet g{to_tensor(gallery), gallery_ids, gallery_cams};
            return metrics_dict(compute_metrics(rank_gallery(q, g), max_rank));
        },
        py::arg("query"), py::arg("gallery"), py::arg("query_ids"), py::arg("gallery_ids"),
        py::arg("query_cams") = std::vector<std::size_t>{}, py::arg("gallery_cams") = std::vector<std::size_t>{},
        py::arg("max_rank") = 10, "mAP and CMC of a Euclidean ranking.");

    m.def(
        "config_hash",
        [](const std::string& json_text, const std::vector<std::string>& overrides) {
            return config_from(json_text, overrides).hash();
        },
        py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{});

    m.def(
        "default_config", [] { return RunConfig{}.to_json().dump(2); }, "Default run configuration as JSON text.");

    m.def(
        "run_experiment",
        [](const std::string& json_text, const std::vector<std::string>& overrides) {
            const auto cfg = config_from(json_text, overrides);
            std::string report;
            std::vector<double> totals;
            {
                py::gil_scoped_release release;
                const auto data = generate_synthetic(cfg.data);
                TemplateComposer composer;
                PromptBuildOptions opt;
                opt.seed = cfg.seed;
                opt.implicit_tokens = cfg.train.implicit_tokens;
                const auto built = build_prompt_dataset(data.identities, QuestionBank::defaults(), &composer, opt);
                const auto vocab = Vocabulary::build(prompt_corpus(built.sets), cfg.prompts.vocab_size);
                const auto result = run_experiment(cfg, {&data, &built.sets, &vocab, nullptr});
                for (const auto& l : result.training.history) totals.push_back(l.total);
                report = result.report.to_json().dump();
            }
            py::dict d;
            d["report"] = report;
            d["loss"] = totals;
            return d;
        },
        py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{},
        "Generates data and offline prompts, trains and evaluates; returns the report JSON and the loss curve.");
}
