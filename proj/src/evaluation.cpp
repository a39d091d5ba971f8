// SPDX-License-Identifier: Apache-2.0
#include "mpreid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mpreid/errors.hpp"

namespace mpreid {

namespace {

void check_tags(const EmbeddingSet& set, const char* what) {
    const auto n = set.features.rows();
    if (!set.identities.empty() && set.identities.size() != n) {
        throw DimensionError(std::string(what) + " identity tags do not match the embedding count");
    }
    if (!set.cameras.empty() && set.cameras.size() != n) {
        throw DimensionError(std::string(what) + " camera tags do not match the embedding count");
    }
}

}  // namespace

RankingResult rank_gallery(const EmbeddingSet& query, const EmbeddingSet& gallery) {
    const auto& q = query.features;
    const auto& g = gallery.features;
    if (g.size() == 0) throw InputError("gallery is empty");
    if (q.size() == 0) throw InputError("query set is empty");
    if (q.rank() != 2 || g.rank() != 2) throw DimensionError("embeddings must be [n, D] matrices");
    if (q.cols() != g.cols()) {
        throw DimensionError("query dim " + std::to_string(q.cols()) + " != gallery dim " + std::to_string(g.cols()));
    }
    check_tags(query, "query");
    check_tags(gallery, "gallery");
    const bool tagged = !query.identities.empty() && !gallery.identities.empty();
    const bool cams = tagged && !query.cameras.empty() && !gallery.cameras.empty();

    const auto nq = q.rows();
    const auto ng = g.rows();
    const auto d = q.cols();
    RankingResult r;
    r.order.resize(nq);
    r.distance.resize(nq);
    if (tagged) {
        r.relevant.assign(nq, std::vector<std::uint8_t>(ng, 0));
        r.junk.assign(nq, std::vector<std::uint8_t>(ng, 0));
    }
    std::vector<double> dist(ng);
    for (std::size_t i = 0; i < nq; ++i) {
        const auto qi = q.row(i);
        for (std::size_t j = 0; j < ng; ++j) {
            const auto gj = g.row(j);
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = qi[c] - gj[c];
                s += diff * diff;
            }
            dist[j] = std::sqrt(s);
        }
        auto& order = r.order[i];
        order.resize(ng);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
        r.distance[i].resize(ng);
        for (std::size_t j = 0; j < ng; ++j) r.distance[i][j] = dist[order[j]];
        if (tagged) {
            for (std::size_t j = 0; j < ng; ++j) {
                if (gallery.identities[j] != query.identities[i]) continue;
                if (cams && gallery.cameras[j] == query.cameras[i]) {
                    r.junk[i][j] = 1;
                } else {
                    r.relevant[i][j] = 1;
                }
            }
        }
    }
    return r;
}

RankingResult rank_gallery(const Tensor& query, const Tensor& gallery) {
    return rank_gallery(EmbeddingSet{query, {}, {}}, EmbeddingSet{gallery, {}, {}});
}

double RetrievalMetrics::rank(std::size_t k) const {
    if (k == 0 || k > cmc.size()) throw InputError("Rank@" + std::to_string(k) + " was not computed");
    return cmc[k - 1];
}

double average_precision(const RankingResult& result, std::size_t query) {
    if (!result.has_relevance()) throw EvaluationError("ranking carries no relevance information");
    const auto& rel = result.relevant.at(query);
    const auto& junk = result.junk.at(query);
    std::size_t position = 0;
    std::size_t hits = 0;
    double sum = 0.0;
    for (auto j : result.order[query]) {
        if (junk[j]) continue;
        ++position;
        if (rel[j]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(position);
        }
    }
    if (hits == 0) throw EvaluationError("query " + std::to_string(query) + " has no relevant gallery item");
    return sum / static_cast<double>(hits);
}

RetrievalMetrics compute_metrics(const RankingResult& result, std::size_t max_rank) {
    if (!result.has_relevance()) throw EvaluationError("ranking carries no relevance information");
    if (max_rank == 0) throw InputError("max_rank must be positive");
    RetrievalMetrics m;
    std::vector<std::size_t> hit_at(max_rank, 0);
    double ap_sum = 0.0;
    for (std::size_t i = 0; i < result.queries(); ++i) {
        const auto& rel = result.relevant[i];
        const auto& junk = result.junk[i];
        std::size_t position = 0;
        std::size_t hits = 0;
        std::size_t first = 0;
        double sum = 0.0;
        for (auto j : result.order[i]) {
            if (junk[j]) continue;
            ++position;
            if (rel[j]) {
                if (hits == 0) first = position;
                ++hits;
                sum += static_cast<double>(hits) / static_cast<double>(position);
            }
        }
        if (hits == 0) {
            m.excluded.push_back(i);
            m.warnings.push_back("query " + std::to_string(i) + " has no relevant gallery item; excluded");
            continue;
        }
        const double ap = sum / static_cast<double>(hits);
        m.per_query_ap.push_back(ap);
        m.evaluated.push_back(i);
        ap_sum += ap;
        if (first <= max_rank) ++hit_at[first - 1];
    }
    if (m.evaluated.empty()) throw EvaluationError("no query has a relevant gallery item");
    const auto n = static_cast<double>(m.evaluated.size());
    m.map = ap_sum / n;
    m.cmc.resize(max_rank);
    std::size_t cumulative = 0;
    for (std::size_t k = 0; k < max_rank; ++k) {
        cumulative += hit_at[k];
        m.cmc[k] = static_cast<double>(cumulative) / n;
    }
    return m;
}

double compute_map(const RankingResult& result) { return compute_metrics(result, 1).map; }

double compute_cmc(const RankingResult& result, std::size_t k) {
    if (k == 0) throw InputError("Rank@k needs k >= 1");
    return compute_metrics(result, k).rank(k);
}

// ---------------------------------------------------------------------------

void EvalReport::validate() const {
    auto in_unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
    if (!in_unit(map) || !in_unit(r1) || !in_unit(r5) || !in_unit(r10)) {
        throw InvariantError("report metrics must lie in [0, 1]");
    }
    if (!(r1 <= r5 && r5 <= r10)) throw InvariantError("report violates rank@1 <= rank@5 <= rank@10");
    for (auto ap : per_query_ap) {
        if (!in_unit(ap)) throw InvariantError("per-query AP outside [0, 1]");
    }
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["version"] = version;
    j["mAP"] = map;
    j["rank1"] = r1;
    j["rank5"] = r5;
    j["rank10"] = r10;
    j["per_query_ap"] = per_query_ap;
    j["excluded_queries"] = excluded_queries;
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& doc) {
    EvalReport r;
    try {
        r.schema_version = doc.at("schema_version").get<int>();
        r.strategy = doc.at("strategy").get<std::string>();
        r.seed = doc.at("seed").get<std::uint64_t>();
        r.config_hash = doc.at("config_hash").get<std::string>();
        r.version = doc.value("version", std::string{});
        r.map = doc.at("mAP").get<double>();
        r.r1 = doc.at("rank1").get<double>();
        r.r5 = doc.at("rank5").get<double>();
        r.r10 = doc.at("rank10").get<double>();
        r.per_query_ap = doc.value("per_query_ap", std::vector<double>{});
        r.excluded_queries = doc.value("excluded_queries", std::size_t{0});
    } catch (const nlohmann::json::exception& ex) {
        throw InputError("malformed evaluation report: " + std::string(ex.what()));
    }
    r.validate();
    return r;
}

void EvalReport::save(const std::filesystem::path& path) const {
    validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, to_json().dump(2) + "\n");
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open report " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        throw InputError(path.string() + ": " + ex.what());
    }
    return from_json(doc);
}

EvalReport make_report(const RetrievalMetrics& metrics, const std::string& strategy, std::uint64_t seed,
                       const std::string& config_hash) {
    EvalReport r;
    r.strategy = strategy;
    r.seed = seed;
    r.config_hash = config_hash;
    r.map = metrics.map;
    r.r1 = metrics.rank(1);
    r.r5 = metrics.rank(std::min<std::size_t>(5, metrics.cmc.size()));
    r.r10 = metrics.rank(std::min<std::size_t>(10, metrics.cmc.size()));
    r.per_query_ap = metrics.per_query_ap;
    r.excluded_queries = metrics.excluded.size();
    r.validate();
    return r;
}

RetrievalMetrics evaluate_model(const MpReidModel& model, const TensorMap& params, const SyntheticDataset& data) {
    if (data.query.empty() || data.gallery.empty()) throw InputError("dataset has no query or gallery split");
    auto embed = [&](const std::vector<PersonRecord>& records) {
        std::vector<const Tensor*> images;
        EmbeddingSet set;
        for (const auto& r : records) {
            images.push_back(&r.image);
            set.identities.push_back(r.identity);
            set.cameras.push_back(r.camera);
        }
        set.features = model.embed(params, images);
        return set;
    };
    return compute_metrics(rank_gallery(embed(data.query), embed(data.gallery)), 10);
}

}  // namespace mpreid
