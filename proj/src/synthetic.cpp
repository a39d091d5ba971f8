// SPDX-License-Identifier: Apache-2.0
#include "mpreid/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mpreid/archive.hpp"
#include "mpreid/errors.hpp"
#include "mpreid/rng.hpp"

namespace mpreid {

namespace {

using Rgb = std::array<double, 3>;

const std::vector<std::pair<std::string, Rgb>>& palette() {
    static const std::vector<std::pair<std::string, Rgb>> p = {
        {"red", {0.85, 0.15, 0.15}},   {"blue", {0.15, 0.25, 0.85}},  {"green", {0.15, 0.7, 0.2}},
        {"yellow", {0.95, 0.85, 0.1}}, {"black", {0.05, 0.05, 0.05}}, {"white", {0.97, 0.97, 0.97}},
        {"gray", {0.55, 0.55, 0.6}},   {"purple", {0.55, 0.2, 0.7}},
    };
    return p;
}

std::vector<std::string> colored(const std::vector<std::string>& items) {
    std::vector<std::string> out;
    for (const auto& [c, rgb] : palette()) {
        for (const auto& i : items) out.push_back(c + " " + i);
    }
    return out;
}

Rgb color_of(const std::string& value) {
    for (const auto& [c, rgb] : palette()) {
        if (value.starts_with(c + " ")) return rgb;
    }
    throw InputError("no color in attribute value \"" + value + "\"");
}

constexpr std::size_t kGrid = 32;
constexpr double kTintGain = 0.35;
constexpr double kTintMix = 0.3;
constexpr double kTintOffset = 0.15;
constexpr Rgb kBackground{0.45, 0.5, 0.45};
constexpr Rgb kSkin{0.9, 0.74, 0.6};
constexpr Rgb kHatColor{0.2, 0.2, 0.45};
constexpr Rgb kTie{0.6, 0.0, 0.12};
constexpr Rgb kWatch{0.8, 0.65, 0.05};
constexpr Rgb kBag{0.35, 0.22, 0.1};
constexpr Rgb kInner{0.88, 0.88, 0.82};

struct Canvas {
    std::array<Rgb, kGrid * kGrid> px;

    Canvas() { px.fill(kBackground); }
    void rect(std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1, const Rgb& c) {
        for (std::size_t y = y0; y <= y1; ++y) {
            for (std::size_t x = x0; x <= x1; ++x) px[y * kGrid + x] = c;
        }
    }
};

const std::string& attr(const AttributeRecord& r, const char* key) {
    auto it = r.attributes.find(key);
    if (it == r.attributes.end()) {
        throw InputError("identity " + std::to_string(r.identity) + " lacks attribute \"" + key + "\"");
    }
    return it->second;
}

Canvas draw(const AttributeRecord& r) {
    Canvas cv;
    const bool man = attr(r, "gender") == "man";
    const auto& age = attr(r, "age");
    const Rgb hair = age == "young" ? Rgb{0.4, 0.22, 0.08} : age == "adult" ? Rgb{0.12, 0.1, 0.1} : Rgb{0.82, 0.82, 0.85};

    // head and hair
    cv.rect(4, 10, 13, 19, kSkin);
    cv.rect(4, 5, 13, 19, hair);
    if (attr(r, "hair") == "long hair") {
        cv.rect(4, 13, 12, 12, hair);
        cv.rect(4, 13, 20, 20, hair);
    }
    const auto& hat = attr(r, "hat");
    if (hat == "cap") {
        cv.rect(2, 4, 13, 19, kHatColor);
        cv.rect(4, 4, 20, 23, kHatColor);
    } else if (hat == "hat") {
        cv.rect(0, 3, 14, 18, kHatColor);
        cv.rect(4, 4, 10, 22, kHatColor);
    }

    // torso and arms
    const auto& upper = attr(r, "upper");
    const Rgb top = color_of(upper);
    const std::size_t tx0 = man ? 10 : 11;
    const std::size_t tx1 = man ? 22 : 21;
    cv.rect(11, 19, tx0, tx1, top);
    if (upper.ends_with("shirt") && !upper.ends_with("t-shirt")) {
        const Rgb button{top[0] * 0.5, top[1] * 0.5, top[2] * 0.5 + 0.3};
        for (std::size_t y = 12; y <= 19; y += 2) cv.rect(y, y, 15, 15, button);
    } else if (upper.ends_with("jacket")) {
        cv.rect(11, 19, 14, 18, kInner);
    }
    if (attr(r, "tie") == "yes") cv.rect(12, 18, 16, 17, kTie);

    const std::size_t la = man ? 8 : 9;
    const std::size_t ra = man ? 23 : 22;
    const bool long_sleeves = attr(r, "sleeves") == "long sleeves";
    cv.rect(11, 19, la, la + 1, kSkin);
    cv.rect(11, 19, ra, ra + 1, kSkin);
    cv.rect(11, long_sleeves ? 19 : 14, la, la + 1, top);
    cv.rect(11, long_sleeves ? 19 : 14, ra, ra + 1, top);
    if (attr(r, "watch") == "yes") cv.rect(18, 18, la, la + 1, kWatch);

    const auto& bag = attr(r, "bag");
    if (bag == "backpack") {
        cv.rect(11, 17, 12, 12, kBag);
        cv.rect(11, 17, 20, 20, kBag);
    } else if (bag == "handbag") {
        cv.rect(18, 22, 25, 27, kBag);
    }

    // legs and shoes
    const auto& lower = attr(r, "lower");
    const Rgb bottom = color_of(lower);
    cv.rect(20, 28, 12, 15, kSkin);
    cv.rect(20, 28, 17, 20, kSkin);
    if (lower.ends_with("pants")) {
        cv.rect(20, 28, 12, 15, bottom);
        cv.rect(20, 28, 17, 20, bottom);
    } else if (lower.ends_with("shorts")) {
        cv.rect(20, 23, 12, 15, bottom);
        cv.rect(20, 23, 17, 20, bottom);
    } else {
        cv.rect(20, 24, 11, 21, bottom);
    }
    const Rgb shoe = color_of(attr(r, "shoes"));
    cv.rect(29, 30, 12, 15, shoe);
    cv.rect(29, 30, 17, 20, shoe);
    return cv;
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", lineno);
    out.push_back(std::move(cur));
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

const char* split_name(int which) { return which == 0 ? "train" : which == 1 ? "query" : "gallery"; }

}  // namespace

// ---------------------------------------------------------------------------

AttributeSchema AttributeSchema::pedestrian() {
    AttributeSchema s;
    s.fields = {
        {"gender", {"man", "woman"}},
        {"age", {"young", "adult", "elderly"}},
        {"hair", {"short hair", "long hair"}},
        {"hat", {"cap", "hat", "no hat"}},
        {"upper", colored({"t-shirt", "shirt", "jacket"})},
        {"sleeves", {"short sleeves", "long sleeves"}},
        {"tie", {"yes", "no"}},
        {"watch", {"yes", "no"}},
        {"bag", {"backpack", "handbag", "no bag"}},
        {"lower", colored({"pants", "shorts", "skirt"})},
        {"shoes", colored({"shoes"})},
    };
    return s;
}

const std::vector<std::string>* AttributeSchema::values(const std::string& name) const {
    for (const auto& [n, v] : fields) {
        if (n == name) return &v;
    }
    return nullptr;
}

void AttributeSchema::validate(const AttributeRecord& record) const {
    const auto id = std::to_string(record.identity);
    for (const auto& [name, value] : record.attributes) {
        const auto* allowed = values(name);
        if (allowed == nullptr) throw InputError("identity " + id + ": attribute \"" + name + "\" is not in the schema");
        if (std::find(allowed->begin(), allowed->end(), value) == allowed->end()) {
            throw InputError("identity " + id + ": value \"" + value + "\" not allowed for \"" + name + "\"");
        }
    }
    for (const auto& [name, allowed] : fields) {
        if (!record.attributes.count(name)) throw InputError("identity " + id + ": missing attribute \"" + name + "\"");
    }
}

double AttributeSchema::combinations() const {
    double n = 1.0;
    for (const auto& f : fields) n *= static_cast<double>(f.second.size());
    return n;
}

std::size_t SyntheticDatasetSpec::resolved_train_identities() const {
    return train_identities != 0 ? train_identities : identities / 2;
}

std::size_t SyntheticDatasetSpec::resolved_query_per_identity() const {
    return query_per_identity != 0 ? query_per_identity : std::max<std::size_t>(1, samples_per_identity / 4);
}

void SyntheticDatasetSpec::validate() const {
    if (identities < 2) throw InputError("synthetic dataset needs at least 2 identities");
    if (samples_per_identity < 2) throw InputError("synthetic dataset needs at least 2 samples per identity");
    if (cameras < 1) throw InputError("synthetic dataset needs at least one camera");
    if (image_size < 8) throw InputError("image size must be at least 8");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw InputError("noise level must be finite and non-negative");
    if (!(camera_shift >= 0.0) || !std::isfinite(camera_shift)) {
        throw InputError("camera shift must be finite and non-negative");
    }
    const auto train = resolved_train_identities();
    if (train < 1 || train >= identities) {
        throw InputError("train identity count must leave at least one identity on each side of the split");
    }
    if (resolved_query_per_identity() >= samples_per_identity) {
        throw InputError("query samples per identity must leave at least one gallery sample");
    }
    if (static_cast<double>(identities) > schema.combinations()) {
        throw InputError("schema cannot produce " + std::to_string(identities) + " distinct attribute vectors");
    }
    for (const auto& [name, allowed] : schema.fields) {
        if (allowed.empty()) throw InputError("schema attribute \"" + name + "\" has no values");
    }
}

Tensor render_person(const AttributeRecord& record, std::size_t image_size) {
    const auto cv = draw(record);
    Tensor img({image_size, image_size, 3});
    for (std::size_t y = 0; y < image_size; ++y) {
        const std::size_t gy = y * kGrid / image_size;
        for (std::size_t x = 0; x < image_size; ++x) {
            const std::size_t gx = x * kGrid / image_size;
            const auto& c = cv.px[gy * kGrid + gx];
            for (std::size_t ch = 0; ch < 3; ++ch) img[(y * image_size + x) * 3 + ch] = c[ch];
        }
    }
    return img;
}

std::array<double, 3> CameraTint::apply(const std::array<double, 3>& rgb) const {
    std::array<double, 3> out{};
    for (std::size_t r = 0; r < 3; ++r) {
        double v = offset[r];
        for (std::size_t c = 0; c < 3; ++c) v += matrix[r * 3 + c] * rgb[c];
        out[r] = v;
    }
    return out;
}

CameraTint camera_tint(std::uint64_t seed, std::size_t camera, double strength) {
    Rng rng(derive_seed(seed, {0xCA3E8Aull, camera}));
    CameraTint t;
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            const double delta = r == c ? rng.uniform(-kTintGain, kTintGain) : rng.uniform(-kTintMix, kTintMix);
            t.matrix[r * 3 + c] = (r == c ? 1.0 : 0.0) + strength * delta;
        }
    }
    for (auto& o : t.offset) o = strength * rng.uniform(-kTintOffset, kTintOffset);
    return t;
}

SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec) {
    spec.validate();
    SyntheticDataset data;
    data.spec = spec;

    Rng attr_rng(derive_seed(spec.seed, {0xA77Bull}));
    std::set<std::vector<std::size_t>> used;
    for (std::size_t id = 0; id < spec.identities; ++id) {
        std::vector<std::size_t> choice(spec.schema.fields.size());
        do {
            for (std::size_t f = 0; f < choice.size(); ++f) choice[f] = attr_rng.index(spec.schema.fields[f].second.size());
        } while (!used.insert(choice).second);
        AttributeRecord rec;
        rec.identity = static_cast<std::int64_t>(id);
        for (std::size_t f = 0; f < choice.size(); ++f) {
            rec.attributes.emplace(spec.schema.fields[f].first, spec.schema.fields[f].second[choice[f]]);
        }
        data.identities.push_back(std::move(rec));
    }

    std::vector<CameraTint> tints;
    for (std::size_t c = 0; c < spec.cameras; ++c) tints.push_back(camera_tint(spec.seed, c, spec.camera_shift));

    const auto train_ids = spec.resolved_train_identities();
    const auto nq = spec.resolved_query_per_identity();
    for (std::size_t id = 0; id < spec.identities; ++id) {
        const auto& rec = data.identities[id];
        const Tensor base = render_person(rec, spec.image_size);
        for (std::size_t s = 0; s < spec.samples_per_identity; ++s) {
            PersonRecord p;
            p.identity = rec.identity;
            p.camera = (s + id) % spec.cameras;
            p.attributes = rec;
            p.image = base;
            const auto& tint = tints[p.camera];
            Rng noise(derive_seed(spec.seed, {0x901Eull, id, s}));
            auto px = p.image.data();
            for (std::size_t i = 0; i < px.size(); i += 3) {
                const auto rgb = tint.apply({px[i], px[i + 1], px[i + 2]});
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    double v = rgb[ch];
                    if (spec.noise > 0.0) v += noise.normal(0.0, spec.noise);
                    px[i + ch] = std::clamp(v, 0.0, 1.0);
                }
            }
            if (id < train_ids) {
                data.train.push_back(std::move(p));
            } else if (s < nq) {
                data.query.push_back(std::move(p));
            } else {
                data.gallery.push_back(std::move(p));
            }
        }
    }
    return data;
}

// ---------------------------------------------------------------------------

std::vector<AttributeRecord> parse_attribute_table(const std::string& text, const AttributeSchema* schema) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> header;
    while (header.empty() && std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        header = split_csv_line(line, lineno);
    }
    if (header.empty()) throw ParseError("attribute table is empty", lineno);
    if (header.front() != "id") throw ParseError("first column must be \"id\"", lineno);
    if (header.size() < 2) throw ParseError("attribute table has no attribute columns", lineno);
    std::set<std::string> names;
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (header[i].empty()) throw ParseError("empty column name", lineno);
        if (!names.insert(header[i]).second) throw ParseError("duplicate column \"" + header[i] + "\"", lineno);
        if (schema != nullptr && !schema->contains(header[i])) {
            throw ParseError("column \"" + header[i] + "\" is not in the schema", lineno);
        }
    }
    if (schema != nullptr) {
        for (const auto& [name, v] : schema->fields) {
            if (!names.count(name)) throw ParseError("missing column \"" + name + "\"", lineno);
        }
    }

    std::vector<AttributeRecord> out;
    std::map<std::int64_t, std::size_t> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split_csv_line(line, lineno);
        if (cells.size() != header.size()) {
            throw ParseError("expected " + std::to_string(header.size()) + " columns, found " +
                                 std::to_string(cells.size()),
                             lineno);
        }
        AttributeRecord rec;
        try {
            std::size_t used = 0;
            rec.identity = std::stoll(cells[0], &used);
            if (used != cells[0].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ParseError("invalid id \"" + cells[0] + "\"", lineno);
        }
        if (auto [it, fresh] = seen.emplace(rec.identity, lineno); !fresh) {
            throw ParseError("duplicate id " + cells[0] + " (first seen on line " + std::to_string(it->second) + ")",
                             lineno);
        }
        for (std::size_t i = 1; i < header.size(); ++i) {
            if (cells[i].empty()) throw ParseError("empty value for \"" + header[i] + "\"", lineno);
            if (schema != nullptr) {
                const auto* allowed = schema->values(header[i]);
                if (std::find(allowed->begin(), allowed->end(), cells[i]) == allowed->end()) {
                    throw ParseError("value \"" + cells[i] + "\" not allowed for \"" + header[i] + "\"", lineno);
                }
            }
            rec.attributes.emplace(header[i], cells[i]);
        }
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<AttributeRecord> import_attribute_table(const std::filesystem::path& path, const AttributeSchema* schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open attribute table " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_attribute_table(ss.str(), schema);
}

std::string format_attribute_table(const std::vector<AttributeRecord>& records) {
    std::set<std::string> columns;
    for (const auto& r : records) {
        for (const auto& [k, v] : r.attributes) columns.insert(k);
    }
    std::string out = "id";
    for (const auto& c : columns) out += "," + csv_field(c);
    out += "\n";
    for (const auto& r : records) {
        out += std::to_string(r.identity);
        for (const auto& c : columns) {
            auto it = r.attributes.find(c);
            out += "," + (it == r.attributes.end() ? std::string() : csv_field(it->second));
        }
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------

void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& data) {
    std::filesystem::create_directories(dir);
    TensorMap images;
    std::string manifest;
    const std::vector<const std::vector<PersonRecord>*> splits = {&data.train, &data.query, &data.gallery};
    for (int w = 0; w < 3; ++w) {
        const auto& recs = *splits[static_cast<std::size_t>(w)];
        for (std::size_t i = 0; i < recs.size(); ++i) {
            char key[64];
            std::snprintf(key, sizeof key, "%s/%06zu", split_name(w), i);
            images.emplace(key, recs[i].image);
            nlohmann::json j;
            j["split"] = split_name(w);
            j["index"] = i;
            j["id"] = recs[i].identity;
            j["camera"] = recs[i].camera;
            j["image"] = key;
            manifest += j.dump() + "\n";
        }
    }
    nlohmann::json spec;
    spec["identities"] = data.spec.identities;
    spec["samples_per_identity"] = data.spec.samples_per_identity;
    spec["image_size"] = data.spec.image_size;
    spec["noise"] = data.spec.noise;
    spec["cameras"] = data.spec.cameras;
    spec["camera_shift"] = data.spec.camera_shift;
    spec["seed"] = data.spec.seed;
    spec["train_identities"] = data.spec.resolved_train_identities();
    spec["query_per_identity"] = data.spec.resolved_query_per_identity();

    save_archive(dir / "images.mpt", images);
    write_file_atomic(dir / "records.jsonl", manifest);
    write_file_atomic(dir / "attributes.csv", format_attribute_table(data.identities));
    write_file_atomic(dir / "spec.json", spec.dump(2) + "\n");
}

SyntheticDataset load_dataset(const std::filesystem::path& dir) {
    SyntheticDataset data;
    {
        std::ifstream in(dir / "spec.json");
        if (!in) throw InputError("dataset directory " + dir.string() + " has no spec.json");
        try {
            const auto j = nlohmann::json::parse(in);
            data.spec.identities = j.at("identities");
            data.spec.samples_per_identity = j.at("samples_per_identity");
            data.spec.image_size = j.at("image_size");
            data.spec.noise = j.at("noise");
            data.spec.cameras = j.at("cameras");
            data.spec.camera_shift = j.at("camera_shift");
            data.spec.seed = j.at("seed");
            data.spec.train_identities = j.at("train_identities");
            data.spec.query_per_identity = j.at("query_per_identity");
        } catch (const nlohmann::json::exception& ex) {
            throw InputError("malformed spec.json: " + std::string(ex.what()));
        }
    }
    data.identities = import_attribute_table(dir / "attributes.csv");
    std::map<std::int64_t, const AttributeRecord*> by_id;
    for (const auto& r : data.identities) by_id.emplace(r.identity, &r);

    const auto images = load_archive(dir / "images.mpt");
    std::ifstream in(dir / "records.jsonl");
    if (!in) throw InputError("dataset directory " + dir.string() + " has no records.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        PersonRecord p;
        std::string split;
        std::string key;
        try {
            const auto j = nlohmann::json::parse(line);
            split = j.at("split").get<std::string>();
            key = j.at("image").get<std::string>();
            p.identity = j.at("id").get<std::int64_t>();
            p.camera = j.at("camera").get<std::size_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), lineno);
        }
        auto img = images.find(key);
        if (img == images.end()) throw ParseError("image \"" + key + "\" missing from archive", lineno);
        auto attr = by_id.find(p.identity);
        if (attr == by_id.end()) throw ParseError("identity " + std::to_string(p.identity) + " has no attributes", lineno);
        p.image = img->second;
        p.attributes = *attr->second;
        if (split == "train") {
            data.train.push_back(std::move(p));
        } else if (split == "query") {
            data.query.push_back(std::move(p));
        } else if (split == "gallery") {
            data.gallery.push_back(std::move(p));
        } else {
            throw ParseError("unknown split \"" + split + "\"", lineno);
        }
    }
    return data;
}

}  // namespace mpreid
