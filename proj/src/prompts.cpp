// SPDX-License-Identifier: Apache-2.0
#include "mpreid/prompts.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "mpreid/archive.hpp"
#include "mpreid/errors.hpp"
#include "mpreid/rng.hpp"

namespace mpreid {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool starts_with_vowel(std::string_view s) {
    if (s.empty()) return false;
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(s.front())));
    return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u';
}

bool is_plural_or_mass(std::string_view s) {
    if (s.ends_with("hair")) return true;
    return s.size() > 1 && s.back() == 's' && !s.ends_with("ss");
}

// "yellow shirt" -> "a yellow shirt"; "shorts", "no hat", "long hair" unchanged.
std::string with_article(const std::string& phrase) {
    if (phrase.starts_with("no ") || is_plural_or_mass(phrase)) return phrase;
    return (starts_with_vowel(phrase) ? "an " : "a ") + phrase;
}

std::string join_list(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
        out += items[i];
    }
    return out;
}

bool is_yes_no(const std::string& v) { return v == "yes" || v == "no"; }

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

void check_record(const AttributeRecord& record) {
    if (record.attributes.empty()) {
        throw InputError("identity " + std::to_string(record.identity) + " has no attributes");
    }
    for (const auto& [k, v] : record.attributes) {
        if (k.empty() || v.empty()) {
            throw InputError("identity " + std::to_string(record.identity) + " has an empty attribute name or value");
        }
    }
}

std::size_t count_occurrences(const std::string& s, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) ++n;
    return n;
}

void validate_question(const Question& q) {
    if (q.text.empty() || q.attribute.empty()) {
        throw ConfigError("question bank entry needs question text and an attribute");
    }
    if (q.kind == Question::Kind::value) {
        if (count_occurrences(q.template_text, "{answer}") != 1 || count_occurrences(q.template_text, "{") != 1) {
            throw ConfigError("question \"" + q.text + "\": sentence template must contain exactly one {answer} slot");
        }
    } else {
        if (q.yes_sentence.empty() || q.no_sentence.empty()) {
            throw ConfigError("question \"" + q.text + "\": yes/no question needs both sentences");
        }
        if (q.yes_sentence.find('{') != std::string::npos || q.no_sentence.find('{') != std::string::npos) {
            throw ConfigError("question \"" + q.text + "\": yes/no sentences take no slots");
        }
    }
}

std::string line_of(const PromptSet& s) {
    nlohmann::json j;
    j["id"] = s.identity;
    j["chatgpt"] = s.chatgpt;
    j["vqa"] = s.vqa;
    j["T"] = s.implicit_tokens;
    return j.dump();
}

}  // namespace

std::vector<std::string> attribute_words(const AttributeRecord& record) {
    std::vector<std::string> words;
    words.reserve(record.attributes.size());
    for (const auto& [key, value] : record.attributes) {
        if (value == "yes") {
            words.push_back(key);
        } else if (value == "no") {
            words.push_back("no " + key);
        } else {
            words.push_back(value);
        }
    }
    return words;
}

bool covers_attribute_words(const std::string& sentence, const std::vector<std::string>& words) {
    const std::string s = lower(sentence);
    return std::all_of(words.begin(), words.end(),
                       [&](const std::string& w) { return s.find(lower(w)) != std::string::npos; });
}

// ---------------------------------------------------------------------------

QuestionBank::QuestionBank(std::vector<Question> questions) : questions_(std::move(questions)) {
    if (questions_.size() < kVqaPromptCount) {
        throw ConfigError("question bank holds " + std::to_string(questions_.size()) + " questions; at least " +
                          std::to_string(kVqaPromptCount) + " are required");
    }
    for (const auto& q : questions_) validate_question(q);
}

QuestionBank QuestionBank::defaults() {
    auto yes_no = [](std::string text, std::string attr, std::string yes, std::string no) {
        Question q;
        q.text = std::move(text);
        q.attribute = std::move(attr);
        q.kind = Question::Kind::yes_no;
        q.yes_sentence = std::move(yes);
        q.no_sentence = std::move(no);
        return q;
    };
    auto value = [](std::string text, std::string attr, std::string tmpl) {
        Question q;
        q.text = std::move(text);
        q.attribute = std::move(attr);
        q.kind = Question::Kind::value;
        q.template_text = std::move(tmpl);
        return q;
    };
    return QuestionBank({
        yes_no("Is the person wearing a tie?", "tie", "The person is wearing a tie.", "The person is not wearing a tie."),
        yes_no("Is the person wearing a watch?", "watch", "The person is wearing a watch.",
               "The person is not wearing a watch."),
        value("What kind of shirt is the person wearing?", "upper", "The person is wearing {answer}."),
        value("What is the person carrying?", "bag", "The person is carrying {answer}."),
        value("What is the person wearing on the head?", "hat", "The person has {answer}."),
        value("What color are the person's shoes?", "shoes", "The person is wearing {answer}."),
        value("How long are the person's sleeves?", "sleeves", "The person has {answer}."),
    });
}

QuestionBank QuestionBank::from_json(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("questions") || !doc["questions"].is_array()) {
        throw ConfigError("question bank JSON needs a \"questions\" array");
    }
    std::vector<Question> qs;
    for (const auto& e : doc["questions"]) {
        Question q;
        try {
            q.text = e.at("question").get<std::string>();
            q.attribute = e.at("attribute").get<std::string>();
            const auto kind = e.value("kind", std::string("value"));
            if (kind == "yesno") {
                q.kind = Question::Kind::yes_no;
                q.yes_sentence = e.at("yes").get<std::string>();
                q.no_sentence = e.at("no").get<std::string>();
            } else if (kind == "value") {
                q.kind = Question::Kind::value;
                q.template_text = e.at("template").get<std::string>();
            } else {
                throw ConfigError("unknown question kind \"" + kind + "\"");
            }
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError(std::string("malformed question bank entry: ") + ex.what());
        }
        qs.push_back(std::move(q));
    }
    return QuestionBank(std::move(qs));
}

QuestionBank QuestionBank::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open question bank " + path.string());
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& ex) {
        throw ConfigError("question bank " + path.string() + ": " + ex.what());
    }
}

nlohmann::json QuestionBank::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& q : questions_) {
        nlohmann::json e;
        e["question"] = q.text;
        e["attribute"] = q.attribute;
        if (q.kind == Question::Kind::yes_no) {
            e["kind"] = "yesno";
            e["yes"] = q.yes_sentence;
            e["no"] = q.no_sentence;
        } else {
            e["kind"] = "value";
            e["template"] = q.template_text;
        }
        arr.push_back(std::move(e));
    }
    return {{"questions", arr}};
}

std::string QuestionBank::answer(const Question& q, const AttributeRecord& record) const {
    auto it = record.attributes.find(q.attribute);
    if (it == record.attributes.end()) {
        throw ConfigError("question \"" + q.text + "\" cannot be answered: attribute \"" + q.attribute +
                          "\" is not in the schema");
    }
    if (q.kind == Question::Kind::yes_no) {
        if (!is_yes_no(it->second)) {
            throw ConfigError("question \"" + q.text + "\" expects a yes/no attribute, got \"" + it->second + "\"");
        }
        return it->second == "yes" ? q.yes_sentence : q.no_sentence;
    }
    std::string out = q.template_text;
    const auto pos = out.find("{answer}");
    out.replace(pos, 8, with_article(it->second));
    return out;
}

void validate_prompt_set(const PromptSet& set, std::size_t identity_count) {
    const auto id = std::to_string(set.identity);
    if (trim(set.chatgpt).empty()) throw InvariantError("identity " + id + ": empty ChatGPT-style prompt");
    if (set.vqa.size() != kVqaPromptCount) {
        throw InvariantError("identity " + id + ": expected 7 VQA prompts, got " + std::to_string(set.vqa.size()));
    }
    for (const auto& s : set.vqa) {
        if (trim(s).empty()) throw InvariantError("identity " + id + ": empty VQA prompt");
    }
    if (set.implicit_ref >= identity_count) {
        throw InvariantError("identity " + id + ": implicit reference " + std::to_string(set.implicit_ref) +
                             " out of range for " + std::to_string(identity_count) + " identities");
    }
    if (set.implicit_tokens == 0) throw InvariantError("identity " + id + ": implicit token count is zero");
}

// ---------------------------------------------------------------------------

std::string TemplateComposer::compose(const AttributeRecord& record) const {
    check_record(record);
    const auto& a = record.attributes;
    auto get = [&](const char* k) -> const std::string* {
        auto it = a.find(k);
        return it == a.end() ? nullptr : &it->second;
    };

    std::string subject;
    if (auto* age = get("age")) subject = *age + " ";
    subject += get("gender") ? *get("gender") : std::string("person");
    subject = starts_with_vowel(subject) ? "An " + subject : "A " + subject;

    std::vector<std::string> with;
    std::vector<std::string> wearing;
    std::vector<std::string> carrying;
    std::set<std::string> handled = {"age", "gender"};

    auto garment = [&](const char* key) {
        if (auto* v = get(key)) {
            handled.insert(key);
            if (v->starts_with("no ")) {
                with.push_back(*v);
            } else {
                wearing.push_back(with_article(*v));
            }
        }
    };
    auto feature = [&](const char* key) {
        if (auto* v = get(key)) {
            handled.insert(key);
            with.push_back(with_article(*v));
        }
    };
    auto flag = [&](const char* key, std::vector<std::string>& dest) {
        if (auto* v = get(key)) {
            handled.insert(key);
            if (*v == "yes") {
                dest.push_back(with_article(key));
            } else if (*v == "no") {
                with.push_back(std::string("no ") + key);
            } else {
                dest.push_back(with_article(*v));
            }
        }
    };

    feature("hair");
    feature("sleeves");
    garment("hat");
    garment("upper");
    flag("tie", wearing);
    garment("lower");
    garment("shoes");
    flag("watch", wearing);
    if (auto* v = get("bag")) {
        handled.insert("bag");
        if (v->starts_with("no ")) {
            with.push_back(*v);
        } else {
            carrying.push_back(with_article(*v));
        }
    }
    for (const auto& [k, v] : a) {
        if (handled.count(k)) continue;
        if (v == "yes") {
            with.push_back(with_article(k));
        } else if (v == "no") {
            with.push_back("no " + k);
        } else {
            with.push_back(with_article(v));
        }
    }

    std::string out = subject;
    if (!with.empty()) out += " with " + join_list(with);
    if (!wearing.empty()) out += (with.empty() ? " wearing " : ", wearing ") + join_list(wearing);
    if (!carrying.empty()) out += ", carrying " + join_list(carrying);
    out += ".";
    return out;
}

std::string TemplateComposer::generate(const GenerationRequest& request) {
    return compose(AttributeRecord{request.identity, request.attributes});
}

std::string generate_chatgpt_prompt(const AttributeRecord& record, GeneratorClient* client,
                                    const ChatPromptOptions& options) {
    check_record(record);
    TemplateComposer composer;
    if (client == nullptr) return composer.compose(record);

    GenerationRequest req{record.identity, attribute_words(record), record.attributes, options.instruction};
    for (std::size_t attempt = 0; attempt <= options.max_retries; ++attempt) {
        std::string sentence;
        try {
            sentence = trim(client->generate(req));
        } catch (const GenerationError&) {
            throw;
        } catch (const std::exception& ex) {
            throw GenerationError("generator failed for identity " + std::to_string(record.identity) + ": " +
                                      ex.what(),
                                  {record.identity});
        }
        if (!sentence.empty() && covers_attribute_words(sentence, req.attribute_words)) return sentence;
    }
    return composer.compose(record);
}

std::vector<std::string> generate_vqa_prompts(const AttributeRecord& record, const QuestionBank& bank,
                                              std::uint64_t seed) {
    if (bank.size() < kVqaPromptCount) {
        throw ConfigError("question bank holds " + std::to_string(bank.size()) + " questions; at least 7 are required");
    }
    const auto& qs = bank.questions();
    for (const auto& q : qs) {
        auto it = record.attributes.find(q.attribute);
        if (it == record.attributes.end()) {
            throw ConfigError("question \"" + q.text + "\" cannot be answered: attribute \"" + q.attribute +
                              "\" is not in the schema");
        }
    }
    Rng rng(seed);
    auto picked = rng.choose(qs.size(), kVqaPromptCount);
    std::sort(picked.begin(), picked.end());
    std::vector<std::string> out;
    out.reserve(kVqaPromptCount);
    for (auto i : picked) out.push_back(bank.answer(qs[i], record));
    return out;
}

ImplicitTemplate implicit_template(const Vocabulary& vocab, std::size_t slots, std::size_t context_length) {
    if (slots < 1 || slots + 6 > context_length) {
        throw InputError("implicit token count " + std::to_string(slots) + " outside [1, " +
                         std::to_string(context_length >= 6 ? context_length - 6 : 0) + "]");
    }
    if (slots > vocab.slot_count()) {
        throw InputError("implicit token count " + std::to_string(slots) + " exceeds the vocabulary's " +
                         std::to_string(vocab.slot_count()) + " placeholder ids");
    }
    const auto prefix = vocab.encode_ids(kImplicitPrefix);
    const auto full = vocab.encode_ids(std::string(kImplicitPrefix) + " " + kImplicitSuffix);
    const std::size_t needed = 2 + full.size() + slots;
    if (needed > context_length) {
        throw InputError("implicit template with " + std::to_string(slots) + " slots needs " + std::to_string(needed) +
                         " tokens; context length is " + std::to_string(context_length));
    }
    ImplicitTemplate out;
    auto& ids = out.sequence.ids;
    ids.reserve(context_length);
    ids.push_back(vocab.sos());
    ids.insert(ids.end(), prefix.begin(), prefix.end());
    for (std::size_t i = 0; i < slots; ++i) {
        out.slot_positions.push_back(ids.size());
        ids.push_back(vocab.slot(i));
    }
    ids.insert(ids.end(), full.begin() + static_cast<std::ptrdiff_t>(prefix.size()), full.end());
    out.sequence.eos_position = ids.size();
    ids.push_back(vocab.eos());
    ids.resize(context_length, vocab.pad());
    return out;
}

PromptDataset build_prompt_dataset(std::vector<AttributeRecord> records, const QuestionBank& bank,
                                   GeneratorClient* client, const PromptBuildOptions& options) {
    if (records.empty()) throw InputError("no attribute records to build prompts from");
    if (options.implicit_tokens == 0) throw InputError("implicit token count must be at least 1");
    std::sort(records.begin(), records.end(),
              [](const AttributeRecord& a, const AttributeRecord& b) { return a.identity < b.identity; });
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].identity == records[i - 1].identity) {
            throw InputError("duplicate identity " + std::to_string(records[i].identity));
        }
    }

    const std::size_t n = records.size();
    std::vector<PromptSet> sets(n);
    std::vector<std::string> failures(n);
    std::atomic<std::size_t> next{0};

    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            const auto& rec = records[i];
            try {
                PromptSet s;
                s.identity = rec.identity;
                s.chatgpt = generate_chatgpt_prompt(rec, client, options.chat);
                const auto seed = options.sampling == VqaSampling::shared
                                      ? options.seed
                                      : derive_seed(options.seed, {static_cast<std::uint64_t>(rec.identity)});
                s.vqa = generate_vqa_prompts(rec, bank, seed);
                s.implicit_ref = i;
                s.implicit_tokens = options.implicit_tokens;
                sets[i] = std::move(s);
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& ex) {
                failures[i] = ex.what();
            }
        }
    };

    const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, n);
    if (workers == 1) {
        work();
    } else {
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    work();
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    std::vector<std::int64_t> failed;
    std::string report;
    for (std::size_t i = 0; i < n; ++i) {
        if (!failures[i].empty()) {
            failed.push_back(records[i].identity);
            report += "\n  identity " + std::to_string(records[i].identity) + ": " + failures[i];
        }
    }
    if (!failed.empty()) {
        throw GenerationError("prompt generation failed for " + std::to_string(failed.size()) + " identities:" + report,
                              failed);
    }

    PromptDataset out;
    out.sets = std::move(sets);
    if (options.vocab != nullptr) {
        const std::size_t limit = options.context_length >= 2 ? options.context_length - 2 : 0;
        for (const auto& s : out.sets) {
            auto check = [&](const std::string& sentence) {
                const auto len = options.vocab->encode_ids(sentence).size();
                if (len > limit) {
                    out.warnings.push_back("identity " + std::to_string(s.identity) + ": prompt of " +
                                           std::to_string(len) + " tokens exceeds context; it will be truncated");
                }
            };
            check(s.chatgpt);
            for (const auto& v : s.vqa) check(v);
        }
    }
    return out;
}

std::string serialize_prompt_dataset(const std::vector<PromptSet>& sets) {
    std::string out;
    for (const auto& s : sets) {
        out += line_of(s);
        out += '\n';
    }
    return out;
}

void write_prompt_dataset(const std::filesystem::path& path, const std::vector<PromptSet>& sets) {
    for (const auto& s : sets) validate_prompt_set(s, sets.size());
    write_file_atomic(path, serialize_prompt_dataset(sets));
}

std::vector<PromptSet> read_prompt_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open prompt dataset " + path.string());
    std::vector<PromptSet> sets;
    std::string line;
    std::size_t lineno = 0;
    std::set<std::int64_t> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        PromptSet s;
        try {
            const auto j = nlohmann::json::parse(line);
            s.identity = j.at("id").get<std::int64_t>();
            s.chatgpt = j.at("chatgpt").get<std::string>();
            s.vqa = j.at("vqa").get<std::vector<std::string>>();
            s.implicit_tokens = j.at("T").get<std::size_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), lineno);
        }
        if (!seen.insert(s.identity).second) {
            throw ParseError("duplicate identity " + std::to_string(s.identity), lineno);
        }
        s.implicit_ref = sets.size();
        sets.push_back(std::move(s));
    }
    for (const auto& s : sets) validate_prompt_set(s, sets.size());
    return sets;
}

std::vector<std::string> prompt_corpus(const std::vector<PromptSet>& sets) {
    std::vector<std::string> corpus;
    corpus.reserve(sets.size() * (kVqaPromptCount + 1) + 1);
    for (const auto& s : sets) {
        corpus.push_back(s.chatgpt);
        corpus.insert(corpus.end(), s.vqa.begin(), s.vqa.end());
    }
    corpus.push_back(std::string(kImplicitPrefix) + " " + kImplicitSuffix);
    return corpus;
}

}  // namespace mpreid
