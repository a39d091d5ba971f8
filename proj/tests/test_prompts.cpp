// SPDX-License-Identifier: Apache-2.0
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <doctest.h>
#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mpreid/errors.hpp"
#include "mpreid/http_generator.hpp"
#include "mpreid/prompts.hpp"
#include "mpreid/synthetic.hpp"
#include "mpreid/tokenizer.hpp"

using namespace mpreid;
namespace fs = std::filesystem;

namespace {

AttributeRecord record(std::int64_t id, std::map<std::string, std::string> attrs) {
    return AttributeRecord{id, std::move(attrs)};
}

std::vector<AttributeRecord> synthetic_records(std::size_t n, std::uint64_t seed = 3) {
    SyntheticDatasetSpec spec;
    spec.identities = n;
    spec.seed = seed;
    return generate_synthetic(spec).identities;
}

class ScriptedClient final : public GeneratorClient {
public:
    explicit ScriptedClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
    std::string generate(const GenerationRequest&) override {
        const auto i = calls_++;
        return replies_.at(std::min(i, replies_.size() - 1));
    }
    std::size_t calls() const { return calls_; }

private:
    std::vector<std::string> replies_;
    std::size_t calls_ = 0;
};

class FailingClient final : public GeneratorClient {
public:
    explicit FailingClient(std::int64_t bad) : bad_(bad) {}
    std::string generate(const GenerationRequest& r) override {
        if (r.identity == bad_) throw std::runtime_error("connection refused");
        return TemplateComposer().generate(r);
    }

private:
    std::int64_t bad_;
};

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mpreid_prompts_" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

class LocalServer {
public:
    explicit LocalServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/generate", std::move(handler));
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LocalServer() {
        server_.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

HttpGeneratorConfig fast_config(const std::string& url) {
    HttpGeneratorConfig cfg;
    cfg.base_url = url;
    cfg.retries = 2;
    cfg.backoff = std::chrono::milliseconds(1);
    cfg.timeout = std::chrono::milliseconds(2000);
    return cfg;
}

}  // namespace

TEST_CASE("composer describes gender, shirt and lower garment") {
    const auto r = record(1, {{"gender", "woman"}, {"upper", "yellow shirt"}, {"lower", "shorts"}});
    CHECK(TemplateComposer().compose(r) == "A woman wearing a yellow shirt and shorts.");
    CHECK(generate_chatgpt_prompt(r, nullptr) == "A woman wearing a yellow shirt and shorts.");
}

TEST_CASE("empty attribute map is rejected") {
    CHECK_THROWS_AS(generate_chatgpt_prompt(record(1, {}), nullptr), InputError);
}

TEST_CASE("composer covers every attribute word") {
    for (const auto& r : synthetic_records(200)) {
        const auto s = TemplateComposer().compose(r);
        CHECK_MESSAGE(covers_attribute_words(s, attribute_words(r)), s);
    }
}

TEST_CASE("client sentence missing a word is retried once then replaced") {
    const auto r = record(5, {{"gender", "woman"}, {"upper", "yellow shirt"}, {"lower", "shorts"}});
    ScriptedClient client({"A woman in a shirt and shorts."});
    const auto s = generate_chatgpt_prompt(r, &client);
    CHECK(client.calls() == 2);
    CHECK(s == "A woman wearing a yellow shirt and shorts.");

    ScriptedClient second({"A woman in shorts.", "A woman in a yellow shirt and shorts."});
    CHECK(generate_chatgpt_prompt(r, &second) == "A woman in a yellow shirt and shorts.");
    CHECK(second.calls() == 2);
}

TEST_CASE("client transport failure surfaces as GenerationError carrying the identity") {
    FailingClient client(9);
    try {
        generate_chatgpt_prompt(record(9, {{"gender", "man"}}), &client);
        FAIL("expected GenerationError");
    } catch (const GenerationError& e) {
        CHECK(e.identities() == std::vector<std::int64_t>{9});
    }
}

TEST_CASE("tie question yields the negative sentence") {
    const auto bank = QuestionBank::defaults();
    const auto& tie = bank.questions().front();
    REQUIRE(tie.text == "Is the person wearing a tie?");
    CHECK(bank.answer(tie, record(1, {{"tie", "no"}})) == "The person is not wearing a tie.");
    CHECK(bank.answer(tie, record(1, {{"tie", "yes"}})) == "The person is wearing a tie.");
}

TEST_CASE("VQA prompts are seven, deterministic and answered from the record") {
    const auto bank = QuestionBank::defaults();
    for (const auto& r : synthetic_records(20)) {
        const auto a = generate_vqa_prompts(r, bank, 11);
        const auto b = generate_vqa_prompts(r, bank, 11);
        CHECK(a.size() == kVqaPromptCount);
        CHECK(a == b);
        for (const auto& s : a) CHECK_FALSE(s.empty());
        CHECK(std::find(a.begin(), a.end(), bank.answer(bank.questions()[0], r)) != a.end());
    }
}

TEST_CASE("larger banks sample different questions per seed") {
    auto qs = QuestionBank::defaults().questions();
    Question extra;
    extra.text = "What is the person's gender?";
    extra.attribute = "gender";
    extra.template_text = "The person is a {answer}.";
    qs.push_back(extra);
    qs.push_back(extra);
    const QuestionBank bank(qs);
    const auto r = synthetic_records(2).front();
    bool differs = false;
    const auto base = generate_vqa_prompts(r, bank, 0);
    for (std::uint64_t s = 1; s < 20 && !differs; ++s) differs = generate_vqa_prompts(r, bank, s) != base;
    CHECK(differs);
}

TEST_CASE("bank with six questions is a configuration error") {
    auto qs = QuestionBank::defaults().questions();
    qs.pop_back();
    CHECK_THROWS_AS(QuestionBank{qs}, ConfigError);
    auto doc = QuestionBank::defaults().to_json();
    doc["questions"].erase(doc["questions"].size() - 1);
    CHECK_THROWS_AS(QuestionBank::from_json(doc), ConfigError);
}

TEST_CASE("unanswerable question names the question") {
    auto qs = QuestionBank::defaults().questions();
    Question q;
    q.text = "Is the person holding an umbrella?";
    q.attribute = "umbrella";
    q.kind = Question::Kind::yes_no;
    q.yes_sentence = "The person holds an umbrella.";
    q.no_sentence = "The person holds no umbrella.";
    qs.push_back(q);
    const QuestionBank bank(qs);
    try {
        generate_vqa_prompts(synthetic_records(2).front(), bank, 0);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("Is the person holding an umbrella?") != std::string::npos);
    }
}

TEST_CASE("question bank JSON round trip") {
    const auto bank = QuestionBank::defaults();
    const auto back = QuestionBank::from_json(bank.to_json());
    REQUIRE(back.size() == bank.size());
    const auto r = synthetic_records(2).front();
    for (std::size_t i = 0; i < bank.size(); ++i) {
        CHECK(back.answer(back.questions()[i], r) == bank.answer(bank.questions()[i], r));
    }
}

TEST_CASE("implicit template places T consecutive slots between 'a' and 'person'") {
    const auto v = Vocabulary::build(prompt_corpus({}), 400);
    const auto t = implicit_template(v, 4, 77);
    REQUIRE(t.slot_positions.size() == 4);
    for (std::size_t i = 1; i < 4; ++i) CHECK(t.slot_positions[i] == t.slot_positions[i - 1] + 1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(t.sequence.ids[t.slot_positions[i]] == v.slot(i));
    const auto& ids = t.sequence.ids;
    const std::vector<TokenId> before(ids.begin() + 1, ids.begin() + static_cast<std::ptrdiff_t>(t.slot_positions[0]));
    CHECK(v.decode(before) == "a photo of a");
    const std::vector<TokenId> after(ids.begin() + static_cast<std::ptrdiff_t>(t.slot_positions[3] + 1),
                                     ids.begin() + static_cast<std::ptrdiff_t>(t.sequence.eos_position));
    CHECK(v.decode(after) == " person");
    CHECK(ids.size() == 77);
    CHECK(ids[t.sequence.eos_position] == v.eos());
}

TEST_CASE("implicit template bounds") {
    const auto v = Vocabulary::build(prompt_corpus({}), 400);
    CHECK_THROWS_AS(implicit_template(v, 0, 77), InputError);
    CHECK_THROWS_AS(implicit_template(v, 72, 77), InputError);
    CHECK_THROWS_AS(implicit_template(v, kDefaultSlotCount + 1, 77), InputError);
}

TEST_CASE("placeholders never appear in encoded real sentences") {
    const auto records = synthetic_records(30);
    const auto ds = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, {});
    const auto v = Vocabulary::build(prompt_corpus(ds.sets), 800);
    for (const auto& s : prompt_corpus(ds.sets)) {
        for (auto id : v.encode_ids(s)) CHECK_FALSE(v.is_reserved(id));
    }
    for (auto id : v.encode_ids("a photo of a [x] [X] person")) CHECK_FALSE(v.is_reserved(id));
}

TEST_CASE("three records give three JSON lines with one chatgpt and seven VQA prompts") {
    const auto records = synthetic_records(3);
    const auto ds = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, {});
    REQUIRE(ds.sets.size() == 3);
    TempDir dir;
    const auto path = dir.path / "prompts.jsonl";
    write_prompt_dataset(path, ds.sets);
    std::ifstream in(path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.at("chatgpt").is_string());
        CHECK(j.at("vqa").size() == 7);
        CHECK(j.at("T").get<std::size_t>() == 4);
        CHECK(j.contains("id"));
        ++lines;
    }
    CHECK(lines == 3);
    CHECK(read_prompt_dataset(path) == ds.sets);
}

TEST_CASE("prompt dataset preconditions") {
    auto records = synthetic_records(4);
    records.push_back(records.front());
    CHECK_THROWS_AS(build_prompt_dataset(records, QuestionBank::defaults(), nullptr, {}), InputError);
    CHECK_THROWS_AS(build_prompt_dataset({}, QuestionBank::defaults(), nullptr, {}), InputError);
}

TEST_CASE("partial generation failure lists the ids and writes nothing") {
    const auto records = synthetic_records(6);
    FailingClient client(records[2].identity);
    TempDir dir;
    const auto path = dir.path / "prompts.jsonl";
    PromptBuildOptions opt;
    opt.workers = 3;
    try {
        const auto ds = build_prompt_dataset(records, QuestionBank::defaults(), &client, opt);
        write_prompt_dataset(path, ds.sets);
        FAIL("expected GenerationError");
    } catch (const GenerationError& e) {
        CHECK(e.identities() == std::vector<std::int64_t>{records[2].identity});
    }
    CHECK_FALSE(fs::exists(path));
}

TEST_CASE("dataset build is reproducible to the byte") {
    const auto records = synthetic_records(40);
    PromptBuildOptions one;
    one.seed = 5;
    PromptBuildOptions many = one;
    many.workers = 4;
    const auto a = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, one);
    const auto b = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, many);
    CHECK(serialize_prompt_dataset(a.sets) == serialize_prompt_dataset(b.sets));
    TempDir dir;
    write_prompt_dataset(dir.path / "a.jsonl", a.sets);
    write_prompt_dataset(dir.path / "b.jsonl", b.sets);
    CHECK(read_all(dir.path / "a.jsonl") == read_all(dir.path / "b.jsonl"));
}

TEST_CASE("shared sampling gives every identity the same questions") {
    const auto records = synthetic_records(5);
    PromptBuildOptions opt;
    opt.sampling = VqaSampling::shared;
    const auto ds = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, opt);
    for (const auto& s : ds.sets) validate_prompt_set(s, ds.sets.size());
}

TEST_CASE("prompt sets validate their invariants") {
    PromptSet s;
    s.identity = 1;
    s.chatgpt = "A man.";
    s.vqa = std::vector<std::string>(7, "The person is wearing a tie.");
    s.implicit_ref = 0;
    s.implicit_tokens = 4;
    CHECK_NOTHROW(validate_prompt_set(s, 1));
    auto bad = s;
    bad.vqa.pop_back();
    CHECK_THROWS_AS(validate_prompt_set(bad, 1), InvariantError);
    bad = s;
    bad.implicit_ref = 1;
    CHECK_THROWS_AS(validate_prompt_set(bad, 1), InvariantError);
    bad = s;
    bad.chatgpt = "  ";
    CHECK_THROWS_AS(validate_prompt_set(bad, 1), InvariantError);
}

TEST_CASE("long prompts are reported against the context length") {
    const auto records = synthetic_records(3);
    const auto plain = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, {});
    const auto v = Vocabulary::build(prompt_corpus(plain.sets), 2000);
    PromptBuildOptions opt;
    opt.vocab = &v;
    opt.context_length = 8;
    const auto ds = build_prompt_dataset(records, QuestionBank::defaults(), nullptr, opt);
    CHECK_FALSE(ds.warnings.empty());
    opt.context_length = 77;
    CHECK(build_prompt_dataset(records, QuestionBank::defaults(), nullptr, opt).warnings.empty());
}

TEST_CASE("HTTP generator posts the request and returns the sentence") {
    std::atomic<int> hits{0};
    std::string seen_auth;
    nlohmann::json seen_body;
    LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        seen_auth = req.get_header_value("Authorization");
        seen_body = nlohmann::json::parse(req.body);
        res.set_content(R"({"sentence":"A woman wearing a yellow shirt and shorts."})", "application/json");
    });
    auto cfg = fast_config(server.url());
    cfg.token = "secret";
    HttpGenerator gen(cfg);
    const auto r = record(4, {{"gender", "woman"}, {"upper", "yellow shirt"}, {"lower", "shorts"}});
    CHECK(generate_chatgpt_prompt(r, &gen) == "A woman wearing a yellow shirt and shorts.");
    CHECK(hits == 1);
    CHECK(seen_auth == "Bearer secret");
    CHECK(seen_body.at("id") == 4);
    CHECK(seen_body.at("attribute_words").size() == 3);
    CHECK(seen_body.at("instruction") == kDefaultInstruction);
}

TEST_CASE("HTTP generator retries server errors then succeeds") {
    std::atomic<int> hits{0};
    LocalServer server([&](const httplib::Request&, httplib::Response& res) {
        if (++hits < 3) {
            res.status = 503;
            return;
        }
        res.set_content(R"({"sentence":"A man."})", "application/json");
    });
    HttpGenerator gen(fast_config(server.url()));
    CHECK(gen.generate(GenerationRequest{1, {"man"}, {{"gender", "man"}}, "x"}) == "A man.");
    CHECK(gen.attempts() == 3);
}

TEST_CASE("HTTP generator gives up after the configured retries") {
    LocalServer server([&](const httplib::Request&, httplib::Response& res) { res.set_content("not json", "text/plain"); });
    HttpGenerator gen(fast_config(server.url()));
    CHECK_THROWS_AS(gen.generate(GenerationRequest{2, {"man"}, {{"gender", "man"}}, "x"}), GenerationError);
    CHECK(gen.attempts() == 3);
}

TEST_CASE("HTTP generator configuration") {
    CHECK_THROWS_AS(HttpGenerator(HttpGeneratorConfig{}), ConfigError);
}
