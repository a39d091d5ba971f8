// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpreid/tokenizer.hpp"

namespace mpreid {

inline constexpr std::size_t kVqaPromptCount = 7;

struct AttributeRecord {
    std::int64_t identity = 0;
    std::map<std::string, std::string> attributes;

    friend bool operator==(const AttributeRecord&, const AttributeRecord&) = default;
};

/// Words an attribute contributes to a prompt. Yes/no attributes turn into
/// their name ("tie") or its negation ("no tie"); other values are used as is.
std::vector<std::string> attribute_words(const AttributeRecord& record);

/// The sentence every generator must cover: each attribute word appears as a
/// case-insensitive substring.
bool covers_attribute_words(const std::string& sentence, const std::vector<std::string>& words);

struct Question {
    enum class Kind { yes_no, value };

    std::string text;
    std::string attribute;
    Kind kind = Kind::value;
    std::string template_text;  // value: exactly one "{answer}" slot
    std::string yes_sentence;   // yes_no
    std::string no_sentence;    // yes_no
};

class QuestionBank {
public:
    QuestionBank() = default;
    explicit QuestionBank(std::vector<Question> questions);

    /// Tie, watch, shirt, bag, hat, shoe colour and sleeve length.
    static QuestionBank defaults();
    static QuestionBank from_json(const nlohmann::json& doc);
    static QuestionBank load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    const std::vector<Question>& questions() const noexcept { return questions_; }
    std::size_t size() const noexcept { return questions_.size(); }

    /// Declarative sentence for one question answered from the record.
    std::string answer(const Question& q, const AttributeRecord& record) const;

private:
    std::vector<Question> questions_;
};

struct PromptSet {
    std::int64_t identity = 0;
    std::string chatgpt;
    std::vector<std::string> vqa;
    std::size_t implicit_ref = 0;
    std::size_t implicit_tokens = 0;

    friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

/// Throws InvariantError when a prompt set breaks its invariants.
void validate_prompt_set(const PromptSet& set, std::size_t identity_count);

struct GenerationRequest {
    std::int64_t identity = 0;
    std::vector<std::string> attribute_words;
    std::map<std::string, std::string> attributes;
    std::string instruction;
};

/// Produces one descriptive sentence per request.
class GeneratorClient {
public:
    virtual ~GeneratorClient() = default;
    virtual std::string generate(const GenerationRequest& request) = 0;
};

/// Deterministic offline generator: "A woman wearing a yellow shirt and shorts."
class TemplateComposer final : public GeneratorClient {
public:
    std::string compose(const AttributeRecord& record) const;
    std::string generate(const GenerationRequest& request) override;
};

inline constexpr const char* kDefaultInstruction =
    "Write one fluent sentence describing a pedestrian. Use every attribute word given, verbatim.";

struct ChatPromptOptions {
    std::size_t max_retries = 1;  // re-asks after a sentence that misses an attribute word
    std::string instruction = kDefaultInstruction;
};

/// LLM-style prompt. A null client means offline (template composer).
/// Sentences missing an attribute word are retried, then replaced by the
/// composer's sentence. Transport failures surface as GenerationError.
std::string generate_chatgpt_prompt(const AttributeRecord& record, GeneratorClient* client,
                                    const ChatPromptOptions& options = {});

/// Seven declarative sentences from questions drawn with the seed and answered
/// from the record. Chosen questions keep bank order.
std::vector<std::string> generate_vqa_prompts(const AttributeRecord& record, const QuestionBank& bank,
                                              std::uint64_t seed);

struct ImplicitTemplate {
    TokenSequence sequence;
    std::vector<std::size_t> slot_positions;
};

inline constexpr const char* kImplicitPrefix = "a photo of a";
inline constexpr const char* kImplicitSuffix = "person";

/// "a photo of a [X]1 ... [X]T person" with T placeholder ids.
ImplicitTemplate implicit_template(const Vocabulary& vocab, std::size_t slots, std::size_t context_length);

enum class VqaSampling { per_identity, shared };

struct PromptBuildOptions {
    std::uint64_t seed = 0;
    std::size_t implicit_tokens = 4;
    VqaSampling sampling = VqaSampling::per_identity;
    std::size_t workers = 1;
    ChatPromptOptions chat;
    // When set, sentences longer than context_length - 2 tokens are reported.
    const Vocabulary* vocab = nullptr;
    std::size_t context_length = 77;
};

struct PromptDataset {
    std::vector<PromptSet> sets;
    std::vector<std::string> warnings;
};

/// One PromptSet per record (records sorted by identity; implicit_ref is the
/// position in that order). Identities must be unique. Any failed identity
/// aborts the whole build with a GenerationError listing every failure.
PromptDataset build_prompt_dataset(std::vector<AttributeRecord> records, const QuestionBank& bank,
                                   GeneratorClient* client, const PromptBuildOptions& options);

/// JSON-lines {"id","chatgpt","vqa":[7],"T"}; written atomically.
std::string serialize_prompt_dataset(const std::vector<PromptSet>& sets);
void write_prompt_dataset(const std::filesystem::path& path, const std::vector<PromptSet>& sets);
std::vector<PromptSet> read_prompt_dataset(const std::filesystem::path& path);

/// All sentences of the sets plus the implicit template text; the BPE
/// training corpus.
std::vector<std::string> prompt_corpus(const std::vector<PromptSet>& sets);

}  // namespace mpreid
