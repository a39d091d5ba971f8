// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace mpreid {

using TokenId = std::int32_t;

inline constexpr std::size_t kDefaultSlotCount = 16;
inline constexpr std::size_t kDefaultVocabSize = 2000;
inline constexpr std::size_t kByteAlphabet = 256;

/// Lowercases ASCII, collapses whitespace runs to one space and strips both ends.
std::string normalize_text(std::string_view text);

/// Splits normalized text into BPE pieces: runs of letters/digits (bytes
/// >= 0x80 count as letters) or single punctuation bytes, each carrying the
/// space that preceded it.
std::vector<std::string> pretokenize(std::string_view normalized);

struct TokenSequence {
    std::vector<TokenId> ids;
    std::size_t eos_position = 0;

    std::size_t context_length() const noexcept { return ids.size(); }
    /// Number of tokens up to and including EOS.
    std::size_t valid_length() const noexcept { return eos_position + 1; }
};

/// Byte-level BPE vocabulary.
///
/// Id layout: SOS, EOS, PAD, then slot_count implicit-prompt placeholders,
/// then the 256 byte tokens, then one token per merge in rank order. Merges
/// never produce reserved ids, so placeholders only appear where a caller
/// inserts them.
class Vocabulary {
public:
    /// Learns merges over the normalized corpus until the vocabulary reaches
    /// target_size or no adjacent pair remains. Equal pair counts are broken
    /// by the lexicographically smallest (left, right) byte strings.
    static Vocabulary build(std::span<const std::string> corpus, std::size_t target_size,
                            std::size_t slot_count = kDefaultSlotCount);

    TokenSequence encode(std::string_view sentence, std::size_t context_length) const;
    /// Content tokens only, without SOS/EOS/PAD.
    std::vector<TokenId> encode_ids(std::string_view sentence) const;
    /// Concatenates the bytes of every content token; SOS, EOS and PAD are
    /// skipped and placeholders render as "[X]".
    std::string decode(std::span<const TokenId> ids) const;

    std::size_t size() const noexcept { return tokens_.size(); }
    std::size_t slot_count() const noexcept { return slot_count_; }
    TokenId sos() const noexcept { return 0; }
    TokenId eos() const noexcept { return 1; }
    TokenId pad() const noexcept { return 2; }
    TokenId slot(std::size_t index) const;
    bool is_slot(TokenId id) const noexcept;
    bool is_reserved(TokenId id) const noexcept;

    /// Display form of a token (bytes mapped to printable code points).
    std::string token_string(TokenId id) const;
    const std::vector<std::pair<TokenId, TokenId>>& merges() const noexcept { return merges_; }

    /// Throws InvariantError if seq violates the SOS/EOS/PAD layout.
    void validate(const TokenSequence& seq) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& doc);
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.slot_count_ == b.slot_count_ && a.merges_ == b.merges_;
    }

private:
    explicit Vocabulary(std::size_t slot_count);
    TokenId byte_base() const noexcept { return static_cast<TokenId>(3 + slot_count_); }
    void add_merge(TokenId left, TokenId right);
    void encode_piece(std::string_view piece, std::vector<TokenId>& out) const;

    std::size_t slot_count_ = 0;
    std::vector<std::string> tokens_;  // raw bytes per id; reserved ids hold their display name
    std::vector<std::pair<TokenId, TokenId>> merges_;
    std::unordered_map<std::uint64_t, TokenId> merge_lookup_;  // (left,right) -> merged id; rank = id order
};

}  // namespace mpreid
