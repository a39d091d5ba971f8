// SPDX-License-Identifier: Apache-2.0
#include "mpreid/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <map>

#include "mpreid/archive.hpp"
#include "mpreid/errors.hpp"

namespace mpreid {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool is_word_byte(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

std::string utf8(std::uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return s;
}

// Printable stand-in for every byte (the GPT-2 byte-to-unicode table), so
// token strings are valid UTF-8 in the JSON document.
const std::array<std::string, 256>& byte_display() {
    static const std::array<std::string, 256> table = [] {
        std::array<std::string, 256> t;
        std::uint32_t extra = 0;
        for (std::uint32_t b = 0; b < 256; ++b) {
            const bool printable = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
            t[b] = utf8(printable ? b : 256 + extra++);
        }
        return t;
    }();
    return table;
}

std::string display(std::string_view raw) {
    std::string out;
    for (unsigned char c : raw) out += byte_display()[c];
    return out;
}

}  // namespace

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c);
    }
    return out;
}

std::vector<std::string> pretokenize(std::string_view normalized) {
    std::vector<std::string> pieces;
    std::size_t i = 0;
    while (i < normalized.size()) {
        std::string piece;
        if (normalized[i] == ' ') {
            piece.push_back(' ');
            ++i;
            if (i >= normalized.size()) {
                pieces.push_back(piece);
                break;
            }
        }
        const auto c = static_cast<unsigned char>(normalized[i]);
        if (is_word_byte(c)) {
            while (i < normalized.size() && is_word_byte(static_cast<unsigned char>(normalized[i]))) {
                piece.push_back(normalized[i++]);
            }
        } else if (c == ' ') {
            // consecutive spaces only occur in unnormalized input
        } else {
            piece.push_back(normalized[i++]);
        }
        pieces.push_back(std::move(piece));
    }
    return pieces;
}

Vocabulary::Vocabulary(std::size_t slot_count) : slot_count_(slot_count) {
    tokens_.push_back("<|sos|>");
    tokens_.push_back("<|eos|>");
    tokens_.push_back("<|pad|>");
    for (std::size_t i = 0; i < slot_count; ++i) {
        tokens_.push_back("<|slot_" + std::to_string(i) + "|>");
    }
    for (int b = 0; b < 256; ++b) {
        tokens_.push_back(std::string(1, static_cast<char>(b)));
    }
}

void Vocabulary::add_merge(TokenId left, TokenId right) {
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(tokens_[static_cast<std::size_t>(left)] + tokens_[static_cast<std::size_t>(right)]);
    merges_.emplace_back(left, right);
    merge_lookup_.emplace(pair_key(left, right), id);
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus, std::size_t target_size, std::size_t slot_count) {
    if (corpus.empty()) {
        throw InputError("build_vocab: corpus is empty");
    }
    const std::size_t floor = 3 + slot_count + kByteAlphabet;
    if (target_size < floor) {
        throw InputError("build_vocab: target size " + std::to_string(target_size) +
                         " is below alphabet + reserved count " + std::to_string(floor));
    }
    Vocabulary vocab(slot_count);

    std::map<std::string, std::size_t> piece_counts;
    for (const auto& sentence : corpus) {
        for (auto& piece : pretokenize(normalize_text(sentence))) {
            ++piece_counts[piece];
        }
    }
    struct Word {
        std::vector<TokenId> ids;
        std::size_t count;
    };
    // Token strings stay unique so the JSON form (display strings) resolves
    // every merge unambiguously; a pair whose concatenation already exists
    // is never merged.
    std::unordered_map<std::string, TokenId> existing;
    for (std::size_t i = 0; i < vocab.tokens_.size(); ++i) {
        existing.emplace(vocab.tokens_[i], static_cast<TokenId>(i));
    }
    std::vector<Word> words;
    for (const auto& [piece, count] : piece_counts) {
        Word w{{}, count};
        for (unsigned char c : piece) w.ids.push_back(vocab.byte_base() + c);
        words.push_back(std::move(w));
    }

    while (vocab.size() < target_size) {
        std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
                counts[{w.ids[i], w.ids[i + 1]}] += w.count;
            }
        }
        std::erase_if(counts, [&](const auto& entry) {
            const auto& [l, r] = entry.first;
            return existing.contains(vocab.tokens_[static_cast<std::size_t>(l)] +
                                     vocab.tokens_[static_cast<std::size_t>(r)]);
        });
        if (counts.empty()) {
            break;
        }
        const std::pair<TokenId, TokenId>* best = nullptr;
        std::size_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (best == nullptr || count > best_count) {
                best = &pair;
                best_count = count;
                continue;
            }
            if (count == best_count) {
                const auto& bl = vocab.tokens_[static_cast<std::size_t>(best->first)];
                const auto& br = vocab.tokens_[static_cast<std::size_t>(best->second)];
                const auto& cl = vocab.tokens_[static_cast<std::size_t>(pair.first)];
                const auto& cr = vocab.tokens_[static_cast<std::size_t>(pair.second)];
                if (std::tie(cl, cr) < std::tie(bl, br)) {
                    best = &pair;
                }
            }
        }
        const auto [left, right] = *best;
        vocab.add_merge(left, right);
        const auto merged = static_cast<TokenId>(vocab.size() - 1);
        existing.emplace(vocab.tokens_.back(), merged);
        for (auto& w : words) {
            std::vector<TokenId> next;
            next.reserve(w.ids.size());
            for (std::size_t i = 0; i < w.ids.size(); ++i) {
                if (i + 1 < w.ids.size() && w.ids[i] == left && w.ids[i + 1] == right) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(w.ids[i]);
                }
            }
            w.ids = std::move(next);
        }
    }
    return vocab;
}

void Vocabulary::encode_piece(std::string_view piece, std::vector<TokenId>& out) const {
    std::vector<TokenId> ids;
    ids.reserve(piece.size());
    for (unsigned char c : piece) ids.push_back(byte_base() + c);
    while (ids.size() > 1) {
        TokenId best = std::numeric_limits<TokenId>::max();
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            if (auto it = merge_lookup_.find(pair_key(ids[i], ids[i + 1])); it != merge_lookup_.end()) {
                best = std::min(best, it->second);
            }
        }
        if (best == std::numeric_limits<TokenId>::max()) {
            break;
        }
        const auto [left, right] = merges_[static_cast<std::size_t>(best - byte_base() - 256)];
        std::vector<TokenId> next;
        next.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
                next.push_back(best);
                ++i;
            } else {
                next.push_back(ids[i]);
            }
        }
        ids = std::move(next);
    }
    out.insert(out.end(), ids.begin(), ids.end());
}

std::vector<TokenId> Vocabulary::encode_ids(std::string_view sentence) const {
    std::vector<TokenId> out;
    for (const auto& piece : pretokenize(normalize_text(sentence))) {
        encode_piece(piece, out);
    }
    return out;
}

TokenSequence Vocabulary::encode(std::string_view sentence, std::size_t context_length) const {
    if (context_length < 3) {
        throw InputError("encode: context length must be at least 3, got " + std::to_string(context_length));
    }
    auto content = encode_ids(sentence);
    if (content.size() > context_length - 2) {
        content.resize(context_length - 2);
    }
    TokenSequence seq;
    seq.ids.reserve(context_length);
    seq.ids.push_back(sos());
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    seq.eos_position = seq.ids.size();
    seq.ids.push_back(eos());
    seq.ids.resize(context_length, pad());
    return seq;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw LookupError("decode: token id " + std::to_string(id) + " outside vocabulary");
        }
        if (id == sos() || id == eos() || id == pad()) {
            continue;
        }
        if (is_slot(id)) {
            out += "[X]";
            continue;
        }
        out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
}

TokenId Vocabulary::slot(std::size_t index) const {
    if (index >= slot_count_) {
        throw InputError("placeholder slot " + std::to_string(index) + " not reserved (vocabulary has " +
                         std::to_string(slot_count_) + ")");
    }
    return static_cast<TokenId>(3 + index);
}

bool Vocabulary::is_slot(TokenId id) const noexcept { return id >= 3 && id < byte_base(); }

bool Vocabulary::is_reserved(TokenId id) const noexcept { return id >= 0 && id < byte_base(); }

std::string Vocabulary::token_string(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw LookupError("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (is_reserved(id)) {
        return tokens_[static_cast<std::size_t>(id)];
    }
    return display(tokens_[static_cast<std::size_t>(id)]);
}

void Vocabulary::validate(const TokenSequence& seq) const {
    if (seq.ids.empty() || seq.ids.front() != sos()) {
        throw InvariantError("token sequence does not start with SOS");
    }
    if (seq.eos_position >= seq.ids.size() || seq.ids[seq.eos_position] != eos()) {
        throw InvariantError("token sequence has no EOS at its recorded position");
    }
    for (std::size_t i = 1; i < seq.eos_position; ++i) {
        const auto id = seq.ids[i];
        if (id == sos() || id == eos() || id == pad() || id < 0 || static_cast<std::size_t>(id) >= size()) {
            throw InvariantError("invalid content token at position " + std::to_string(i));
        }
    }
    for (std::size_t i = seq.eos_position + 1; i < seq.ids.size(); ++i) {
        if (seq.ids[i] != pad()) {
            throw InvariantError("non-PAD token after EOS at position " + std::to_string(i));
        }
    }
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json doc;
    doc["format"] = "mpreid-bpe";
    doc["version"] = 1;
    doc["slot_count"] = slot_count_;
    doc["size"] = size();
    auto& tokens = doc["tokens"] = nlohmann::json::array();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        tokens.push_back(token_string(static_cast<TokenId>(i)));
    }
    auto& merges = doc["merges"] = nlohmann::json::array();
    for (const auto& [l, r] : merges_) {
        merges.push_back({token_string(l), token_string(r)});
    }
    return doc;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& doc) {
    if (doc.value("format", "") != "mpreid-bpe") {
        throw InputError("vocabulary document has unknown format");
    }
    Vocabulary vocab(doc.at("slot_count").get<std::size_t>());
    std::unordered_map<std::string, TokenId> by_display;
    for (std::size_t i = 0; i < vocab.tokens_.size(); ++i) {
        by_display.emplace(vocab.token_string(static_cast<TokenId>(i)), static_cast<TokenId>(i));
    }
    for (const auto& m : doc.at("merges")) {
        const auto l = by_display.find(m.at(0).get<std::string>());
        const auto r = by_display.find(m.at(1).get<std::string>());
        if (l == by_display.end() || r == by_display.end()) {
            throw InputError("vocabulary merge refers to an unknown token");
        }
        vocab.add_merge(l->second, r->second);
        by_display.emplace(vocab.token_string(static_cast<TokenId>(vocab.size() - 1)),
                           static_cast<TokenId>(vocab.size() - 1));
    }
    if (doc.contains("tokens") && doc.at("tokens").size() != vocab.size()) {
        throw InputError("vocabulary token list does not match its merges");
    }
    return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(1) + "\n"); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw InputError("cannot open vocabulary " + path.string());
    }
    return from_json(nlohmann::json::parse(is));
}

}  // namespace mpreid
