#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnlm/common.hpp"

namespace knnlm {

inline constexpr TokenId kUnkId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<s>";

/// Word-level vocabulary. Ids are dense; 0 and 1 are always UNK and BOS.
class Vocab {
public:
    /// Counts whitespace tokens, keeps those with count >= min_count, sorts by
    /// descending count (ties lexicographic) and truncates to max_size entries
    /// including the two sentinels.
    static Vocab build(std::string_view text, std::uint64_t min_count, std::size_t max_size);

    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    std::size_t size() const { return tokens_.size(); }
    TokenId id(std::string_view token) const;
    std::optional<TokenId> find(std::string_view token) const;
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    std::uint64_t count(TokenId id) const { return counts_.at(id); }
    std::uint64_t min_count() const { return min_count_; }

private:
    Vocab() = default;
    void index();

    std::vector<std::string> tokens_;
    std::vector<std::uint64_t> counts_;
    std::unordered_map<std::string, TokenId> ids_;
    std::uint64_t min_count_ = 1;
};

/// Encoded corpus. doc_offsets holds the start index of each document.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<std::uint64_t> doc_offsets;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
    std::size_t doc_count() const { return doc_offsets.size(); }
    /// Index of the document containing position pos.
    std::size_t doc_of(std::size_t pos) const;
    std::size_t doc_begin(std::size_t doc) const { return doc_offsets.at(doc); }
    std::size_t doc_end(std::size_t doc) const {
        return doc + 1 < doc_offsets.size() ? doc_offsets[doc + 1] : ids.size();
    }

    /// Checks the offset invariants and that every id is below vocab_size.
    void validate(std::size_t vocab_size) const;
    std::uint64_t hash() const;

    void save(const std::string& path) const;
    static TokenSequence load(const std::string& path);
};

/// Splits on whitespace; a blank line ends a document. Out-of-vocabulary
/// tokens become UNK.
TokenSequence encode(std::string_view text, const Vocab& vocab);
/// Tokens joined by single spaces, documents separated by a blank line.
std::string decode(const TokenSequence& seq, const Vocab& vocab);
std::string decode_range(const TokenSequence& seq, const Vocab& vocab, std::size_t begin,
                         std::size_t end);

/// Calls fn(token) for every whitespace-separated token and fn("") at each
/// document boundary (blank line). Exposed for tools that count tokens.
void scan_tokens(std::string_view text,
                 const std::function<void(std::string_view, bool boundary)>& fn);

struct WindowSpec {
    std::size_t context_len = 3;
    TokenId pad = kBosId;

    void validate() const;
};

/// All (context, target) windows of a sequence, one per token, in corpus
/// order. Contexts are left-padded with `pad` inside the first context_len
/// tokens of each document and never reach into a preceding document.
class WindowSet {
public:
    WindowSet(const TokenSequence& seq, const WindowSpec& spec);

    std::size_t size() const { return targets_.size(); }
    std::size_t context_len() const { return n_; }
    std::span<const TokenId> context(std::size_t i) const {
        return {contexts_.data() + i * n_, n_};
    }
    TokenId target(std::size_t i) const { return targets_[i]; }
    std::size_t position(std::size_t i) const { return i; }
    std::span<const TokenId> targets() const { return targets_; }

private:
    std::size_t n_;
    std::vector<TokenId> contexts_;
    std::vector<TokenId> targets_;
};

/// Writes the padded context of position pos into out (size context_len).
void window_context(const TokenSequence& seq, const WindowSpec& spec, std::size_t pos,
                    std::span<TokenId> out);

}  // namespace knnlm
