#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "knnlm/corpus.hpp"

namespace knnlm {

inline constexpr std::size_t kMaxNgramOrder = 8;

/// Fixed-capacity id tuple used as a hash key for n-gram tables.
struct NgramKey {
    std::array<TokenId, kMaxNgramOrder> ids{};
    std::uint8_t len = 0;

    static NgramKey of(std::span<const TokenId> s);
    bool operator==(const NgramKey& o) const;
};

struct NgramKeyHash {
    std::size_t operator()(const NgramKey& k) const noexcept;
};

/// Interpolated Kneser-Ney with a single absolute discount and a uniform
/// 1/V floor below the unigram level.
///
///   p_n(w|h) = max(c_n(h,w) - D, 0) / c_n(h) + D * N1+(h.) / c_n(h) * p_{n-1}(w|h')
///
/// c_N is the raw count at the highest order; lower orders use continuation
/// counts N1+(. h w). A history never seen at level n passes the lower-order
/// estimate through unchanged.
class NgramModel {
public:
    static NgramModel train(const TokenSequence& seq, std::size_t order, double discount,
                            std::size_t vocab_size);

    /// p(target | last order-1 ids of context); shorter contexts are left-padded with BOS.
    double prob(std::span<const TokenId> context, TokenId target) const;

    std::size_t order() const { return order_; }
    double discount() const { return discount_; }
    std::size_t vocab_size() const { return vocab_size_; }

    /// Count (raw at the top level, continuation below) of an n-gram, 0 if absent.
    std::uint64_t count(std::span<const TokenId> ngram) const;

    void save(const std::string& path) const;
    static NgramModel load(const std::string& path);

private:
    struct ContextStats {
        std::uint64_t total = 0;     // sum of counts over followers
        std::uint64_t distinct = 0;  // number of distinct followers
    };

    void rebuild_context_stats();

    std::size_t order_ = 1;
    double discount_ = 0.75;
    std::size_t vocab_size_ = 0;
    // level n-1 holds n-grams of length n
    std::vector<std::unordered_map<NgramKey, std::uint64_t, NgramKeyHash>> counts_;
    std::vector<std::unordered_map<NgramKey, ContextStats, NgramKeyHash>> contexts_;
};

}  // namespace knnlm
