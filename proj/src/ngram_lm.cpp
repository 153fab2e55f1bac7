#include "knnlm/ngram_lm.hpp"

#include <algorithm>

namespace knnlm {

NgramKey NgramKey::of(std::span<const TokenId> s) {
    NgramKey k;
    k.len = static_cast<std::uint8_t>(s.size());
    std::copy(s.begin(), s.end(), k.ids.begin());
    return k;
}

bool NgramKey::operator==(const NgramKey& o) const {
    return len == o.len && std::equal(ids.begin(), ids.begin() + len, o.ids.begin());
}

std::size_t NgramKeyHash::operator()(const NgramKey& k) const noexcept {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL ^ k.len;
    for (std::size_t i = 0; i < k.len; ++i) {
        h ^= k.ids[i] + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xff51afd7ed558ccdULL;
    }
    return static_cast<std::size_t>(h ^ (h >> 33));
}

NgramModel NgramModel::train(const TokenSequence& seq, std::size_t order, double discount,
                             std::size_t vocab_size) {
    require(order >= 1 && order <= kMaxNgramOrder, ErrorCode::InvalidArgument,
            "n-gram order must be in [1, " + std::to_string(kMaxNgramOrder) + "]");
    require(discount > 0.0 && discount < 1.0, ErrorCode::InvalidArgument,
            "discount must be in (0, 1)");
    require(!seq.empty(), ErrorCode::EmptyInput, "empty training sequence");
    require(vocab_size >= 1, ErrorCode::InvalidArgument, "vocab_size must be positive");

    NgramModel m;
    m.order_ = order;
    m.discount_ = discount;
    m.vocab_size_ = vocab_size;
    m.counts_.resize(order);

    std::vector<TokenId> gram(order);
    const WindowSpec spec{std::max<std::size_t>(order - 1, 1), kBosId};
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
        if (order > 1) window_context(seq, spec, pos, std::span<TokenId>(gram.data(), order - 1));
        gram[order - 1] = seq.ids[pos];
        ++m.counts_[order - 1][NgramKey::of(gram)];
    }
    for (std::size_t n = order - 1; n >= 1; --n) {
        auto& lower = m.counts_[n - 1];
        for (const auto& [key, _] : m.counts_[n]) {
            NgramKey suffix;
            suffix.len = static_cast<std::uint8_t>(n);
            std::copy(key.ids.begin() + 1, key.ids.begin() + n + 1, suffix.ids.begin());
            ++lower[suffix];
        }
    }
    m.rebuild_context_stats();
    return m;
}

void NgramModel::rebuild_context_stats() {
    contexts_.assign(order_, {});
    for (std::size_t level = 0; level < order_; ++level) {
        for (const auto& [key, c] : counts_[level]) {
            NgramKey h;
            h.len = static_cast<std::uint8_t>(key.len - 1);
            std::copy(key.ids.begin(), key.ids.begin() + h.len, h.ids.begin());
            auto& st = contexts_[level][h];
            st.total += c;
            st.distinct += 1;
        }
    }
}

double NgramModel::prob(std::span<const TokenId> context, TokenId target) const {
    // padded history of length order-1
    std::array<TokenId, kMaxNgramOrder> hist;
    const std::size_t hn = order_ - 1;
    for (std::size_t j = 0; j < hn; ++j) {
        const std::size_t back = hn - j;
        hist[j] = back <= context.size() ? context[context.size() - back] : kBosId;
    }
    double p = 1.0 / static_cast<double>(vocab_size_);
    for (std::size_t n = 1; n <= order_; ++n) {
        NgramKey h;
        h.len = static_cast<std::uint8_t>(n - 1);
        std::copy(hist.begin() + (hn - (n - 1)), hist.begin() + hn, h.ids.begin());
        auto it = contexts_[n - 1].find(h);
        if (it == contexts_[n - 1].end()) continue;
        NgramKey g = h;
        g.ids[g.len++] = target;
        auto ct = counts_[n - 1].find(g);
        const double c = ct == counts_[n - 1].end() ? 0.0 : static_cast<double>(ct->second);
        const double total = static_cast<double>(it->second.total);
        const double backoff = discount_ * static_cast<double>(it->second.distinct) / total;
        p = std::max(c - discount_, 0.0) / total + backoff * p;
    }
    return p;
}

std::uint64_t NgramModel::count(std::span<const TokenId> ngram) const {
    if (ngram.empty() || ngram.size() > order_) return 0;
    auto it = counts_[ngram.size() - 1].find(NgramKey::of(ngram));
    return it == counts_[ngram.size() - 1].end() ? 0 : it->second;
}

void NgramModel::save(const std::string& path) const {
    BinaryWriter w(path);
    w.bytes("NLMG", 4);
    w.pod<std::uint32_t>(1);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(order_));
    w.pod<double>(discount_);
    w.pod<std::uint64_t>(vocab_size_);
    for (std::size_t level = 0; level < order_; ++level) {
        std::vector<std::pair<NgramKey, std::uint64_t>> entries(counts_[level].begin(),
                                                                counts_[level].end());
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            return std::lexicographical_compare(a.first.ids.begin(), a.first.ids.begin() + a.first.len,
                                                b.first.ids.begin(), b.first.ids.begin() + b.first.len);
        });
        w.pod<std::uint64_t>(entries.size());
        for (const auto& [key, c] : entries) {
            w.bytes(key.ids.data(), key.len * sizeof(TokenId));
            w.pod<std::uint64_t>(c);
        }
    }
    w.close();
}

NgramModel NgramModel::load(const std::string& path) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes.data(), bytes.size(), path);
    r.expect_magic("NLMG");
    require(r.pod<std::uint32_t>() == 1, ErrorCode::Format, path + ": unsupported version");
    NgramModel m;
    m.order_ = r.pod<std::uint32_t>();
    require(m.order_ >= 1 && m.order_ <= kMaxNgramOrder, ErrorCode::Format, path + ": bad order");
    m.discount_ = r.pod<double>();
    m.vocab_size_ = r.pod<std::uint64_t>();
    m.counts_.resize(m.order_);
    for (std::size_t level = 0; level < m.order_; ++level) {
        const auto n = r.pod<std::uint64_t>();
        for (std::uint64_t i = 0; i < n; ++i) {
            NgramKey k;
            k.len = static_cast<std::uint8_t>(level + 1);
            r.bytes(k.ids.data(), k.len * sizeof(TokenId));
            m.counts_[level][k] = r.pod<std::uint64_t>();
        }
    }
    require(r.remaining() == 0, ErrorCode::Format, path + ": trailing bytes");
    m.rebuild_context_stats();
    return m;
}

}  // namespace knnlm
