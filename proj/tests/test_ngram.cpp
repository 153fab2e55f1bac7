#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "knnlm/ngram_lm.hpp"
#include "test_util.hpp"

using namespace knnlm;

namespace {

// Bigram interpolated KN written directly from the formula over explicit
// (h, w) pair lists: raw counts at the top, continuation unigrams below,
// 1/V floor.
struct BigramOracle {
    std::map<std::pair<TokenId, TokenId>, double> c;
    std::map<TokenId, double> ch, n1h;
    std::map<TokenId, double> cont;  // N1+(. w)
    double types = 0.0;
    double D;
    double V;

    BigramOracle(const TokenSequence& s, double d, std::size_t vocab) : D(d), V(static_cast<double>(vocab)) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            const bool start = std::find(s.doc_offsets.begin(), s.doc_offsets.end(), i) != s.doc_offsets.end();
            const TokenId h = start ? kBosId : s.ids[i - 1];
            c[{h, s.ids[i]}] += 1;
        }
        for (const auto& [hw, n] : c) {
            ch[hw.first] += n;
            n1h[hw.first] += 1;
            cont[hw.second] += 1;
            types += 1;
        }
    }

    double unigram(TokenId w) const {
        const double cw = cont.count(w) ? cont.at(w) : 0.0;
        return std::max(cw - D, 0.0) / types + D * static_cast<double>(cont.size()) / types / V;
    }

    double prob(TokenId h, TokenId w) const {
        if (!ch.count(h)) return unigram(w);
        const double chw = c.count({h, w}) ? c.at({h, w}) : 0.0;
        return std::max(chw - D, 0.0) / ch.at(h) + D * n1h.at(h) / ch.at(h) * unigram(w);
    }
};

TokenSequence random_seq(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    TokenSequence s;
    s.doc_offsets.push_back(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0 && rng.uniform() < 0.1) s.doc_offsets.push_back(i);
        s.ids.push_back(static_cast<TokenId>(2 + rng.below(vocab - 2)));
    }
    return s;
}

}  // namespace

TEST_CASE("a b a b, order 1: symmetric and equal to the literal formula") {
    // a=2, b=3; V = 4 with the sentinels
    TokenSequence s{{2, 3, 2, 3}, {0}};
    const auto m = NgramModel::train(s, 1, 0.5, 4);
    const double pa = m.prob({}, 2), pb = m.prob({}, 3);
    CHECK(pa == doctest::Approx(pb).epsilon(1e-15));
    CHECK(pa == doctest::Approx((2 - 0.5) / 4 + 0.5 * 2 / 4 * 0.25).epsilon(1e-15));
    CHECK(pa + pb + m.prob({}, 0) + m.prob({}, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("order 2 matches the literal-formula oracle on every pair of a 10-token corpus") {
    TokenSequence s{{2, 3, 4, 2, 3, 5, 2, 4, 4, 3}, {0, 6}};
    const std::size_t V = 7;
    const auto m = NgramModel::train(s, 2, 0.75, V);
    const BigramOracle oracle(s, 0.75, V);
    for (TokenId h = 0; h < V; ++h)
        for (TokenId w = 0; w < V; ++w) {
            const TokenId ctx[] = {h};
            CHECK(std::abs(m.prob(ctx, w) - oracle.prob(h, w)) <= 1e-12);
        }
}

TEST_CASE("order 2 matches the oracle on a random corpus") {
    const auto s = random_seq(3000, 40, 9);
    const auto m = NgramModel::train(s, 2, 0.6, 40);
    const BigramOracle oracle(s, 0.6, 40);
    for (TokenId h = 0; h < 40; ++h)
        for (TokenId w = 0; w < 40; ++w) {
            const TokenId ctx[] = {h};
            CHECK(std::abs(m.prob(ctx, w) - oracle.prob(h, w)) <= 1e-12);
        }
}

TEST_CASE("conditionals sum to one and are strictly positive") {
    const std::size_t V = 30;
    const auto s = random_seq(2000, V, 21);
    for (std::size_t order : {1, 2, 3, 5}) {
        const auto m = NgramModel::train(s, order, 0.75, V);
        Rng rng(order);
        for (int t = 0; t < 100; ++t) {
            std::vector<TokenId> h(order > 1 ? order - 1 : 0);
            // half the histories are taken from the corpus, half random
            const std::size_t at = rng.below(s.size() - h.size());
            for (std::size_t j = 0; j < h.size(); ++j)
                h[j] = t % 2 ? s.ids[at + j] : static_cast<TokenId>(rng.below(V));
            double sum = 0.0;
            for (TokenId w = 0; w < V; ++w) {
                const double p = m.prob(h, w);
                CHECK(p > 0.0);
                sum += p;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("unigram continuation distribution sums to one") {
    const auto s = random_seq(500, 20, 2);
    const auto m = NgramModel::train(s, 3, 0.75, 20);
    double sum = 0.0;
    // with a history never seen at any level the model returns the level-1 estimate
    const TokenId unseen[] = {0, 0};
    for (TokenId w = 0; w < 20; ++w) sum += m.prob(unseen, w);
    CHECK(std::abs(sum - 1.0) <= 1e-9);
}

TEST_CASE("single continuation with a vanishing discount approaches one") {
    TokenSequence s{{2, 3, 2, 3, 2, 3}, {0}};
    const auto m = NgramModel::train(s, 2, 1e-9, 5);
    const TokenId h[] = {2};
    CHECK(m.prob(h, 3) == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("unseen history backs off to a positive probability") {
    TokenSequence s{{2, 3, 4}, {0}};
    const auto m = NgramModel::train(s, 3, 0.75, 10);
    const TokenId h[] = {9, 9};
    // token 7 never occurs: only the discounted mass reaches the floor
    CHECK(m.prob(h, 7) > 0.0);
    CHECK(m.prob(h, 7) == doctest::Approx(0.75 * 3.0 / 3.0 / 10).epsilon(1e-12));
}

TEST_CASE("invariant to document order") {
    TokenSequence a{{2, 3, 4, 5, 6, 2, 2, 3}, {0, 3, 5}};
    TokenSequence b{{2, 2, 3, 5, 6, 2, 3, 4}, {0, 3, 5}};
    const auto ma = NgramModel::train(a, 3, 0.75, 8);
    const auto mb = NgramModel::train(b, 3, 0.75, 8);
    for (TokenId h0 = 0; h0 < 8; ++h0)
        for (TokenId h1 = 0; h1 < 8; ++h1)
            for (TokenId w = 0; w < 8; ++w) {
                const TokenId h[] = {h0, h1};
                CHECK(ma.prob(h, w) == mb.prob(h, w));
            }
}

TEST_CASE("save and load preserve every probability") {
    testutil::TempDir dir("ngram");
    const auto s = random_seq(800, 15, 5);
    const auto m = NgramModel::train(s, 3, 0.7, 15);
    m.save(dir.file("m.bin"));
    const auto r = NgramModel::load(dir.file("m.bin"));
    CHECK(r.order() == 3);
    for (TokenId h = 0; h < 15; ++h)
        for (TokenId w = 0; w < 15; ++w) {
            const TokenId ctx[] = {h, w};
            CHECK(r.prob(ctx, (h + w) % 15) == m.prob(ctx, (h + w) % 15));
        }
}

TEST_CASE("training errors") {
    TokenSequence s{{2, 3}, {0}};
    CHECK(testutil::error_code_of([&] { NgramModel::train(s, 0, 0.5, 4); }) == ErrorCode::InvalidArgument);
    CHECK(testutil::error_code_of([&] { NgramModel::train(s, 2, 1.0, 4); }) == ErrorCode::InvalidArgument);
    CHECK(testutil::error_code_of([&] { NgramModel::train(TokenSequence{}, 2, 0.5, 4); }) ==
          ErrorCode::EmptyInput);
}
