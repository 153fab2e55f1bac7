#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <sstream>
#include <unordered_map>

#include "knnlm/corpus.hpp"
#include "test_util.hpp"

using namespace knnlm;

TEST_CASE("vocab counts and sentinels") {
    const auto v = Vocab::build("a a b", 1, 10);
    REQUIRE(v.size() == 4);
    CHECK(v.token(kUnkId) == kUnkToken);
    CHECK(v.token(kBosId) == kBosToken);
    CHECK(v.token(2) == "a");
    CHECK(v.token(3) == "b");
    CHECK(v.count(2) == 2);
    CHECK(v.count(3) == 1);
}

TEST_CASE("min_count threshold maps rare tokens to unk") {
    const auto v = Vocab::build("a a b", 2, 10);
    CHECK(v.size() == 3);
    CHECK(v.id("a") == 2);
    CHECK(v.id("b") == kUnkId);
    CHECK_FALSE(v.find("b").has_value());
}

TEST_CASE("vocab ordering: count descending, ties lexicographic, truncated") {
    const auto v = Vocab::build("c b a c b c d", 1, 4);
    REQUIRE(v.size() == 4);
    CHECK(v.token(2) == "c");
    CHECK(v.token(3) == "b");
    const auto w = Vocab::build("z y x", 1, 10);
    CHECK(w.token(2) == "x");
    CHECK(w.token(4) == "z");
}

TEST_CASE("vocab errors") {
    CHECK(testutil::error_code_of([] { Vocab::build("  \n\n ", 1, 10); }) == ErrorCode::EmptyInput);
    CHECK(testutil::error_code_of([] { Vocab::build("a", 0, 10); }) == ErrorCode::InvalidArgument);
    CHECK(testutil::error_code_of([] { Vocab::build("a", 1, 1); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("vocab size matches an independent count on a large sample") {
    // Zipf-like token stream over a large id range.
    Rng rng(77);
    std::string text;
    text.reserve(8'000'000);
    for (int i = 0; i < 1'000'000; ++i) {
        const auto r = static_cast<std::uint64_t>(std::pow(rng.uniform(), 3.0) * 200000);
        text += "w";
        text += std::to_string(r);
        text += (i % 997 == 0) ? "\n\n" : " ";
    }
    std::unordered_map<std::string, std::uint64_t> counts;
    std::istringstream in(text);
    for (std::string tok; in >> tok;) counts[tok]++;
    std::size_t kept = 0;
    for (const auto& [tok, c] : counts) kept += c >= 3;

    const auto v = Vocab::build(text, 3, SIZE_MAX);
    CHECK(v.size() == kept + 2);
    for (std::size_t i = 2; i < v.size(); i += 101) CHECK(v.count(i) == counts.at(v.token(i)));
}

TEST_CASE("encode: ids and document offsets") {
    const auto v = Vocab::build("a a b", 1, 10);
    const auto s = encode("a b", v);
    CHECK(s.ids == std::vector<TokenId>{2, 3});
    CHECK(s.doc_offsets == std::vector<std::uint64_t>{0});
    const auto t = encode("a\n\nb", v);
    CHECK(t.ids == std::vector<TokenId>{2, 3});
    CHECK(t.doc_offsets == std::vector<std::uint64_t>{0, 1});
    // runs of blank lines and trailing whitespace add no empty documents
    const auto u = encode("\n\na\n\n\n\n b \n\n", v);
    CHECK(u.doc_offsets == std::vector<std::uint64_t>{0, 1});
    CHECK(encode("", v).empty());
}

TEST_CASE("decode(encode(s)) is the identity up to unk") {
    const auto v = Vocab::build("the cat sat", 1, 10);
    const std::string s = "the cat sat on\n\nthe mat";
    CHECK(decode(encode(s, v), v) == "the cat sat <unk>\n\nthe <unk>");
    CHECK(encode(s, v).hash() == encode(s, v).hash());
}

TEST_CASE("vocab and token file round trips") {
    testutil::TempDir dir("corpus");
    const auto v = Vocab::build("x y y z z z\n\nq", 1, 10);
    v.save(dir.file("v.tsv"));
    const auto w = Vocab::load(dir.file("v.tsv"));
    REQUIRE(w.size() == v.size());
    for (TokenId i = 0; i < v.size(); ++i) {
        CHECK(w.token(i) == v.token(i));
        CHECK(w.count(i) == v.count(i));
    }
    const auto seq = encode("x y z\n\nz q", v);
    seq.save(dir.file("t.bin"));
    CHECK(std::filesystem::file_size(dir.file("t.bin")) == 4 + 4 + 8 + 8 + 4 * 5 + 8 * 2);
    const auto back = TokenSequence::load(dir.file("t.bin"));
    CHECK(back.ids == seq.ids);
    CHECK(back.doc_offsets == seq.doc_offsets);

    write_text_file(dir.file("bad.bin"), "NLMX0000");
    CHECK(testutil::error_code_of([&] { TokenSequence::load(dir.file("bad.bin")); }) == ErrorCode::Format);
    write_text_file(dir.file("bad.tsv"), "a\t1\nb\t1\n");
    CHECK(testutil::error_code_of([&] { Vocab::load(dir.file("bad.tsv")); }) == ErrorCode::Format);
}

TEST_CASE("sequence validation") {
    TokenSequence s{{2, 3, 4}, {0, 2}};
    CHECK_NOTHROW(s.validate(5));
    CHECK_THROWS_AS(s.validate(4), Error);
    TokenSequence bad{{2, 3}, {0, 0}};
    CHECK_THROWS_AS(bad.validate(5), Error);
    TokenSequence late{{2, 3}, {0, 2}};
    CHECK_THROWS_AS(late.validate(5), Error);
    CHECK(s.doc_of(0) == 0);
    CHECK(s.doc_of(2) == 1);
}

TEST_CASE("windows of a single document") {
    // x=2, y=3, z=4
    TokenSequence s{{2, 3, 4}, {0}};
    WindowSet w(s, {2, kBosId});
    REQUIRE(w.size() == 3);
    CHECK(std::vector<TokenId>(w.context(0).begin(), w.context(0).end()) == std::vector<TokenId>{1, 1});
    CHECK(std::vector<TokenId>(w.context(1).begin(), w.context(1).end()) == std::vector<TokenId>{1, 2});
    CHECK(std::vector<TokenId>(w.context(2).begin(), w.context(2).end()) == std::vector<TokenId>{2, 3});
    CHECK(w.target(0) == 2);
    CHECK(w.target(2) == 4);
}

TEST_CASE("windows never cross documents and number one per token") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        TokenSequence s;
        const std::size_t docs = 1 + rng.below(6);
        for (std::size_t d = 0; d < docs; ++d) {
            s.doc_offsets.push_back(s.ids.size());
            const std::size_t len = 1 + rng.below(9);
            // ids encode their document so leakage is detectable
            for (std::size_t i = 0; i < len; ++i) s.ids.push_back(static_cast<TokenId>(100 * (d + 1) + i));
        }
        for (std::size_t n : {1, 2, 5, 12}) {
            WindowSet w(s, {n, kBosId});
            CHECK(w.size() == s.size());
            std::vector<TokenId> ctx(n);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const auto doc = s.doc_of(i);
                for (TokenId t : w.context(i)) CHECK((t == kBosId || t / 100 == doc + 1));
                window_context(s, {n, kBosId}, i, ctx);
                CHECK(std::equal(ctx.begin(), ctx.end(), w.context(i).begin()));
            }
        }
    }
    CHECK_THROWS_AS(WindowSet(TokenSequence{{2}, {0}}, {0, kBosId}), Error);
}
