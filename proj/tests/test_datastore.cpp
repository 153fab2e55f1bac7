#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "knnlm/datastore.hpp"
#include "knnlm/eval.hpp"
#include "test_util.hpp"

using namespace knnlm;

namespace {

FfLmModel small_model() {
    LmConfig c;
    c.context_len = 2;
    c.embed_dim = 4;
    c.hidden_dim = 6;
    c.vocab_size = 12;
    return FfLmModel(c);
}

Datastore numbered(std::size_t n, std::size_t d = 3) {
    std::vector<float> keys(n * d);
    std::vector<TokenId> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        values[i] = static_cast<TokenId>(i);
        for (std::size_t j = 0; j < d; ++j) keys[i * d + j] = static_cast<float>(i * 10 + j);
    }
    return Datastore::from_vectors(d, std::move(keys), std::move(values));
}

}  // namespace

TEST_CASE("one entry per token, keys are the model states") {
    const auto m = small_model();
    TokenSequence seq{{2, 3, 4, 2, 3, 5, 6, 2, 3, 7}, {0, 6}};
    const auto ds = build_datastore(m, seq, KeyTap::HiddenPostLayerNorm);
    CHECK(ds.size() == seq.size());
    CHECK(ds.dim() == 6);
    const WindowSet w(seq, m.config().window());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(ds.value(i) == seq.ids[i]);
        const auto k = m.extract_key(w.context(i), KeyTap::HiddenPostLayerNorm);
        CHECK(std::equal(k.begin(), k.end(), ds.key(i).begin()));
    }
    // positions 2 and 9 both follow [2, 3] inside their documents
    const auto a = ds.key(2), b = ds.key(9);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
    CHECK(ds.provenance().tap == static_cast<std::uint8_t>(KeyTap::HiddenPostLayerNorm));
    CHECK(ds.provenance().model_hash == m.hash());
    CHECK(ds.provenance().corpus_hash == seq.hash());
}

TEST_CASE("empty corpus gives an empty datastore that cannot be searched") {
    const auto ds = build_datastore(small_model(), TokenSequence{}, KeyTap::HiddenPreActivation);
    CHECK(ds.empty());
    const std::vector<float> q(6, 0.0f);
    CHECK_THROWS_AS(exact_search(ds, q, 1, Metric::SquaredL2), Error);
}

TEST_CASE("subsample edge cases") {
    const auto ds = numbered(50);
    const auto all = subsample(ds, 50, 3);
    std::multiset<TokenId> a(ds.values().begin(), ds.values().end()), b(all.values().begin(), all.values().end());
    CHECK(a == b);
    const auto one = subsample(ds, 1, 3);
    REQUIRE(one.size() == 1);
    const auto v = one.value(0);
    CHECK(one.key(0)[0] == static_cast<float>(v * 10));
    CHECK(testutil::error_code_of([&] { subsample(ds, 51, 1); }) == ErrorCode::InvalidArgument);
    CHECK(testutil::error_code_of([&] { subsample(ds, 0, 1); }) == ErrorCode::InvalidArgument);
    CHECK(subsample(ds, 20, 9).content_hash() == subsample(ds, 20, 9).content_hash());
}

TEST_CASE("pair preservation and hypergeometric overlap") {
    const std::size_t N = 2000;
    const auto ds = numbered(N);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = subsample(ds, N / 2, 100 + trial);
        const auto b = subsample(ds, N / 2, 200 + trial);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.key(i)[2] == static_cast<float>(a.value(i) * 10 + 2));
        std::set<TokenId> sa(a.values().begin(), a.values().end());
        std::size_t both = 0;
        for (TokenId v : b.values()) both += sa.count(v);
        const double frac = static_cast<double>(both) / (N / 2);
        CHECK(std::abs(frac - 0.5) <= 0.05);
    }
}

TEST_CASE("a subsample of a subsample is uniform over the original") {
    const std::size_t N = 20, trials = 8000;
    const auto ds = numbered(N);
    std::vector<double> hits(N, 0.0);
    for (std::size_t t = 0; t < trials; ++t) {
        const auto s = subsample(subsample(ds, 10, 2 * t + 1), 5, 2 * t + 2);
        for (TokenId v : s.values()) hits[v] += 1;
    }
    // each entry is kept with probability 1/4
    double chi2 = 0.0;
    const double expect = trials * 0.25;
    for (double h : hits) chi2 += (h - expect) * (h - expect) / expect;
    // 19 degrees of freedom; 43.8 is the 0.999 quantile
    CHECK(chi2 < 43.8);
}

TEST_CASE("datastore file: exact size, mapped load, bit-exact round trip") {
    testutil::TempDir dir("ds");
    const auto m = small_model();
    TokenSequence seq{{2, 3, 4, 5, 6, 7, 8}, {0}};
    const auto ds = build_datastore(m, seq, KeyTap::HiddenPostActivation);
    save_datastore(ds, dir.file("d.bin"));
    CHECK(std::filesystem::file_size(dir.file("d.bin")) == kDatastoreHeaderBytes + 4 * 7 * 6 + 4 * 7);
    const auto back = load_datastore(dir.file("d.bin"));
    CHECK(back.is_mapped());
    CHECK(back.dim() == ds.dim());
    CHECK(back.provenance() == ds.provenance());
    CHECK(std::memcmp(back.keys().data(), ds.keys().data(), ds.keys().size_bytes()) == 0);
    CHECK(std::equal(back.values().begin(), back.values().end(), ds.values().begin()));
    CHECK(back.content_hash() == ds.content_hash());
}

TEST_CASE("corrupted or truncated datastore files raise format errors") {
    testutil::TempDir dir("dsbad");
    save_datastore(numbered(10), dir.file("d.bin"));
    auto bytes = read_file(dir.file("d.bin"));
    auto write = [&](const std::string& name, std::vector<std::uint8_t> b) {
        BinaryWriter w(dir.file(name));
        w.bytes(b.data(), b.size());
        w.close();
    };
    auto magic = bytes;
    magic[1] = 'X';
    write("magic.bin", magic);
    CHECK(testutil::error_code_of([&] { load_datastore(dir.file("magic.bin")); }) == ErrorCode::Format);
    auto version = bytes;
    version[4] = 9;
    write("version.bin", version);
    CHECK(testutil::error_code_of([&] { load_datastore(dir.file("version.bin")); }) == ErrorCode::Format);
    write("short.bin", std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3));
    CHECK(testutil::error_code_of([&] { load_datastore(dir.file("short.bin")); }) == ErrorCode::Format);
    write("tiny.bin", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10));
    CHECK(testutil::error_code_of([&] { load_datastore(dir.file("tiny.bin")); }) == ErrorCode::Format);
    CHECK(testutil::error_code_of([&] { load_datastore(dir.file("absent.bin")); }) == ErrorCode::Io);
}

TEST_CASE("non-finite keys are rejected") {
    std::vector<float> k{0.0f, NAN};
    CHECK_THROWS_AS(Datastore::from_vectors(2, k, {1}), Error);
    CHECK_THROWS_AS(Datastore::from_vectors(2, {0.0f}, {1}), Error);
}

TEST_CASE("traces round trip; datastore files import as datastores") {
    testutil::TempDir dir("trace");
    const auto m = small_model();
    TokenSequence seq{{2, 3, 4, 5, 6, 2, 3}, {0, 4}};
    const auto trace = make_trace(m, seq, KeyTap::HiddenPostLayerNorm);
    save_trace(trace, dir.file("t.bin"));
    const auto loaded = import_trace(dir.file("t.bin"));
    REQUIRE(std::holds_alternative<EvalTrace>(loaded));
    const auto& t = std::get<EvalTrace>(loaded);
    CHECK(t.keys == trace.keys);
    CHECK(t.targets == trace.targets);
    CHECK(t.logp == trace.logp);
    CHECK(t.doc_ids == trace.doc_ids);
    CHECK(t.prov == trace.prov);

    save_datastore(build_datastore(m, seq, KeyTap::HiddenPostLayerNorm), dir.file("d.bin"));
    CHECK(std::holds_alternative<Datastore>(import_trace(dir.file("d.bin"))));
    CHECK(testutil::error_code_of([&] { import_trace(dir.file("d.bin"), 7); }) == ErrorCode::DimensionMismatch);
    CHECK(testutil::error_code_of([&] { import_trace(dir.file("t.bin"), 7); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("a trace of uniform log-probs has base perplexity V") {
    EvalTrace t;
    t.dim = 1;
    const float lp = -std::log(37.0f);
    for (int i = 0; i < 100; ++i) {
        t.keys.push_back(float(i));
        t.targets.push_back(1);
        t.logp.push_back(lp);
        t.doc_ids.push_back(0);
    }
    CHECK(base_perplexity(t) == doctest::Approx(37.0).epsilon(1e-6));
}

TEST_CASE("the trace path and the datastore path produce the same pairs") {
    LmConfig c;
    c.context_len = 3;
    c.embed_dim = 5;
    c.hidden_dim = 8;
    c.vocab_size = 30;
    const FfLmModel m(c);
    Rng rng(6);
    TokenSequence seq;
    seq.doc_offsets = {0, 140, 300};
    for (int i = 0; i < 400; ++i) seq.ids.push_back(static_cast<TokenId>(2 + rng.below(28)));
    for (KeyTap tap : kAllTaps) {
        const auto ds = build_datastore(m, seq, tap);
        const auto tr = make_trace(m, seq, tap);
        CHECK(std::equal(tr.keys.begin(), tr.keys.end(), ds.keys().begin(), ds.keys().end()));
        CHECK(std::equal(tr.targets.begin(), tr.targets.end(), ds.values().begin(), ds.values().end()));
        CHECK(tr.prov == ds.provenance());
    }
}
