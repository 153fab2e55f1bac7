#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "knnlm/neural_lm.hpp"
#include "test_util.hpp"

using namespace knnlm;

namespace {

LmConfig small_config(std::size_t V = 50) {
    LmConfig c;
    c.context_len = 3;
    c.embed_dim = 8;
    c.hidden_dim = 16;
    c.vocab_size = V;
    c.seed = 3;
    return c;
}

std::vector<TokenId> random_ids(std::size_t n, std::size_t V, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenId> v(n);
    for (auto& x : v) x = static_cast<TokenId>(rng.below(V));
    return v;
}

template <class Real>
void zero_all(BasicFfLm<Real>& m) {
    for (auto t : m.tensors()) std::fill(t.begin(), t.end(), Real(0));
}

}  // namespace

TEST_CASE("initialization is deterministic in the seed and within the fan-in bound") {
    const auto cfg = small_config();
    FfLmModel a(cfg), b(cfg);
    CHECK(a.hash() == b.hash());
    CHECK(a.w_hidden == b.w_hidden);
    auto other = cfg;
    other.seed = 4;
    CHECK(FfLmModel(other).hash() != a.hash());
    const double bound = 1.0 / std::sqrt(double(cfg.context_len * cfg.embed_dim));
    for (float w : a.w_hidden) CHECK(std::abs(w) <= bound);
    for (float w : a.b_hidden) CHECK(w == 0.0f);
    for (float w : a.b_out) CHECK(w == 0.0f);
}

TEST_CASE("forward yields normalized distributions") {
    FfLmModel m(small_config());
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const auto ctx = random_ids(3, 50, 100 + i);
        const auto f = m.forward(ctx);
        double s = 0.0;
        for (float p : f.probs) {
            CHECK(p >= 0.0f);
            s += p;
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("zero weights give the uniform distribution and nll ln V") {
    FfLmModel m(small_config());
    zero_all(m);
    const TokenId ctx[] = {4, 5, 6};
    for (float p : m.forward(ctx).probs) CHECK(p == doctest::Approx(1.0 / 50).epsilon(1e-6));
    TokenSequence seq{random_ids(200, 50, 9), {0, 120}};
    CHECK(mean_nll(m, seq) == doctest::Approx(std::log(50.0)).epsilon(1e-6));
    FfLmModelF64 d = m.cast<double>();
    CHECK(std::abs(mean_nll(d, seq) - std::log(50.0)) <= 1e-12);
}

TEST_CASE("inference is deterministic and ignores dropout; training mode drops units") {
    auto cfg = small_config();
    cfg.dropout_rate = 0.5;
    FfLmModel m(cfg);
    auto plain_cfg = cfg;
    plain_cfg.dropout_rate = 0.0;
    FfLmModel plain(plain_cfg);
    const TokenId ctx[] = {1, 7, 9};
    const auto a = m.forward(ctx), b = m.forward(ctx);
    CHECK(a.probs == b.probs);
    CHECK(a.probs == plain.forward(ctx).probs);
    Rng rng(5);
    bool changed = false;
    for (int i = 0; i < 5; ++i) changed |= m.forward(ctx, true, &rng).probs != a.probs;
    CHECK(changed);
}

TEST_CASE("taps: keys equal forward states and differ between taps") {
    FfLmModel m(small_config());
    const TokenId ctx[] = {3, 8, 2};
    const auto f = m.forward(ctx);
    for (KeyTap tap : kAllTaps) {
        const auto k = m.extract_key(ctx, tap);
        CHECK(k == f.taps[static_cast<int>(tap)]);
        CHECK(k.size() == 16);
    }
    CHECK(f.taps[0] != f.taps[1]);
    CHECK(f.taps[1] != f.taps[2]);

    auto cfg = small_config();
    cfg.use_layer_norm = false;
    FfLmModel noln(cfg);
    CHECK(testutil::error_code_of([&] { noln.extract_key(ctx, KeyTap::HiddenPostLayerNorm); }) ==
          ErrorCode::InvalidArgument);
    CHECK(parse_tap(tap_name(KeyTap::OutputLogitsInput)) == KeyTap::OutputLogitsInput);
    CHECK_THROWS_AS(parse_tap("mhsa-input"), Error);
}

TEST_CASE("batch key extraction and scoring agree with single forwards") {
    FfLmModel m(small_config());
    const auto ctx = random_ids(3 * 40, 50, 2);
    const auto tgt = random_ids(40, 50, 3);
    std::vector<float> keys(40 * 16), batch_keys(40 * 16), logp(40);
    m.extract_keys(ctx, KeyTap::HiddenPostLayerNorm, keys);
    m.score(ctx, tgt, KeyTap::HiddenPostLayerNorm, batch_keys, logp);
    CHECK(keys == batch_keys);
    for (std::size_t i = 0; i < 40; ++i) {
        const std::span<const TokenId> c(ctx.data() + 3 * i, 3);
        const auto f = m.forward(c);
        CHECK(std::equal(f.taps[2].begin(), f.taps[2].end(), keys.begin() + 16 * i));
        CHECK(logp[i] == doctest::Approx(std::log(f.probs[tgt[i]])).epsilon(1e-5));
    }
}

TEST_CASE("identical contexts in different documents have identical keys") {
    FfLmModel m(small_config());
    TokenSequence seq{{5, 6, 7, 8, 5, 6, 7, 8}, {0, 4}};
    const WindowSet w(seq, m.config().window());
    CHECK(m.extract_key(w.context(3), KeyTap::HiddenPostLayerNorm) ==
          m.extract_key(w.context(7), KeyTap::HiddenPostLayerNorm));
}

TEST_CASE("forward rejects out of range ids and wrong widths") {
    FfLmModel m(small_config());
    const TokenId bad[] = {1, 2, 50};
    CHECK(testutil::error_code_of([&] { m.forward(bad); }) == ErrorCode::InvalidArgument);
    const TokenId shortc[] = {1, 2};
    CHECK_THROWS_AS(m.forward(shortc), Error);
}

TEST_CASE("analytic gradients match finite differences (V=50, d=16)") {
    const auto ctx = random_ids(3 * 32, 50, 11);
    const auto tgt = random_ids(32, 50, 12);
    for (bool ln : {true, false}) {
        auto cfg = small_config();
        cfg.use_layer_norm = ln;
        FfLmModelF64 m(cfg);
        const auto r = grad_check(m, ctx, tgt, 1e-5, 300);
        CHECK(r.checked == 300);
        CHECK(r.max_rel_error < 1e-4);
        // the oracle is stable under a change of step
        const auto r2 = grad_check(m, ctx, tgt, 2e-5, 300);
        CHECK(r2.max_rel_error < 10 * std::max(r.max_rel_error, 1e-9));
        CHECK(r.max_rel_error < 10 * std::max(r2.max_rel_error, 1e-9));
    }
    CHECK_THROWS_AS(grad_check(FfLmModelF64(small_config()), ctx, tgt, 1e-3), Error);
}

TEST_CASE("embedding gradient in the linear softmax case matches the closed form") {
    // n=1, d=E, identity hidden weights, positive bias so ReLU is linear near
    // zero embeddings; b_out cancels the logits so the output is uniform.
    LmConfig cfg;
    cfg.context_len = 1;
    cfg.embed_dim = 6;
    cfg.hidden_dim = 6;
    cfg.vocab_size = 9;
    cfg.use_layer_norm = false;
    FfLmModelF64 m(cfg);
    zero_all(m);
    const std::size_t d = 6, V = 9;
    for (std::size_t j = 0; j < d; ++j) {
        m.w_hidden[j * d + j] = 1.0;
        m.b_hidden[j] = 1.0;
    }
    Rng rng(8);
    for (auto& w : m.w_out) w = rng.uniform(-1, 1);
    for (std::size_t v = 0; v < V; ++v) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += m.w_out[j * V + v];
        m.b_out[v] = -s;
    }
    const TokenId ctx[] = {4};
    const TokenId tgt[] = {2};
    for (double p : m.forward(ctx).probs) CHECK(p == doctest::Approx(1.0 / 9).epsilon(1e-12));

    std::vector<std::vector<double>> g;
    loss_and_gradient<double>(m, ctx, tgt, {}, &g);
    for (std::size_t j = 0; j < d; ++j) {
        double mean_col = 0;
        for (std::size_t v = 0; v < V; ++v) mean_col += m.w_out[j * V + v] / V;
        const double expect = mean_col - m.w_out[j * V + 2];
        CHECK(std::abs(g[0][4 * d + j] - expect) <= 1e-12);
        CHECK(g[0][3 * d + j] == 0.0);
    }
}

TEST_CASE("mean_nll matches a direct per-token sum") {
    FfLmModelF64 m = FfLmModel(small_config()).cast<double>();
    TokenSequence seq{random_ids(100, 50, 4), {0, 37, 80}};
    const WindowSet w(seq, m.config().window());
    long double total = 0;
    for (std::size_t i = 0; i < w.size(); ++i) total -= std::log(m.forward(w.context(i)).probs[w.target(i)]);
    CHECK(std::abs(mean_nll(m, seq) - static_cast<double>(total / 100)) <= 1e-10);
}

TEST_CASE("degenerate corpus of one repeated token is fit") {
    auto cfg = small_config(5);
    cfg.epochs = 5;
    cfg.learning_rate = 1e-2;
    FfLmModel m(cfg);
    TokenSequence seq{std::vector<TokenId>(2000, 3), {0}};
    const auto r = train(m, seq);
    CHECK(r.loss_curve.size() == 5);
    CHECK(mean_nll(m, seq) < 0.01);
}

TEST_CASE("without dropout a tiny corpus is memorized, with a non-increasing loss") {
    // Five identical documents of 50 random 20-token sentences: each 4-token
    // context determines its successor, so zero training loss is attainable.
    Rng rng(10);
    std::vector<std::vector<TokenId>> sentences(50);
    for (auto& s : sentences)
        for (int i = 0; i < 20; ++i) s.push_back(static_cast<TokenId>(2 + rng.below(98)));
    TokenSequence seq;
    for (int rep = 0; rep < 5; ++rep) {
        seq.doc_offsets.push_back(seq.ids.size());
        for (const auto& s : sentences) seq.ids.insert(seq.ids.end(), s.begin(), s.end());
    }
    LmConfig cfg;
    cfg.context_len = 4;
    cfg.embed_dim = 16;
    cfg.hidden_dim = 128;
    cfg.vocab_size = 100;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.learning_rate = 2e-3;
    FfLmModel m(cfg);
    const auto r = train(m, seq);
    for (std::size_t e = 1; e < r.loss_curve.size(); ++e) CHECK(r.loss_curve[e] <= r.loss_curve[e - 1] * 1.01);
    CHECK(std::exp(mean_nll(m, seq)) < 1.1);

    FfLmModel again(cfg);
    train(again, TokenSequence(seq));
    CHECK(again.hash() == m.hash());
}

TEST_CASE("model file round trip and corruption") {
    testutil::TempDir dir("lm");
    FfLmModel m(small_config());
    m.save(dir.file("m.bin"));
    const auto back = FfLmModel::load(dir.file("m.bin"));
    CHECK(back.hash() == m.hash());
    CHECK(back.config().hidden_dim == 16);
    auto bytes = read_file(dir.file("m.bin"));
    bytes[0] = 'X';
    {
        BinaryWriter w(dir.file("bad.bin"));
        w.bytes(bytes.data(), bytes.size());
    }
    CHECK(testutil::error_code_of([&] { FfLmModel::load(dir.file("bad.bin")); }) == ErrorCode::Format);
    {
        BinaryWriter w(dir.file("short.bin"));
        w.bytes(bytes.data() + 0, bytes.size() / 2);
    }
    CHECK_THROWS_AS(FfLmModel::load(dir.file("short.bin")), Error);
}

TEST_CASE("training rejects empty input and divergence is reported") {
    FfLmModel m(small_config());
    CHECK(testutil::error_code_of([&] { train(m, TokenSequence{}); }) == ErrorCode::EmptyInput);
    auto cfg = small_config();
    cfg.learning_rate = 1e30;
    cfg.epochs = 3;
    FfLmModel wild(cfg);
    TokenSequence seq{random_ids(500, 50, 1), {0}};
    CHECK(testutil::error_code_of([&] { train(wild, seq); }) == ErrorCode::Diverged);
}
