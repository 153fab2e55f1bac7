#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "knnlm/knn_lm.hpp"
#include "test_util.hpp"

using namespace knnlm;

namespace {

std::vector<Neighbor> random_neighbors(std::size_t k, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Neighbor> nb;
    for (std::size_t i = 0; i < k; ++i)
        nb.push_back({i, static_cast<TokenId>(rng.below(12)), static_cast<float>(rng.uniform(0, 30))});
    return nb;
}

}  // namespace

TEST_CASE("kNN distribution examples") {
    const std::vector<Neighbor> one{{0, 7, 0.0f}};
    CHECK(knn_distribution(one).prob(7) == 1.0);
    const std::vector<Neighbor> two{{0, 3, 0.0f}, {1, 5, 0.0f}};
    CHECK(knn_distribution(two).prob(3) == 0.5);
    CHECK(knn_distribution(two).prob(5) == 0.5);
    const std::vector<Neighbor> ln3{{0, 3, 0.0f}, {1, 9, static_cast<float>(std::log(3.0))}};
    const auto d = knn_distribution(ln3);
    CHECK(d.prob(3) == doctest::Approx(0.75).epsilon(1e-7));
    CHECK(d.prob(9) == doctest::Approx(0.25).epsilon(1e-7));
    CHECK(d.prob(4) == 0.0);
    CHECK_THROWS_AS(knn_distribution(std::vector<Neighbor>{}), Error);
}

TEST_CASE("mass is aggregated per value and the target lookup agrees") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto nb = random_neighbors(64, s);
        const auto d = knn_distribution(nb);
        CHECK(std::abs(d.total() - 1.0) <= 1e-9);
        CHECK(d.support() <= 12);
        for (std::size_t i = 1; i < d.entries.size(); ++i) CHECK(d.entries[i - 1].first < d.entries[i].first);
        for (TokenId t = 0; t < 13; ++t) CHECK(knn_target_prob(nb, t) == doctest::Approx(d.prob(t)).epsilon(1e-12));
    }
}

TEST_CASE("kNN distribution is invariant to a shift of all distances") {
    // very large distances would underflow without the min-distance shift
    for (float shift : {0.5f, 100.0f, 5000.0f}) {
        auto nb = random_neighbors(16, 3);
        auto moved = nb;
        for (auto& n : moved) n.distance += shift;
        for (TokenId t = 0; t < 12; ++t)
            CHECK(knn_target_prob(moved, t) == doctest::Approx(knn_target_prob(nb, t)).epsilon(1e-4));
        CHECK(std::abs(knn_distribution(moved).total() - 1.0) <= 1e-9);
    }
}

TEST_CASE("interpolation endpoints and its linear form") {
    CHECK(interpolate(0.124, 0.998, 0.0) == 0.124);
    CHECK(interpolate(0.124, 0.998, 1.0) == 0.998);
    CHECK(interpolate(0.124, 0.998, 0.25) == doctest::Approx(0.3425).epsilon(1e-12));
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double a = rng.uniform(), b = rng.uniform(), l = rng.uniform();
        const double p = interpolate(a, b, l);
        CHECK(p >= std::min(a, b) - 1e-15);
        CHECK(p <= std::max(a, b) + 1e-15);
        CHECK(std::exp(log_interpolate(std::log(a), b, l)) == doctest::Approx(p).epsilon(1e-12));
    }
    const double lp = std::log(0.37);
    CHECK(log_interpolate(lp, 0.9, 0.0) == lp);
    CHECK(log_interpolate(lp, 0.9, 1.0) == std::log(0.9));
    CHECK(log_interpolate(-2000.0, 0.0, 0.5) == doctest::Approx(std::log(0.5) - 2000.0));
    CHECK(log_interpolate(-2000.0, 0.5, 0.5) == doctest::Approx(std::log(0.25)));
}

TEST_CASE("interpolating two dense distributions stays normalized") {
    Rng rng(4);
    const std::size_t V = 1000;
    std::vector<double> p(V), q(V);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < V; ++i) {
        p[i] = rng.uniform();
        sp += p[i];
        q[i] = i % 7 == 0 ? rng.uniform() : 0.0;
        sq += q[i];
    }
    for (std::size_t i = 0; i < V; ++i) {
        p[i] /= sp;
        q[i] /= sq;
    }
    for (double l : default_lambda_grid()) {
        double s = 0;
        for (std::size_t i = 0; i < V; ++i) s += interpolate(p[i], q[i], l);
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("default grid and configuration validation") {
    const auto g = default_lambda_grid();
    REQUIRE(g.size() == 21);
    CHECK(g.front() == 0.0);
    CHECK(g[1] == doctest::Approx(0.05));
    CHECK(g[19] == doctest::Approx(0.95));
    CHECK(g.back() == 0.99);
    InterpolationConfig c;
    CHECK_NOTHROW(c.validate());
    c.lambda = 1.5;
    CHECK_THROWS_AS(c.validate(), Error);
    c.lambda = 0.5;
    c.grid = {0.0, 0.5, 0.3};
    CHECK_THROWS_AS(c.validate(), Error);
    c.grid = {};
    CHECK_THROWS_AS(c.validate(), Error);
    CacheConfig cc;
    CHECK_NOTHROW(cc.validate());
    cc.theta = 0;
    CHECK_THROWS_AS(cc.validate(), Error);
    cc.theta = 1;
    cc.window = 0;
    CHECK_THROWS_AS(cc.validate(), Error);
}

TEST_CASE("tune_lambda degenerate traces") {
    const std::vector<double> logp{std::log(0.2), std::log(0.5), std::log(0.9)};
    const auto g = default_lambda_grid();
    const auto always = tune_lambda(logp, std::vector<double>{1, 1, 1}, g);
    CHECK(always.lambda == 0.99);
    const auto never = tune_lambda(logp, std::vector<double>{0, 0, 0}, g);
    CHECK(never.lambda == 0.0);
    CHECK(never.perplexity == doctest::Approx(std::exp(-(logp[0] + logp[1] + logp[2]) / 3)).epsilon(1e-14));
    // identical curves: ties resolve to the smaller lambda
    const std::vector<double> sure{0.0, 0.0};
    CHECK(tune_lambda(sure, std::vector<double>{1, 1}, g).lambda == 0.0);
}

TEST_CASE("tune_lambda matches a brute-force grid evaluation") {
    Rng rng(17);
    const std::size_t n = 5000;
    std::vector<double> logp(n), pk(n);
    for (std::size_t i = 0; i < n; ++i) {
        logp[i] = std::log(rng.uniform(0.001, 1.0));
        pk[i] = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    }
    const auto g = default_lambda_grid();
    double best = INFINITY, best_l = -1;
    for (double l : g) {
        long double nll = 0;
        for (std::size_t i = 0; i < n; ++i) nll -= std::log(l * pk[i] + (1 - l) * std::exp(logp[i]));
        const double ppl = std::exp(static_cast<double>(nll / n));
        if (ppl < best - 1e-12) {
            best = ppl;
            best_l = l;
        }
    }
    const auto fit = tune_lambda(logp, pk, g);
    CHECK(fit.lambda == best_l);
    CHECK(fit.perplexity == doctest::Approx(best).epsilon(1e-10));
    CHECK(fit.curve.size() == g.size());
    CHECK(fit.perplexity <= fit.curve.front());
    CHECK(*std::min_element(fit.curve.begin(), fit.curve.end()) == fit.perplexity);
}

TEST_CASE("interpolated perplexity is independent of the thread count") {
    Rng rng(2);
    std::vector<double> logp(20000), pk(20000);
    for (std::size_t i = 0; i < logp.size(); ++i) {
        logp[i] = std::log(rng.uniform(0.01, 1));
        pk[i] = rng.uniform();
    }
    set_num_threads(1);
    const double a = interpolated_perplexity(logp, pk, 0.3);
    set_num_threads(3);
    const double b = interpolated_perplexity(logp, pk, 0.3);
    set_num_threads(1);
    CHECK(a == b);
    CHECK_THROWS_AS(interpolated_perplexity(logp, std::vector<double>(3), 0.3), Error);
}

TEST_CASE("cache distribution examples") {
    CacheConfig cfg;
    cfg.theta = 1.0;
    const std::vector<float> h1{0.3f, -2.0f};
    const std::vector<TokenId> w1{4};
    const std::vector<float> cur{1.0f, 1.0f};
    CHECK(cache_distribution(h1, w1, cur, cfg).prob(4) == 1.0);

    // inner products s and s - ln 2 with distinct tokens
    const float s = 1.5f, l2 = static_cast<float>(std::log(2.0));
    const std::vector<float> h2{s, 0.0f, s - l2, 0.0f};
    const std::vector<TokenId> w2{5, 6};
    const auto d = cache_distribution(h2, w2, std::vector<float>{1.0f, 0.0f}, cfg);
    CHECK(d.prob(5) == doctest::Approx(2.0 / 3).epsilon(1e-6));
    CHECK(d.prob(6) == doctest::Approx(1.0 / 3).epsilon(1e-6));
    CHECK_THROWS_AS(cache_distribution({}, {}, cur, cfg), Error);
}

TEST_CASE("cache with a vanishing temperature is the window unigram") {
    CacheConfig cfg;
    cfg.theta = 1e-6;
    cfg.window = 30;
    const auto keys = testutil::random_matrix(100, 8, 6);
    Rng rng(3);
    std::vector<TokenId> toks(100);
    for (auto& t : toks) t = static_cast<TokenId>(rng.below(5));
    const auto cur = testutil::random_matrix(1, 8, 7);
    const auto d = cache_distribution(keys, toks, cur, cfg);
    for (TokenId t = 0; t < 5; ++t) {
        const double freq = std::count(toks.end() - 30, toks.end(), t) / 30.0;
        CHECK(std::abs(d.prob(t) - freq) <= 1e-4);
        CHECK(cache_target_prob(keys, toks, cur, cfg, t) == doctest::Approx(d.prob(t)).epsilon(1e-12));
    }
    CHECK(std::abs(d.total() - 1.0) <= 1e-9);
    // theta -> 0 with tokens {a, a, b}
    const std::vector<TokenId> aab{2, 2, 3};
    const auto e = cache_distribution(std::span<const float>(keys.data(), 24), aab, cur, cfg);
    CHECK(std::abs(e.prob(2) - 2.0 / 3) <= 1e-4);
    CHECK(std::abs(e.prob(3) - 1.0 / 3) <= 1e-4);
}

TEST_CASE("three-way combination") {
    CHECK(combine_three(0.1, 0.5, 0.3, 0.0, 0.0) == 0.1);
    CHECK(combine_three(0.1, 0.5, 0.3, 1.0, 0.4) == 0.5);
    CHECK(combine_three(0.1, 0.5, 0.3, 0.25, 0.2) == doctest::Approx(0.23).epsilon(1e-12));
    CHECK(std::exp(log_combine_three(std::log(0.1), 0.5, 0.3, 0.25, 0.2)) == doctest::Approx(0.23).epsilon(1e-12));
}

TEST_CASE("joint tuning contains both single-component optima") {
    Rng rng(9);
    const std::size_t n = 3000;
    std::vector<double> logp(n), pk(n), pc(n);
    std::vector<std::uint8_t> has(n);
    for (std::size_t i = 0; i < n; ++i) {
        logp[i] = std::log(rng.uniform(0.01, 1));
        pk[i] = rng.uniform() < 0.5 ? rng.uniform() : 0.0;
        pc[i] = rng.uniform();
        has[i] = i % 10 != 0;
    }
    const auto g = default_lambda_grid();
    const auto j = tune_joint(logp, pk, pc, has, g, g);
    CHECK(j.perplexity <= tune_lambda(logp, pk, g).perplexity);
    CHECK(j.perplexity <= joint_perplexity(logp, pk, pc, has, 0.0, 0.0));
    CHECK(joint_perplexity(logp, pk, pc, has, 0.0, 0.0) == doctest::Approx(interpolated_perplexity(logp, pk, 0.0)));
    CHECK(joint_perplexity(logp, pk, pc, has, j.lambda, j.lambda_cache) == j.perplexity);
    // masked positions ignore the cache term entirely
    std::vector<std::uint8_t> none(n, 0);
    CHECK(joint_perplexity(logp, pk, pc, none, 0.3, 0.7) == interpolated_perplexity(logp, pk, 0.3));
}
