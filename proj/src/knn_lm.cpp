#include "knnlm/knn_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace knnlm {

double SparseDistribution::prob(TokenId t) const {
    const auto it = std::lower_bound(entries.begin(), entries.end(), t,
                                     [](const auto& e, TokenId v) { return e.first < v; });
    return it != entries.end() && it->first == t ? it->second : 0.0;
}

double SparseDistribution::total() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.second;
    return s;
}

namespace {

// Weights exp(-(d_i - d_min)) so the nearest neighbor has weight 1.
double min_distance(std::span<const Neighbor> nb) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& n : nb) m = std::min(m, static_cast<double>(n.distance));
    return m;
}

SparseDistribution normalize_grouped(std::vector<std::pair<TokenId, double>> w) {
    std::sort(w.begin(), w.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    SparseDistribution out;
    double z = 0.0;
    for (const auto& [tok, weight] : w) {
        z += weight;
        if (!out.entries.empty() && out.entries.back().first == tok)
            out.entries.back().second += weight;
        else
            out.entries.emplace_back(tok, weight);
    }
    for (auto& e : out.entries) e.second /= z;
    return out;
}

double log_add(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(std::min(a, b) - m));
}

void check_grid(std::span<const double> grid, const char* what) {
    require(!grid.empty(), ErrorCode::InvalidArgument, std::string(what) + " grid is empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        require(grid[i] >= 0.0 && grid[i] <= 1.0, ErrorCode::InvalidArgument,
                std::string(what) + " grid values must lie in [0, 1]");
        require(i == 0 || grid[i] > grid[i - 1], ErrorCode::InvalidArgument,
                std::string(what) + " grid must be strictly increasing");
    }
}

double perplexity_of(std::vector<double>& nll) {
    return std::exp(pairwise_sum(nll) / static_cast<double>(nll.size()));
}

}  // namespace

SparseDistribution knn_distribution(std::span<const Neighbor> neighbors) {
    require(!neighbors.empty(), ErrorCode::EmptyInput, "kNN distribution of an empty neighbor set");
    const double dmin = min_distance(neighbors);
    std::vector<std::pair<TokenId, double>> w;
    w.reserve(neighbors.size());
    for (const auto& n : neighbors) w.emplace_back(n.value, std::exp(dmin - n.distance));
    return normalize_grouped(std::move(w));
}

double knn_target_prob(std::span<const Neighbor> neighbors, TokenId target) {
    require(!neighbors.empty(), ErrorCode::EmptyInput, "kNN distribution of an empty neighbor set");
    const double dmin = min_distance(neighbors);
    double z = 0.0, hit = 0.0;
    for (const auto& n : neighbors) {
        const double w = std::exp(dmin - n.distance);
        z += w;
        if (n.value == target) hit += w;
    }
    return hit / z;
}

double interpolate(double p_lm, double p_knn, double lambda) {
    if (lambda == 0.0) return p_lm;
    if (lambda == 1.0) return p_knn;
    return lambda * p_knn + (1.0 - lambda) * p_lm;
}

double log_interpolate(double logp_lm, double p_knn, double lambda) {
    if (lambda == 0.0) return logp_lm;
    if (lambda == 1.0) return std::log(p_knn);
    const double a = std::log1p(-lambda) + logp_lm;
    if (p_knn <= 0.0) return a;
    return log_add(a, std::log(lambda) + std::log(p_knn));
}

std::vector<double> default_lambda_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 19; ++i) g.push_back(i * 0.05);
    g.push_back(0.99);
    return g;
}

void InterpolationConfig::validate() const {
    require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::InvalidArgument, "lambda must lie in [0, 1]");
    check_grid(grid, "lambda");
}

double interpolated_perplexity(std::span<const double> logp_lm, std::span<const double> p_other, double lambda) {
    require(!logp_lm.empty(), ErrorCode::EmptyInput, "perplexity over zero positions");
    require(logp_lm.size() == p_other.size(), ErrorCode::DimensionMismatch, "position count mismatch");
    std::vector<double> nll(logp_lm.size());
    parallel_for(nll.size(), 4096, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) nll[i] = -log_interpolate(logp_lm[i], p_other[i], lambda);
    });
    return perplexity_of(nll);
}

LambdaFit tune_lambda(std::span<const double> logp_lm, std::span<const double> p_other,
                      std::span<const double> grid) {
    check_grid(grid, "lambda");
    LambdaFit fit;
    fit.perplexity = std::numeric_limits<double>::infinity();
    for (double lambda : grid) {
        const double ppl = interpolated_perplexity(logp_lm, p_other, lambda);
        fit.curve.push_back(ppl);
        if (ppl < fit.perplexity || fit.curve.size() == 1) {
            fit.perplexity = ppl;
            fit.lambda = lambda;
        }
    }
    return fit;
}

// ---------------------------------------------------------------------------

void CacheConfig::validate() const {
    require(window >= 1, ErrorCode::InvalidArgument, "cache window must be >= 1");
    require(theta > 0.0 && std::isfinite(theta), ErrorCode::InvalidArgument, "cache theta must be > 0");
    require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::InvalidArgument, "cache lambda must lie in [0, 1]");
    check_grid(grid, "cache lambda");
}

namespace {

// Unnormalized log-weights theta * <h, h_i> over the last `window` entries.
std::vector<double> cache_scores(std::span<const float> keys, std::span<const TokenId> tokens,
                                 std::span<const float> current, const CacheConfig& cfg, std::size_t& first) {
    const std::size_t d = current.size();
    require(!tokens.empty(), ErrorCode::EmptyInput, "cache distribution with an empty history");
    require(keys.size() == tokens.size() * d, ErrorCode::DimensionMismatch, "cache history size mismatch");
    first = tokens.size() > cfg.window ? tokens.size() - cfg.window : 0;
    std::vector<double> s(tokens.size() - first);
    for (std::size_t i = first; i < tokens.size(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(keys[i * d + j]) * current[j];
        s[i - first] = cfg.theta * dot;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    for (double& v : s) v = std::exp(v - mx);
    return s;
}

}  // namespace

SparseDistribution cache_distribution(std::span<const float> history_keys, std::span<const TokenId> history_tokens,
                                      std::span<const float> current, const CacheConfig& cfg) {
    std::size_t first = 0;
    const auto w = cache_scores(history_keys, history_tokens, current, cfg, first);
    std::vector<std::pair<TokenId, double>> pairs;
    for (std::size_t i = 0; i < w.size(); ++i) pairs.emplace_back(history_tokens[first + i], w[i]);
    return normalize_grouped(std::move(pairs));
}

double cache_target_prob(std::span<const float> history_keys, std::span<const TokenId> history_tokens,
                         std::span<const float> current, const CacheConfig& cfg, TokenId target) {
    std::size_t first = 0;
    const auto w = cache_scores(history_keys, history_tokens, current, cfg, first);
    double z = 0.0, hit = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        z += w[i];
        if (history_tokens[first + i] == target) hit += w[i];
    }
    return hit / z;
}

double combine_three(double p_lm, double p_knn, double p_cache, double lambda, double lambda_c) {
    return interpolate(interpolate(p_lm, p_cache, lambda_c), p_knn, lambda);
}

double log_combine_three(double logp_lm, double p_knn, double p_cache, double lambda, double lambda_c) {
    return log_interpolate(log_interpolate(logp_lm, p_cache, lambda_c), p_knn, lambda);
}

double joint_perplexity(std::span<const double> logp_lm, std::span<const double> p_knn,
                        std::span<const double> p_cache, std::span<const std::uint8_t> has_cache, double lambda,
                        double lambda_c) {
    const std::size_t n = logp_lm.size();
    require(n > 0, ErrorCode::EmptyInput, "perplexity over zero positions");
    require(p_knn.size() == n && p_cache.size() == n && has_cache.size() == n, ErrorCode::DimensionMismatch,
            "position count mismatch");
    std::vector<double> nll(n);
    parallel_for(n, 4096, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double lc = has_cache[i] ? log_interpolate(logp_lm[i], p_cache[i], lambda_c) : logp_lm[i];
            nll[i] = -log_interpolate(lc, p_knn[i], lambda);
        }
    });
    return perplexity_of(nll);
}

JointFit tune_joint(std::span<const double> logp_lm, std::span<const double> p_knn,
                    std::span<const double> p_cache, std::span<const std::uint8_t> has_cache,
                    std::span<const double> grid, std::span<const double> cache_grid) {
    check_grid(grid, "lambda");
    check_grid(cache_grid, "cache lambda");
    JointFit fit;
    fit.perplexity = std::numeric_limits<double>::infinity();
    bool first = true;
    for (double l : grid)
        for (double lc : cache_grid) {
            const double ppl = joint_perplexity(logp_lm, p_knn, p_cache, has_cache, l, lc);
            if (first || ppl < fit.perplexity) {
                fit = {l, lc, ppl};
                first = false;
            }
        }
    return fit;
}

}  // namespace knnlm
