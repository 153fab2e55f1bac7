#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "knnlm/ann_index.hpp"

namespace knnlm {

/// Finite-support distribution, entries sorted by token id.
struct SparseDistribution {
    std::vector<std::pair<TokenId, double>> entries;

    double prob(TokenId t) const;
    double total() const;
    std::size_t support() const { return entries.size(); }
};

/// Softmax over negative neighbor distances with mass aggregated per value.
/// Distances are used exactly as the search produced them, whatever the metric.
SparseDistribution knn_distribution(std::span<const Neighbor> neighbors);
inline SparseDistribution knn_distribution(const NeighborSet& n) { return knn_distribution(n.entries); }

/// p_kNN(target) without materializing the distribution. Returns 0 when the
/// target is not among the retrieved values.
double knn_target_prob(std::span<const Neighbor> neighbors, TokenId target);

/// lambda * p_knn + (1 - lambda) * p_lm.
double interpolate(double p_lm, double p_knn, double lambda);

/// log of interpolate(exp(logp_lm), p_knn, lambda), computed without
/// underflow. lambda == 0 returns logp_lm unchanged.
double log_interpolate(double logp_lm, double p_knn, double lambda);

/// {0, 0.05, ..., 0.95, 0.99}
std::vector<double> default_lambda_grid();

struct InterpolationConfig {
    double lambda = 0.25;
    std::vector<double> grid = default_lambda_grid();

    void validate() const;
};

/// Perplexity of the interpolation at one lambda over aligned positions.
double interpolated_perplexity(std::span<const double> logp_lm, std::span<const double> p_other, double lambda);

struct LambdaFit {
    double lambda = 0.0;
    double perplexity = 0.0;
    std::vector<double> curve;  // perplexity at each grid point
};

/// Grid search for the lambda minimizing perplexity; ties go to the smaller lambda.
LambdaFit tune_lambda(std::span<const double> logp_lm, std::span<const double> p_other,
                      std::span<const double> grid);

// ---------------------------------------------------------------------------
// Continuous cache over earlier states of the same document.

struct CacheConfig {
    std::size_t window = 500;
    double theta = 0.3;
    double lambda = 0.1;
    std::vector<double> grid = default_lambda_grid();

    void validate() const;
};

/// p_cache(y) proportional to the sum over history entries with token y of
/// exp(theta * <h, h_i>). history_keys is history_tokens.size() x dim; only
/// the last cfg.window entries are used.
SparseDistribution cache_distribution(std::span<const float> history_keys, std::span<const TokenId> history_tokens,
                                      std::span<const float> current, const CacheConfig& cfg);
double cache_target_prob(std::span<const float> history_keys, std::span<const TokenId> history_tokens,
                         std::span<const float> current, const CacheConfig& cfg, TokenId target);

/// lambda * p_knn + (1 - lambda) * (lambda_c * p_cache + (1 - lambda_c) * p_lm)
double combine_three(double p_lm, double p_knn, double p_cache, double lambda, double lambda_c);
double log_combine_three(double logp_lm, double p_knn, double p_cache, double lambda, double lambda_c);

struct JointFit {
    double lambda = 0.0;
    double lambda_cache = 0.0;
    double perplexity = 0.0;
};

/// Joint grid search over (lambda, lambda_c). Positions with has_cache == 0
/// skip the cache term. Ties go to the smaller lambda, then smaller lambda_c.
JointFit tune_joint(std::span<const double> logp_lm, std::span<const double> p_knn,
                    std::span<const double> p_cache, std::span<const std::uint8_t> has_cache,
                    std::span<const double> grid, std::span<const double> cache_grid);

double joint_perplexity(std::span<const double> logp_lm, std::span<const double> p_knn,
                        std::span<const double> p_cache, std::span<const std::uint8_t> has_cache, double lambda,
                        double lambda_c);

}  // namespace knnlm
