#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "knnlm/ann_index.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/knn_lm.hpp"
#include "knnlm/neural_lm.hpp"
#include "knnlm/ngram_lm.hpp"

namespace knnlm {

/// One inference-mode record per token of seq, in corpus order.
EvalTrace make_trace(const FfLmModel& model, const TokenSequence& seq, KeyTap tap);

/// exp(-mean logp) of the base LM over the trace.
double base_perplexity(const EvalTrace& trace);
std::vector<double> trace_logp(const EvalTrace& trace);

/// p_kNN(target) per trace position for several k at once. Neighbors are
/// retrieved once at the largest k and truncated to each prefix. Without an
/// index the datastore is scanned exactly (squared L2).
struct KnnProbs {
    std::vector<std::size_t> ks;
    std::vector<std::vector<double>> p;  // p[j][i] for ks[j], position i
    std::vector<std::size_t> misses;     // per k
    Metric metric = Metric::SquaredL2;
};

KnnProbs knn_target_probs(const EvalTrace& trace, const Datastore& ds, const IvfPqIndex* index,
                          const SearchParams& params, std::vector<std::size_t> ks);

/// p_cache(target) per position from the preceding trace keys of the same
/// document; has[i] == 0 where the history is empty.
struct CacheProbs {
    std::vector<double> p;
    std::vector<std::uint8_t> has;
};

CacheProbs cache_target_probs(const EvalTrace& trace, const CacheConfig& cfg);

struct EvalOptions {
    SearchParams params;
    InterpolationConfig interp;
    std::optional<CacheConfig> cache;
    /// Tune lambda (and the cache lambda) on the evaluated trace itself;
    /// otherwise the configured values are applied as given.
    bool tune = false;
    /// Fixed (lambda, lambda_c) for the kNN + cache combination; defaults to
    /// (interp.lambda, cache->lambda).
    std::optional<std::pair<double, double>> joint;
};

struct EvalReport {
    std::size_t tokens = 0;
    double base = 0.0;
    std::optional<double> knn;
    std::optional<double> cache;
    std::optional<double> knn_cache;
    double lambda = 0.0;
    std::optional<double> lambda_cache;        // cache-only combination
    std::optional<double> joint_lambda;        // kNN + cache
    std::optional<double> joint_lambda_cache;
    bool lambda_tuned = false;
    std::size_t k = 0;
    std::size_t nprobe = 0;
    std::string search;  // "exact-scan", or the index rerank mode
    std::string tap;
    std::size_t misses = 0;
    std::map<std::string, double> seconds;

    /// Human-readable summary; wall-clock lines only when with_timing.
    std::string to_text(bool with_timing = true) const;
    std::string to_json(bool with_timing = true) const;
};

/// Evaluates the trace with optional retrieval (ds) and continuous cache.
/// With lambda fixed at 1 any retrieval miss is an error.
EvalReport evaluate(const EvalTrace& trace, const Datastore* ds, const IvfPqIndex* index, const EvalOptions& opt);

// ---------------------------------------------------------------------------
// Sweeps. Every row carries the lambda tuned for that configuration on the
// dev trace; the lambda axis instead reports fixed-lambda perplexities.

struct ExperimentGrid {
    std::string axis;  // k, lambda, datastore_size, nprobe, key_tap, ngram_order
    std::vector<double> values;

    void validate() const;
};

struct SweepRow {
    std::string axis;
    std::string value;
    double lambda = 0.0;
    double dev_perplexity = 0.0;
    std::size_t misses = 0;
};

std::string sweep_csv(const std::vector<SweepRow>& rows);

struct SweepInputs {
    const EvalTrace* dev = nullptr;
    const Datastore* ds = nullptr;
    const IvfPqIndex* index = nullptr;
    SearchParams params;
    std::vector<double> lambda_grid = default_lambda_grid();
    /// datastore_size: rebuild an index per point with desk-scaled settings
    /// (exact scan when false).
    bool index_per_size = false;
    std::uint64_t seed = 1;
    // key_tap and ngram_order need the model and token streams
    const FfLmModel* model = nullptr;
    const TokenSequence* train = nullptr;
    const TokenSequence* dev_tokens = nullptr;
    double ngram_discount = 0.75;
};

std::vector<SweepRow> run_sweep(const ExperimentGrid& grid, const SweepInputs& in);

// ---------------------------------------------------------------------------

struct MemorizationConfig {
    LmConfig lm;  // dropout_rate is the regularized model's rate
    KeyTap tap = KeyTap::HiddenPostLayerNorm;
    std::size_t k = 64;
    std::vector<double> lambda_grid = default_lambda_grid();
};

struct MemorizationReport {
    std::vector<double> loss_dropout;   // per-epoch train-mode mean NLL
    std::vector<double> loss_memorize;
    double train_ppl_dropout = 0.0;     // exp(final epoch loss)
    double train_ppl_memorize = 0.0;
    double dev_base = 0.0;
    double dev_memorize = 0.0;
    double dev_base_plus_memorize = 0.0;
    double lambda_memorize = 0.0;
    double dev_knn = 0.0;
    double lambda_knn = 0.0;

    std::string curves_csv() const;
    std::string to_text() const;
};

/// Trains two LMs differing only in dropout and compares the memorizing LM
/// as an interpolation partner against a training-set datastore.
MemorizationReport memorization_experiment(const TokenSequence& train, const TokenSequence& dev,
                                           const MemorizationConfig& cfg);

struct DomainAdaptConfig {
    LmConfig lm;
    KeyTap tap = KeyTap::HiddenPostLayerNorm;
    SearchParams params{};
    /// Datastores are scanned exactly unless this is set.
    bool use_index = false;
    std::vector<double> lambda_grid = default_lambda_grid();
};

struct DomainAdaptReport {
    double cross_base = 0.0;  // LM trained on A, evaluated on B
    double cross_knn = 0.0;   // ... with a B datastore
    double cross_lambda = 0.0;
    double in_base = 0.0;     // LM trained on B
    double in_knn = 0.0;
    double in_lambda = 0.0;

    std::string to_text() const;
    std::string to_csv() const;
};

/// The vocabulary (cfg.lm.vocab_size) must cover both domains.
DomainAdaptReport domain_adaptation_experiment(const TokenSequence& train_a, const TokenSequence& train_b,
                                               const TokenSequence& dev_b, const DomainAdaptConfig& cfg);

// ---------------------------------------------------------------------------

struct NeighborRow {
    std::uint64_t id = 0;
    std::string context;
    std::string target;
    float distance = 0.0f;
    double share = 0.0;
};

/// Nearest training contexts of the given text, with the preceding training
/// tokens of each entry and its normalized kNN weight. `tokens` must be the
/// sequence the datastore was built from.
std::vector<NeighborRow> inspect_neighbors(const FfLmModel& model, const Vocab& vocab, const Datastore& ds,
                                           const TokenSequence& tokens, const IvfPqIndex* index,
                                           const std::string& context_text, std::size_t k, KeyTap tap,
                                           std::size_t snippet_tokens = 12);

std::string render_neighbor_table(const std::vector<NeighborRow>& rows);

}  // namespace knnlm
