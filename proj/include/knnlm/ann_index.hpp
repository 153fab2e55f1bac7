#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnlm/datastore.hpp"

namespace knnlm {

/// Row-major view over a dense float matrix.
struct MatrixView {
    std::span<const float> data;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::span<const float> row(std::size_t i) const { return data.subspan(i * cols, cols); }
};

/// Squared Euclidean distance with a fixed summation order.
float l2_squared(std::span<const float> a, std::span<const float> b);

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are repaired by
/// moving the farthest point of the largest cluster. Stops after `iters`
/// iterations or at an assignment fixpoint. Returns k x cols centroids.
std::vector<float> train_kmeans(const MatrixView& points, std::size_t k, std::size_t iters,
                                std::uint64_t seed);

/// Index of the nearest centroid (ties to the lowest index).
std::size_t nearest_centroid(std::span<const float> centroids, std::size_t dim, std::span<const float> x);

inline constexpr std::size_t kPqCodewords = 256;

/// m sub-quantizers of 256 codewords each over contiguous d/m-wide slices.
struct PqCodebooks {
    std::size_t dim = 0;
    std::size_t m = 0;
    std::vector<float> centroids;  // m x 256 x (dim/m)

    std::size_t dsub() const { return dim / m; }
    std::span<const float> codeword(std::size_t sub, std::size_t c) const {
        return {centroids.data() + (sub * kPqCodewords + c) * dsub(), dsub()};
    }
};

PqCodebooks train_pq(const MatrixView& points, std::size_t m, std::size_t iters, std::uint64_t seed);
void encode_pq(const PqCodebooks& pq, std::span<const float> x, std::span<std::uint8_t> code);
std::vector<std::uint8_t> encode_pq(const PqCodebooks& pq, std::span<const float> x);
std::vector<float> decode_pq(const PqCodebooks& pq, std::span<const std::uint8_t> code);

struct IndexConfig {
    std::size_t n_centroids = 4096;
    std::size_t pq_m = 64;
    std::size_t pq_bits = 8;
    std::size_t train_sample_size = 1'000'000;
    std::size_t kmeans_iters = 25;
    std::uint64_t seed = 1;

    void validate(std::size_t dim) const;

    /// Large-scale reference values shrunk for a datastore of n entries:
    /// n_centroids = max(16, ceil(sqrt(n))) below 1M entries; one code byte per
    /// 16 key dimensions (64 bytes at d = 1024), rounded down to a divisor of d;
    /// a training sample of at most 64 points per centroid (floor 65536).
    static IndexConfig desk_scaled(std::size_t n, std::size_t dim, bool* downscaled = nullptr);
};

enum class Rerank : std::uint8_t { None = 0, ExactSquaredL2 = 1 };
enum class Metric : std::uint8_t { L2 = 0, SquaredL2 = 1 };

std::string_view rerank_name(Rerank r);
Rerank parse_rerank(std::string_view s);
std::string_view metric_name(Metric m);

struct SearchParams {
    std::size_t k = 1024;
    std::size_t nprobe = 32;
    Rerank rerank = Rerank::ExactSquaredL2;
};

struct Neighbor {
    std::uint64_t id = 0;
    TokenId value = 0;
    float distance = 0.0f;
};

/// Up to k neighbors sorted by ascending distance, ties by ascending id.
struct NeighborSet {
    std::vector<Neighbor> entries;
    Metric metric = Metric::SquaredL2;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

struct InvertedList {
    std::vector<std::uint64_t> ids;
    std::vector<std::uint8_t> codes;  // ids.size() x m
};

class IvfPqIndex {
public:
    IvfPqIndex() = default;

    const IndexConfig& config() const { return cfg_; }
    std::size_t dim() const { return dim_; }
    std::size_t total() const { return total_; }
    std::size_t n_lists() const { return lists_.size(); }
    const InvertedList& list(std::size_t i) const { return lists_[i]; }
    std::span<const float> centroids() const { return centroids_; }
    const PqCodebooks& codebooks() const { return pq_; }
    /// Search defaults recorded at build time.
    SearchParams default_params;

    std::uint64_t content_hash() const;

    void save(const std::string& path) const;
    static IvfPqIndex load(const std::string& path);

private:
    friend IvfPqIndex build_index(const Datastore& ds, const IndexConfig& cfg);

    IndexConfig cfg_;
    std::size_t dim_ = 0;
    std::size_t total_ = 0;
    std::vector<float> centroids_;
    PqCodebooks pq_;
    std::vector<InvertedList> lists_;
};

/// Trains the coarse quantizer and PQ codebooks on a uniform sample of keys,
/// then stores every entry's code (raw vector, not residual) in the list of
/// its nearest centroid.
IvfPqIndex build_index(const Datastore& ds, const IndexConfig& cfg);

/// Probes the nprobe nearest lists and scores candidates with PQ lookup
/// tables. Without re-ranking the distances are quantized L2 (square root);
/// with re-ranking every probed candidate is re-scored as exact squared L2
/// against the datastore keys.
NeighborSet search(const IvfPqIndex& index, const Datastore& ds, std::span<const float> query,
                   const SearchParams& params);

/// Full scan with exact distances.
NeighborSet exact_search(const Datastore& ds, std::span<const float> query, std::size_t k, Metric metric);

/// |approx ∩ exact| / |exact|, on entry ids.
double recall_at_k(const NeighborSet& approx, const NeighborSet& exact);

}  // namespace knnlm
