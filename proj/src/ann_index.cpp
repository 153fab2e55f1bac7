#include "knnlm/ann_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace knnlm {

float l2_squared(std::span<const float> a, std::span<const float> b) {
    const std::size_t n = a.size();
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) {
            const float t = a[i + j] - b[i + j];
            acc[j] += t * t;
        }
    for (std::size_t j = 0; i < n; ++i, ++j) {
        const float t = a[i] - b[i];
        acc[j] += t * t;
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

std::size_t nearest_centroid(std::span<const float> centroids, std::size_t dim, std::span<const float> x) {
    const std::size_t k = centroids.size() / dim;
    std::size_t best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        const float d = l2_squared(centroids.subspan(c * dim, dim), x);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

namespace {

constexpr std::uint32_t kUnassigned = std::numeric_limits<std::uint32_t>::max();

void assign_all(const MatrixView& pts, std::span<const float> centroids, std::vector<std::uint32_t>& assign,
                std::vector<float>& dist) {
    const std::size_t d = pts.cols;
    parallel_for(pts.rows, 256, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const std::size_t c = nearest_centroid(centroids, d, pts.row(i));
            assign[i] = static_cast<std::uint32_t>(c);
            dist[i] = l2_squared(centroids.subspan(c * d, d), pts.row(i));
        }
    });
}

}  // namespace

std::vector<float> train_kmeans(const MatrixView& pts, std::size_t k, std::size_t iters, std::uint64_t seed) {
    require(k >= 1, ErrorCode::InvalidArgument, "k-means needs k >= 1");
    require(pts.rows >= k, ErrorCode::InvalidArgument,
            "k-means: k = " + std::to_string(k) + " exceeds point count " + std::to_string(pts.rows));
    const std::size_t n = pts.rows, d = pts.cols;
    Rng rng(seed);
    std::vector<float> cent(k * d);

    // k-means++ seeding
    std::vector<float> d2(n);
    auto set_centroid = [&](std::size_t c, std::size_t i) {
        const auto r = pts.row(i);
        std::copy(r.begin(), r.end(), cent.begin() + c * d);
    };
    set_centroid(0, rng.below(n));
    parallel_for(n, 256, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) d2[i] = l2_squared(pts.row(i), {cent.data(), d});
    });
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (float v : d2) total += v;
        std::size_t pick;
        if (total <= 0.0) {
            pick = rng.below(n);
        } else {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > u && d2[i] > 0.0f) {
                    pick = i;
                    break;
                }
            }
            while (d2[pick] <= 0.0f && pick > 0) --pick;  // guards rounding at the tail
        }
        set_centroid(c, pick);
        const std::span<const float> nc(cent.data() + c * d, d);
        parallel_for(n, 256, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) d2[i] = std::min(d2[i], l2_squared(pts.row(i), nc));
        });
    }

    std::vector<std::uint32_t> assign(n, kUnassigned), next(n);
    std::vector<float> dist(n);
    std::vector<double> sums(k * d);
    std::vector<std::size_t> counts(k);
    for (std::size_t it = 0; it < iters; ++it) {
        assign_all(pts, cent, next, dist);
        if (next == assign) break;
        assign.swap(next);

        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto r = pts.row(i);
            double* s = sums.data() + assign[i] * d;
            for (std::size_t j = 0; j < d; ++j) s[j] += r[j];
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            const std::size_t largest =
                static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i)
                if (assign[i] == largest && (far == n || dist[i] > dist[far])) far = i;
            const auto r = pts.row(far);
            double* sl = sums.data() + largest * d;
            double* sc = sums.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) {
                sl[j] -= r[j];
                sc[j] = r[j];
            }
            --counts[largest];
            counts[c] = 1;
            assign[far] = static_cast<std::uint32_t>(c);
            dist[far] = 0.0f;
        }
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t j = 0; j < d; ++j)
                cent[c * d + j] = static_cast<float>(sums[c * d + j] / static_cast<double>(counts[c]));
    }
    return cent;
}

// ---------------------------------------------------------------------------

PqCodebooks train_pq(const MatrixView& pts, std::size_t m, std::size_t iters, std::uint64_t seed) {
    require(m >= 1 && pts.cols % m == 0, ErrorCode::InvalidArgument,
            "PQ: dimension " + std::to_string(pts.cols) + " not divisible by m = " + std::to_string(m));
    require(pts.rows >= kPqCodewords, ErrorCode::InvalidArgument,
            "PQ training needs at least 256 points, got " + std::to_string(pts.rows));
    PqCodebooks pq;
    pq.dim = pts.cols;
    pq.m = m;
    const std::size_t ds = pts.cols / m;
    pq.centroids.resize(m * kPqCodewords * ds);
    std::vector<float> slice(pts.rows * ds);
    for (std::size_t sub = 0; sub < m; ++sub) {
        for (std::size_t i = 0; i < pts.rows; ++i) {
            const auto r = pts.row(i).subspan(sub * ds, ds);
            std::copy(r.begin(), r.end(), slice.begin() + i * ds);
        }
        const auto cb = train_kmeans({slice, pts.rows, ds}, kPqCodewords, iters, derive_seed(seed, sub));
        std::copy(cb.begin(), cb.end(), pq.centroids.begin() + sub * kPqCodewords * ds);
    }
    return pq;
}

void encode_pq(const PqCodebooks& pq, std::span<const float> x, std::span<std::uint8_t> code) {
    require(x.size() == pq.dim && code.size() == pq.m, ErrorCode::DimensionMismatch, "encode_pq: size mismatch");
    const std::size_t ds = pq.dsub();
    for (std::size_t sub = 0; sub < pq.m; ++sub) {
        const std::span<const float> cb(pq.centroids.data() + sub * kPqCodewords * ds, kPqCodewords * ds);
        code[sub] = static_cast<std::uint8_t>(nearest_centroid(cb, ds, x.subspan(sub * ds, ds)));
    }
}

std::vector<std::uint8_t> encode_pq(const PqCodebooks& pq, std::span<const float> x) {
    std::vector<std::uint8_t> code(pq.m);
    encode_pq(pq, x, code);
    return code;
}

std::vector<float> decode_pq(const PqCodebooks& pq, std::span<const std::uint8_t> code) {
    require(code.size() == pq.m, ErrorCode::DimensionMismatch, "decode_pq: code length mismatch");
    std::vector<float> out;
    out.reserve(pq.dim);
    for (std::size_t sub = 0; sub < pq.m; ++sub) {
        const auto cw = pq.codeword(sub, code[sub]);
        out.insert(out.end(), cw.begin(), cw.end());
    }
    return out;
}

// ---------------------------------------------------------------------------

void IndexConfig::validate(std::size_t dim) const {
    require(n_centroids >= 1, ErrorCode::InvalidArgument, "n_centroids must be >= 1");
    require(pq_m >= 1 && dim % pq_m == 0, ErrorCode::InvalidArgument,
            "key dimension " + std::to_string(dim) + " is not divisible by pq_m = " + std::to_string(pq_m));
    require(pq_bits == 8, ErrorCode::InvalidArgument, "only 8-bit PQ codes are supported");
    require(train_sample_size >= n_centroids, ErrorCode::InvalidArgument,
            "train_sample_size must be >= n_centroids");
}

IndexConfig IndexConfig::desk_scaled(std::size_t n, std::size_t dim, bool* downscaled) {
    IndexConfig cfg;
    bool scaled = false;
    if (n < 1'000'000) {
        cfg.n_centroids = std::max<std::size_t>(16, static_cast<std::size_t>(std::ceil(std::sqrt(double(n)))));
        cfg.n_centroids = std::min(cfg.n_centroids, std::max<std::size_t>(n, 1));
        scaled = true;
    }
    // 64-byte codes for 1024-dim keys: one byte per 16 dimensions
    std::size_t m = std::max<std::size_t>(1, dim / 16);
    while (m > 1 && dim % m != 0) --m;
    if (m != cfg.pq_m) scaled = true;
    cfg.pq_m = m;
    // at most 64 training points per centroid (floor 65536), capped at 1M
    const std::size_t sample_cap = std::max<std::size_t>(64 * cfg.n_centroids, 65'536);
    const std::size_t sample = std::min({n, cfg.train_sample_size, sample_cap});
    if (sample != cfg.train_sample_size) scaled = true;
    cfg.train_sample_size = std::max(sample, cfg.n_centroids);
    if (downscaled) *downscaled = scaled;
    return cfg;
}

std::string_view rerank_name(Rerank r) { return r == Rerank::None ? "none" : "exact"; }

Rerank parse_rerank(std::string_view s) {
    if (s == "none") return Rerank::None;
    if (s == "exact") return Rerank::ExactSquaredL2;
    fail(ErrorCode::InvalidArgument, "unknown rerank mode '" + std::string(s) + "' (expected none or exact)");
}

std::string_view metric_name(Metric m) { return m == Metric::L2 ? "l2" : "squared-l2"; }

namespace {

struct Candidate {
    float dist;
    std::uint64_t id;
    bool operator<(const Candidate& o) const { return dist < o.dist || (dist == o.dist && id < o.id); }
};

void keep_top(std::vector<Candidate>& c, std::size_t k) {
    if (c.size() > k) {
        std::nth_element(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end());
        c.resize(k);
    }
    std::sort(c.begin(), c.end());
}

NeighborSet finish(std::vector<Candidate>& c, std::size_t k, const Datastore& ds, bool take_sqrt, Metric metric) {
    keep_top(c, k);
    NeighborSet out;
    out.metric = metric;
    out.entries.reserve(c.size());
    for (const auto& x : c)
        out.entries.push_back({x.id, ds.value(x.id), take_sqrt ? std::sqrt(x.dist) : x.dist});
    return out;
}

}  // namespace

IvfPqIndex build_index(const Datastore& ds, const IndexConfig& cfg) {
    require(!ds.empty(), ErrorCode::EmptyInput, "cannot index an empty datastore");
    cfg.validate(ds.dim());
    const std::size_t N = ds.size(), d = ds.dim();
    const std::size_t s = std::min(cfg.train_sample_size, N);
    require(s >= cfg.n_centroids, ErrorCode::InvalidArgument,
            "datastore has " + std::to_string(N) + " entries, fewer than n_centroids = " +
                std::to_string(cfg.n_centroids));

    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, 1));
    for (std::size_t i = 0; i < s; ++i) std::swap(idx[i], idx[i + rng.below(N - i)]);
    idx.resize(s);
    std::sort(idx.begin(), idx.end());
    std::vector<float> sample(s * d);
    for (std::size_t r = 0; r < s; ++r) {
        const auto k = ds.key(idx[r]);
        std::copy(k.begin(), k.end(), sample.begin() + r * d);
    }
    const MatrixView sample_view{sample, s, d};

    IvfPqIndex index;
    index.cfg_ = cfg;
    index.dim_ = d;
    index.total_ = N;
    index.centroids_ = train_kmeans(sample_view, cfg.n_centroids, cfg.kmeans_iters, derive_seed(cfg.seed, 2));
    index.pq_ = train_pq(sample_view, cfg.pq_m, cfg.kmeans_iters, derive_seed(cfg.seed, 3));

    std::vector<std::uint32_t> list_of(N);
    std::vector<std::uint8_t> codes(N * cfg.pq_m);
    parallel_for(N, 256, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            list_of[i] = static_cast<std::uint32_t>(nearest_centroid(index.centroids_, d, ds.key(i)));
            encode_pq(index.pq_, ds.key(i), {codes.data() + i * cfg.pq_m, cfg.pq_m});
        }
    });
    index.lists_.resize(cfg.n_centroids);
    for (std::size_t i = 0; i < N; ++i) {
        auto& l = index.lists_[list_of[i]];
        l.ids.push_back(i);
        l.codes.insert(l.codes.end(), codes.begin() + static_cast<std::ptrdiff_t>(i * cfg.pq_m),
                       codes.begin() + static_cast<std::ptrdiff_t>((i + 1) * cfg.pq_m));
    }
    index.default_params.nprobe = std::min(index.default_params.nprobe, cfg.n_centroids);
    return index;
}

NeighborSet search(const IvfPqIndex& index, const Datastore& ds, std::span<const float> query,
                   const SearchParams& params) {
    require(params.k >= 1, ErrorCode::InvalidArgument, "search: k must be >= 1");
    require(query.size() == index.dim() && ds.dim() == index.dim(), ErrorCode::DimensionMismatch,
            "search: query/index/datastore dimensions differ");
    require(ds.size() == index.total(), ErrorCode::DimensionMismatch,
            "search: index was built over a datastore of a different size");
    const std::size_t d = index.dim(), L = index.n_lists();
    const std::size_t nprobe = std::clamp<std::size_t>(params.nprobe, 1, L);

    std::vector<Candidate> coarse(L);
    for (std::size_t c = 0; c < L; ++c)
        coarse[c] = {l2_squared(index.centroids().subspan(c * d, d), query), c};
    keep_top(coarse, nprobe);

    const PqCodebooks& pq = index.codebooks();
    const std::size_t m = pq.m, dsub = pq.dsub();
    std::vector<float> lut(m * kPqCodewords);
    for (std::size_t sub = 0; sub < m; ++sub)
        for (std::size_t c = 0; c < kPqCodewords; ++c)
            lut[sub * kPqCodewords + c] = l2_squared(pq.codeword(sub, c), query.subspan(sub * dsub, dsub));

    std::vector<Candidate> cand;
    for (const auto& probe : coarse) {
        const InvertedList& list = index.list(probe.id);
        const std::size_t len = list.ids.size();
        for (std::size_t r = 0; r < len; ++r) {
            const std::uint8_t* code = list.codes.data() + r * m;
            float s = 0.0f;
            for (std::size_t sub = 0; sub < m; ++sub) s += lut[sub * kPqCodewords + code[sub]];
            cand.push_back({s, list.ids[r]});
        }
    }
    if (params.rerank == Rerank::ExactSquaredL2) {
        for (auto& c : cand) c.dist = l2_squared(ds.key(c.id), query);
        return finish(cand, params.k, ds, false, Metric::SquaredL2);
    }
    return finish(cand, params.k, ds, true, Metric::L2);
}

NeighborSet exact_search(const Datastore& ds, std::span<const float> query, std::size_t k, Metric metric) {
    require(k >= 1, ErrorCode::InvalidArgument, "exact_search: k must be >= 1");
    require(!ds.empty(), ErrorCode::EmptyInput, "exact_search over an empty datastore");
    require(query.size() == ds.dim(), ErrorCode::DimensionMismatch, "exact_search: query dimension mismatch");
    std::vector<Candidate> cand(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) cand[i] = {l2_squared(ds.key(i), query), i};
    return finish(cand, k, ds, metric == Metric::L2, metric);
}

double recall_at_k(const NeighborSet& approx, const NeighborSet& exact) {
    if (exact.empty()) return 1.0;
    std::unordered_set<std::uint64_t> truth;
    for (const auto& n : exact.entries) truth.insert(n.id);
    std::size_t hit = 0;
    for (const auto& n : approx.entries) hit += truth.count(n.id);
    return static_cast<double>(hit) / static_cast<double>(exact.size());
}

// ---------------------------------------------------------------------------

std::uint64_t IvfPqIndex::content_hash() const {
    Fnv1a h;
    h.update(std::span<const float>(centroids_));
    h.update(std::span<const float>(pq_.centroids));
    for (const auto& l : lists_) {
        h.update(std::span<const std::uint64_t>(l.ids));
        h.update(std::span<const std::uint8_t>(l.codes));
    }
    return h.digest();
}

void IvfPqIndex::save(const std::string& path) const {
    BinaryWriter w(path);
    w.bytes("NLMI", 4);
    w.pod<std::uint32_t>(1);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(dim_));
    w.pod<std::uint64_t>(cfg_.n_centroids);
    w.pod<std::uint64_t>(cfg_.pq_m);
    w.pod<std::uint64_t>(cfg_.pq_bits);
    w.pod<std::uint64_t>(cfg_.train_sample_size);
    w.pod<std::uint64_t>(cfg_.kmeans_iters);
    w.pod<std::uint64_t>(cfg_.seed);
    w.pod<std::uint64_t>(default_params.k);
    w.pod<std::uint64_t>(default_params.nprobe);
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(default_params.rerank));
    w.pod<std::uint64_t>(total_);
    w.array(std::span<const float>(centroids_));
    w.array(std::span<const float>(pq_.centroids));
    for (const auto& l : lists_) {
        w.pod<std::uint64_t>(l.ids.size());
        w.array(std::span<const std::uint64_t>(l.ids));
        w.array(std::span<const std::uint8_t>(l.codes));
    }
    w.close();
}

IvfPqIndex IvfPqIndex::load(const std::string& path) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes.data(), bytes.size(), path);
    r.expect_magic("NLMI");
    require(r.pod<std::uint32_t>() == 1, ErrorCode::Format, path + ": unsupported index version");
    IvfPqIndex idx;
    idx.dim_ = r.pod<std::uint32_t>();
    idx.cfg_.n_centroids = r.pod<std::uint64_t>();
    idx.cfg_.pq_m = r.pod<std::uint64_t>();
    idx.cfg_.pq_bits = r.pod<std::uint64_t>();
    idx.cfg_.train_sample_size = r.pod<std::uint64_t>();
    idx.cfg_.kmeans_iters = r.pod<std::uint64_t>();
    idx.cfg_.seed = r.pod<std::uint64_t>();
    idx.default_params.k = r.pod<std::uint64_t>();
    idx.default_params.nprobe = r.pod<std::uint64_t>();
    const auto rr = r.pod<std::uint8_t>();
    require(rr <= 1, ErrorCode::Format, path + ": bad rerank mode");
    idx.default_params.rerank = static_cast<Rerank>(rr);
    idx.total_ = r.pod<std::uint64_t>();
    idx.cfg_.validate(idx.dim_);
    idx.centroids_ = r.array<float>(idx.cfg_.n_centroids * idx.dim_);
    idx.pq_.dim = idx.dim_;
    idx.pq_.m = idx.cfg_.pq_m;
    idx.pq_.centroids = r.array<float>(idx.cfg_.pq_m * kPqCodewords * (idx.dim_ / idx.cfg_.pq_m));
    idx.lists_.resize(idx.cfg_.n_centroids);
    std::size_t seen = 0;
    for (auto& l : idx.lists_) {
        const auto len = r.pod<std::uint64_t>();
        l.ids = r.array<std::uint64_t>(len);
        l.codes = r.array<std::uint8_t>(len * idx.cfg_.pq_m);
        seen += len;
        for (auto id : l.ids) require(id < idx.total_, ErrorCode::Format, path + ": entry id out of range");
    }
    require(seen == idx.total_, ErrorCode::Format, path + ": inverted lists do not cover all entries");
    require(r.remaining() == 0, ErrorCode::Format, path + ": trailing bytes");
    return idx;
}

}  // namespace knnlm
