#include "knnlm/neural_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace knnlm {

std::string_view tap_name(KeyTap tap) {
    switch (tap) {
        case KeyTap::HiddenPreActivation: return "pre-activation";
        case KeyTap::HiddenPostActivation: return "post-activation";
        case KeyTap::HiddenPostLayerNorm: return "post-layernorm";
        case KeyTap::OutputLogitsInput: return "output-input";
    }
    return "unknown";
}

KeyTap parse_tap(std::string_view name) {
    for (KeyTap t : kAllTaps)
        if (tap_name(t) == name) return t;
    fail(ErrorCode::InvalidArgument,
         "unknown key tap '" + std::string(name) +
             "' (expected pre-activation, post-activation, post-layernorm, output-input)");
}

void LmConfig::validate() const {
    require(context_len >= 1 && embed_dim >= 1 && hidden_dim >= 1 && vocab_size >= 1,
            ErrorCode::InvalidArgument, "model dimensions must be >= 1");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorCode::InvalidArgument,
            "dropout_rate must be in [0, 1)");
    require(batch_size >= 1, ErrorCode::InvalidArgument, "batch_size must be >= 1");
    require(learning_rate > 0.0, ErrorCode::InvalidArgument, "learning_rate must be positive");
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kRowGrain = 16;

template <class Real>
inline void axpy(Real a, const Real* x, Real* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Eight interleaved partial sums in a fixed order, so the compiler can keep
// them in vector lanes without reassociating.
template <class Real>
inline Real dot(const Real* x, const Real* y, std::size_t n) {
    Real acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) acc[j] += x[i + j] * y[i + j];
    for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += x[i] * y[i];
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

/// Activations of a batch of contexts.
template <class Real>
struct Activations {
    std::size_t rows = 0;
    std::vector<Real> x;       // rows x nE
    std::vector<Real> pre;     // rows x d
    std::vector<Real> post;    // rows x d (after dropout when masked)
    std::vector<Real> normed;  // rows x d, zero-mean unit-variance before gain
    std::vector<Real> ln_out;  // rows x d
    std::vector<Real> rstd;    // rows
    std::vector<Real> logits;  // rows x V, softmax probabilities after output()
    std::vector<Real> logp;    // rows, log p(target)

    const Real* output_input(std::size_t b, bool ln, std::size_t d) const {
        return (ln ? ln_out.data() : post.data()) + b * d;
    }
};

template <class Real>
void forward_hidden(const BasicFfLm<Real>& m, std::span<const TokenId> contexts,
                    std::span<const Real> mask, Activations<Real>& a) {
    const auto& cfg = m.config();
    const std::size_t n = cfg.context_len, e = cfg.embed_dim, d = cfg.hidden_dim;
    const std::size_t ne = n * e;
    const std::size_t rows = contexts.size() / n;
    a.rows = rows;
    a.x.resize(rows * ne);
    a.pre.resize(rows * d);
    a.post.resize(rows * d);
    if (cfg.use_layer_norm) {
        a.normed.resize(rows * d);
        a.ln_out.resize(rows * d);
        a.rstd.resize(rows);
    }
    for (TokenId id : contexts)
        require(id < cfg.vocab_size, ErrorCode::InvalidArgument,
                "context id " + std::to_string(id) + " >= vocab size " + std::to_string(cfg.vocab_size));

    parallel_for(rows, kRowGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
            Real* x = a.x.data() + b * ne;
            for (std::size_t s = 0; s < n; ++s) {
                const Real* row = m.embedding.data() + static_cast<std::size_t>(contexts[b * n + s]) * e;
                std::copy(row, row + e, x + s * e);
            }
            Real* pre = a.pre.data() + b * d;
            std::copy(m.b_hidden.begin(), m.b_hidden.end(), pre);
            for (std::size_t i = 0; i < ne; ++i) axpy(x[i], m.w_hidden.data() + i * d, pre, d);
            Real* post = a.post.data() + b * d;
            for (std::size_t j = 0; j < d; ++j) post[j] = pre[j] > Real(0) ? pre[j] : Real(0);
            if (!mask.empty())
                for (std::size_t j = 0; j < d; ++j) post[j] *= mask[b * d + j];
            if (cfg.use_layer_norm) {
                Real mean = 0;
                for (std::size_t j = 0; j < d; ++j) mean += post[j];
                mean /= static_cast<Real>(d);
                Real var = 0;
                for (std::size_t j = 0; j < d; ++j) var += (post[j] - mean) * (post[j] - mean);
                var /= static_cast<Real>(d);
                const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
                a.rstd[b] = rstd;
                Real* z = a.normed.data() + b * d;
                Real* y = a.ln_out.data() + b * d;
                for (std::size_t j = 0; j < d; ++j) {
                    z[j] = (post[j] - mean) * rstd;
                    y[j] = z[j] * m.ln_gain[j] + m.ln_bias[j];
                }
            }
        }
    });
}

/// Softmax probabilities in a.logits and log p(target) in a.logp.
template <class Real>
void forward_output(const BasicFfLm<Real>& m, std::span<const TokenId> targets, Activations<Real>& a) {
    const auto& cfg = m.config();
    const std::size_t d = cfg.hidden_dim, V = cfg.vocab_size;
    a.logits.resize(a.rows * V);
    a.logp.resize(a.rows);
    parallel_for(a.rows, kRowGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
            const Real* u = a.output_input(b, cfg.use_layer_norm, d);
            Real* z = a.logits.data() + b * V;
            std::copy(m.b_out.begin(), m.b_out.end(), z);
            for (std::size_t j = 0; j < d; ++j) axpy(u[j], m.w_out.data() + j * V, z, V);
            const Real mx = *std::max_element(z, z + V);
            const Real target_logit = targets.empty() ? Real(0) : z[targets[b]];
            Real sum = 0;
            for (std::size_t v = 0; v < V; ++v) {
                z[v] = std::exp(z[v] - mx);
                sum += z[v];
            }
            const Real inv = Real(1) / sum;
            for (std::size_t v = 0; v < V; ++v) z[v] *= inv;
            if (!targets.empty()) a.logp[b] = target_logit - mx - std::log(sum);
        }
    });
}

template <class Real>
const Real* tap_row(const Activations<Real>& a, KeyTap tap, bool ln, std::size_t b, std::size_t d) {
    switch (tap) {
        case KeyTap::HiddenPreActivation: return a.pre.data() + b * d;
        case KeyTap::HiddenPostActivation: return a.post.data() + b * d;
        case KeyTap::HiddenPostLayerNorm: return a.ln_out.data() + b * d;
        case KeyTap::OutputLogitsInput: return a.output_input(b, ln, d);
    }
    return nullptr;
}

template <class Real>
void uniform_fill(std::vector<Real>& v, double bound, Rng& rng) {
    for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
}

constexpr std::uint32_t kModelFileVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------

template <class Real>
BasicFfLm<Real>::BasicFfLm(const LmConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t n = cfg.context_len, e = cfg.embed_dim, d = cfg.hidden_dim, V = cfg.vocab_size;
    embedding.resize(V * e);
    w_hidden.resize(n * e * d);
    b_hidden.assign(d, Real(0));
    if (cfg.use_layer_norm) {
        ln_gain.assign(d, Real(1));
        ln_bias.assign(d, Real(0));
    }
    w_out.resize(d * V);
    b_out.assign(V, Real(0));
    // Scaled uniform, +-1/sqrt(fan_in). An embedding row is treated as having
    // fan-in equal to its width.
    Rng rng(derive_seed(cfg.seed, 0x1417));
    uniform_fill(embedding, 1.0 / std::sqrt(static_cast<double>(e)), rng);
    uniform_fill(w_hidden, 1.0 / std::sqrt(static_cast<double>(n * e)), rng);
    uniform_fill(w_out, 1.0 / std::sqrt(static_cast<double>(d)), rng);
}

template <class Real>
void BasicFfLm<Real>::check_tap(KeyTap tap) const {
    require(tap != KeyTap::HiddenPostLayerNorm || cfg_.use_layer_norm, ErrorCode::InvalidArgument,
            "post-layernorm tap requested but the model has no layer norm");
}

template <class Real>
typename BasicFfLm<Real>::Forward BasicFfLm<Real>::forward(std::span<const TokenId> context,
                                                           bool train_mode, Rng* rng) const {
    require(context.size() == cfg_.context_len, ErrorCode::InvalidArgument,
            "context length " + std::to_string(context.size()) + " != model context_len " +
                std::to_string(cfg_.context_len));
    const std::size_t d = cfg_.hidden_dim;
    std::vector<Real> mask;
    if (train_mode && rng && cfg_.dropout_rate > 0.0) {
        mask.resize(d);
        const Real keep = static_cast<Real>(1.0 / (1.0 - cfg_.dropout_rate));
        for (auto& x : mask) x = rng->uniform() < cfg_.dropout_rate ? Real(0) : keep;
    }
    Activations<Real> a;
    forward_hidden(*this, context, std::span<const Real>(mask), a);
    forward_output(*this, {}, a);
    Forward f;
    f.taps[0].assign(a.pre.begin(), a.pre.end());
    f.taps[1].assign(a.post.begin(), a.post.end());
    if (cfg_.use_layer_norm) f.taps[2].assign(a.ln_out.begin(), a.ln_out.end());
    const Real* u = a.output_input(0, cfg_.use_layer_norm, d);
    f.taps[3].assign(u, u + d);
    f.probs = std::move(a.logits);
    return f;
}

template <class Real>
std::vector<Real> BasicFfLm<Real>::extract_key(std::span<const TokenId> context, KeyTap tap) const {
    check_tap(tap);
    require(context.size() == cfg_.context_len, ErrorCode::InvalidArgument, "context length mismatch");
    std::vector<Real> out(cfg_.hidden_dim);
    extract_keys(context, tap, out);
    return out;
}

template <class Real>
void BasicFfLm<Real>::extract_keys(std::span<const TokenId> contexts, KeyTap tap,
                                   std::span<Real> out) const {
    check_tap(tap);
    const std::size_t n = cfg_.context_len, d = cfg_.hidden_dim;
    require(contexts.size() % n == 0 && out.size() == contexts.size() / n * d,
            ErrorCode::DimensionMismatch, "extract_keys: buffer sizes do not match");
    constexpr std::size_t kChunk = 1024;
    const std::size_t rows = contexts.size() / n;
    Activations<Real> a;
    for (std::size_t lo = 0; lo < rows; lo += kChunk) {
        const std::size_t hi = std::min(rows, lo + kChunk);
        forward_hidden(*this, contexts.subspan(lo * n, (hi - lo) * n), {}, a);
        for (std::size_t b = 0; b < hi - lo; ++b) {
            const Real* r = tap_row(a, tap, cfg_.use_layer_norm, b, d);
            std::copy(r, r + d, out.data() + (lo + b) * d);
        }
    }
}

template <class Real>
void BasicFfLm<Real>::score(std::span<const TokenId> contexts, std::span<const TokenId> targets,
                            KeyTap tap, std::span<Real> keys, std::span<Real> logp) const {
    if (!keys.empty()) check_tap(tap);
    const std::size_t n = cfg_.context_len, d = cfg_.hidden_dim;
    const std::size_t rows = targets.size();
    require(contexts.size() == rows * n && logp.size() == rows && (keys.empty() || keys.size() == rows * d),
            ErrorCode::DimensionMismatch, "score: buffer sizes do not match");
    for (TokenId t : targets)
        require(t < cfg_.vocab_size, ErrorCode::InvalidArgument, "target id out of range");
    constexpr std::size_t kChunk = 256;
    Activations<Real> a;
    for (std::size_t lo = 0; lo < rows; lo += kChunk) {
        const std::size_t hi = std::min(rows, lo + kChunk);
        forward_hidden(*this, contexts.subspan(lo * n, (hi - lo) * n), {}, a);
        forward_output(*this, targets.subspan(lo, hi - lo), a);
        for (std::size_t b = 0; b < hi - lo; ++b) {
            logp[lo + b] = a.logp[b];
            if (!keys.empty()) {
                const Real* r = tap_row(a, tap, cfg_.use_layer_norm, b, d);
                std::copy(r, r + d, keys.data() + (lo + b) * d);
            }
        }
    }
}

template <class Real>
std::vector<std::span<Real>> BasicFfLm<Real>::tensors() {
    std::vector<std::span<Real>> t = {embedding, w_hidden, b_hidden};
    if (cfg_.use_layer_norm) {
        t.emplace_back(ln_gain);
        t.emplace_back(ln_bias);
    }
    t.emplace_back(w_out);
    t.emplace_back(b_out);
    return t;
}

template <class Real>
std::vector<std::span<const Real>> BasicFfLm<Real>::tensors() const {
    std::vector<std::span<const Real>> t = {embedding, w_hidden, b_hidden};
    if (cfg_.use_layer_norm) {
        t.emplace_back(ln_gain);
        t.emplace_back(ln_bias);
    }
    t.emplace_back(w_out);
    t.emplace_back(b_out);
    return t;
}

template <class Real>
std::size_t BasicFfLm<Real>::parameter_count() const {
    std::size_t n = 0;
    for (auto t : tensors()) n += t.size();
    return n;
}

template <class Real>
std::uint64_t BasicFfLm<Real>::hash() const {
    Fnv1a h;
    for (auto t : tensors())
        for (Real x : t) {
            const float f = static_cast<float>(x);
            h.update(&f, sizeof f);
        }
    return h.digest();
}

template <class Real>
bool BasicFfLm<Real>::all_finite() const {
    for (auto t : tensors())
        for (Real x : t)
            if (!std::isfinite(x)) return false;
    return true;
}

template <class Real>
template <class Other>
BasicFfLm<Other> BasicFfLm<Real>::cast() const {
    BasicFfLm<Other> out(cfg_);
    auto dst = out.tensors();
    auto src = tensors();
    for (std::size_t i = 0; i < src.size(); ++i)
        std::transform(src[i].begin(), src[i].end(), dst[i].begin(),
                       [](Real x) { return static_cast<Other>(x); });
    return out;
}

template <class Real>
void BasicFfLm<Real>::save(const std::string& path) const {
    BinaryWriter w(path);
    w.bytes("NLMM", 4);
    w.pod<std::uint32_t>(kModelFileVersion);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg_.context_len));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg_.embed_dim));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg_.hidden_dim));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg_.vocab_size));
    w.pod<double>(cfg_.dropout_rate);
    w.pod<std::uint8_t>(cfg_.use_layer_norm ? 1 : 0);
    w.pod<std::uint64_t>(cfg_.seed);
    w.pod<double>(cfg_.learning_rate);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg_.batch_size));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg_.epochs));
    w.pod<double>(cfg_.beta1);
    w.pod<double>(cfg_.beta2);
    w.pod<double>(cfg_.adam_eps);
    for (auto t : tensors())
        for (Real x : t) w.pod<float>(static_cast<float>(x));
    w.close();
}

template <class Real>
BasicFfLm<Real> BasicFfLm<Real>::load(const std::string& path) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes.data(), bytes.size(), path);
    r.expect_magic("NLMM");
    const auto version = r.pod<std::uint32_t>();
    require(version == kModelFileVersion, ErrorCode::Format,
            path + ": unsupported model file version " + std::to_string(version));
    LmConfig cfg;
    cfg.context_len = r.pod<std::uint32_t>();
    cfg.embed_dim = r.pod<std::uint32_t>();
    cfg.hidden_dim = r.pod<std::uint32_t>();
    cfg.vocab_size = r.pod<std::uint32_t>();
    cfg.dropout_rate = r.pod<double>();
    cfg.use_layer_norm = r.pod<std::uint8_t>() != 0;
    cfg.seed = r.pod<std::uint64_t>();
    cfg.learning_rate = r.pod<double>();
    cfg.batch_size = r.pod<std::uint32_t>();
    cfg.epochs = r.pod<std::uint32_t>();
    cfg.beta1 = r.pod<double>();
    cfg.beta2 = r.pod<double>();
    cfg.adam_eps = r.pod<double>();
    BasicFfLm m(cfg);
    for (auto t : m.tensors()) {
        const auto vals = r.array<float>(t.size());
        std::transform(vals.begin(), vals.end(), t.begin(), [](float f) { return static_cast<Real>(f); });
    }
    require(r.remaining() == 0, ErrorCode::Format, path + ": trailing bytes");
    require(m.all_finite(), ErrorCode::Format, path + ": non-finite parameter");
    return m;
}

// ---------------------------------------------------------------------------

template <class Real>
double loss_and_gradient(const BasicFfLm<Real>& m, std::span<const TokenId> contexts,
                         std::span<const TokenId> targets, std::span<const Real> keep_mask,
                         std::vector<std::vector<Real>>* grads) {
    const auto& cfg = m.config();
    const std::size_t n = cfg.context_len, e = cfg.embed_dim, d = cfg.hidden_dim, V = cfg.vocab_size;
    const std::size_t ne = n * e;
    const std::size_t B = targets.size();
    require(contexts.size() == B * n && B > 0, ErrorCode::DimensionMismatch,
            "loss_and_gradient: batch shape mismatch");
    Activations<Real> a;
    forward_hidden(m, contexts, keep_mask, a);
    forward_output(m, targets, a);

    std::vector<double> nll(B);
    for (std::size_t b = 0; b < B; ++b) nll[b] = -static_cast<double>(a.logp[b]);
    const double loss = pairwise_sum(nll) / static_cast<double>(B);
    if (!grads) return loss;

    const bool ln = cfg.use_layer_norm;
    auto tensors = m.tensors();
    grads->resize(tensors.size());
    for (std::size_t t = 0; t < tensors.size(); ++t) (*grads)[t].assign(tensors[t].size(), Real(0));
    std::size_t ti = 0;
    auto& g_emb = (*grads)[ti++];
    auto& g_wh = (*grads)[ti++];
    auto& g_bh = (*grads)[ti++];
    std::vector<Real>* g_gain = ln ? &(*grads)[ti++] : nullptr;
    std::vector<Real>* g_bias = ln ? &(*grads)[ti++] : nullptr;
    auto& g_wo = (*grads)[ti++];
    auto& g_bo = (*grads)[ti++];

    // d loss / d logits, stored over the probabilities
    std::vector<Real>& dlog = a.logits;
    const Real inv_b = Real(1) / static_cast<Real>(B);
    for (std::size_t b = 0; b < B; ++b) {
        Real* row = dlog.data() + b * V;
        row[targets[b]] -= Real(1);
        for (std::size_t v = 0; v < V; ++v) row[v] *= inv_b;
    }

    parallel_for(d, 4, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
            Real* gw = g_wo.data() + j * V;
            for (std::size_t b = 0; b < B; ++b)
                axpy(a.output_input(b, ln, d)[j], dlog.data() + b * V, gw, V);
        }
    });
    for (std::size_t b = 0; b < B; ++b) axpy(Real(1), dlog.data() + b * V, g_bo.data(), V);

    // d loss / d output input
    std::vector<Real> du(B * d);
    parallel_for(B, kRowGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b)
            for (std::size_t j = 0; j < d; ++j)
                du[b * d + j] = dot(dlog.data() + b * V, m.w_out.data() + j * V, V);
    });

    std::vector<Real> dpre(B * d);
    if (ln) {
        for (std::size_t b = 0; b < B; ++b) {
            const Real* z = a.normed.data() + b * d;
            const Real* dy = du.data() + b * d;
            for (std::size_t j = 0; j < d; ++j) {
                (*g_gain)[j] += dy[j] * z[j];
                (*g_bias)[j] += dy[j];
            }
        }
    }
    parallel_for(B, kRowGrain, [&](std::size_t lo, std::size_t hi) {
        std::vector<Real> dz(d);
        for (std::size_t b = lo; b < hi; ++b) {
            Real* dp = dpre.data() + b * d;
            const Real* dy = du.data() + b * d;
            if (ln) {
                const Real* z = a.normed.data() + b * d;
                Real mean_dz = 0, mean_dzz = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    dz[j] = dy[j] * m.ln_gain[j];
                    mean_dz += dz[j];
                    mean_dzz += dz[j] * z[j];
                }
                mean_dz /= static_cast<Real>(d);
                mean_dzz /= static_cast<Real>(d);
                for (std::size_t j = 0; j < d; ++j) dp[j] = a.rstd[b] * (dz[j] - mean_dz - z[j] * mean_dzz);
            } else {
                std::copy(dy, dy + d, dp);
            }
            const Real* pre = a.pre.data() + b * d;
            for (std::size_t j = 0; j < d; ++j) {
                if (!keep_mask.empty()) dp[j] *= keep_mask[b * d + j];
                if (!(pre[j] > Real(0))) dp[j] = Real(0);
            }
        }
    });

    parallel_for(ne, 8, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            Real* gw = g_wh.data() + i * d;
            for (std::size_t b = 0; b < B; ++b) axpy(a.x[b * ne + i], dpre.data() + b * d, gw, d);
        }
    });
    for (std::size_t b = 0; b < B; ++b) axpy(Real(1), dpre.data() + b * d, g_bh.data(), d);

    std::vector<Real> dx(B * ne);
    parallel_for(B, kRowGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b)
            for (std::size_t i = 0; i < ne; ++i)
                dx[b * ne + i] = dot(dpre.data() + b * d, m.w_hidden.data() + i * d, d);
    });
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < n; ++s)
            axpy(Real(1), dx.data() + b * ne + s * e,
                 g_emb.data() + static_cast<std::size_t>(contexts[b * n + s]) * e, e);
    return loss;
}

// ---------------------------------------------------------------------------

TrainResult train(FfLmModel& model, const TokenSequence& seq) {
    const LmConfig& cfg = model.config();
    require(!seq.empty(), ErrorCode::EmptyInput, "cannot train on an empty sequence");
    seq.validate(cfg.vocab_size);
    const WindowSet windows(seq, cfg.window());
    const std::size_t N = windows.size(), n = cfg.context_len, d = cfg.hidden_dim;

    auto params = model.tensors();
    std::vector<std::vector<float>> m1(params.size()), m2(params.size());
    for (std::size_t t = 0; t < params.size(); ++t) {
        m1[t].assign(params[t].size(), 0.0f);
        m2[t].assign(params[t].size(), 0.0f);
    }
    Rng rng(derive_seed(cfg.seed, 0x7a11));
    std::vector<std::size_t> order(N);
    std::vector<TokenId> ctx, tgt;
    std::vector<float> mask;
    std::vector<std::vector<float>> grads;
    std::uint64_t step = 0;
    const float keep = static_cast<float>(1.0 / (1.0 - cfg.dropout_rate));

    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < N; ++i) order[i] = i;
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t lo = 0; lo < N; lo += cfg.batch_size) {
            const std::size_t hi = std::min(N, lo + cfg.batch_size);
            const std::size_t B = hi - lo;
            ctx.resize(B * n);
            tgt.resize(B);
            for (std::size_t b = 0; b < B; ++b) {
                const auto w = windows.context(order[lo + b]);
                std::copy(w.begin(), w.end(), ctx.begin() + b * n);
                tgt[b] = windows.target(order[lo + b]);
            }
            mask.clear();
            if (cfg.dropout_rate > 0.0) {
                mask.resize(B * d);
                for (auto& x : mask) x = rng.uniform() < cfg.dropout_rate ? 0.0f : keep;
            }
            const double loss = loss_and_gradient<float>(model, ctx, tgt, mask, &grads);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "non-finite training loss at epoch " << epoch << ", batch " << lo / cfg.batch_size
                    << " (learning rate " << cfg.learning_rate << ")";
                fail(ErrorCode::Diverged, msg.str());
            }
            epoch_loss += loss * static_cast<double>(B);

            ++step;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            const float lr_t = static_cast<float>(cfg.learning_rate * std::sqrt(bc2) / bc1);
            const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
            const float eps = static_cast<float>(cfg.adam_eps);
            for (std::size_t t = 0; t < params.size(); ++t) {
                float* p = params[t].data();
                float* mm = m1[t].data();
                float* vv = m2[t].data();
                const float* g = grads[t].data();
                for (std::size_t i = 0; i < params[t].size(); ++i) {
                    mm[i] = b1 * mm[i] + (1.0f - b1) * g[i];
                    vv[i] = b2 * vv[i] + (1.0f - b2) * g[i] * g[i];
                    p[i] -= lr_t * mm[i] / (std::sqrt(vv[i]) + eps);
                }
            }
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(N));
    }
    require(model.all_finite(), ErrorCode::Diverged, "training produced non-finite parameters");
    return result;
}

template <class Real>
std::vector<Real> window_logprobs(const BasicFfLm<Real>& model, const TokenSequence& seq) {
    const WindowSet windows(seq, model.config().window());
    const std::size_t N = windows.size(), n = model.config().context_len;
    std::vector<Real> logp(N);
    if (N == 0) return logp;
    model.score(std::span<const TokenId>(windows.context(0).data(), N * n), windows.targets(),
                KeyTap::HiddenPreActivation, {}, logp);
    return logp;
}

template <class Real>
double mean_nll(const BasicFfLm<Real>& model, const TokenSequence& seq) {
    const auto logp = window_logprobs(model, seq);
    require(!logp.empty(), ErrorCode::EmptyInput, "mean_nll of an empty sequence");
    std::vector<double> nll(logp.size());
    for (std::size_t i = 0; i < logp.size(); ++i) nll[i] = -static_cast<double>(logp[i]);
    return pairwise_sum(nll) / static_cast<double>(nll.size());
}

GradCheckResult grad_check(const FfLmModelF64& model, std::span<const TokenId> contexts,
                           std::span<const TokenId> targets, double epsilon, std::size_t params,
                           std::uint64_t seed) {
    require(epsilon >= 1e-6 && epsilon <= 1e-4, ErrorCode::InvalidArgument,
            "grad_check epsilon must be in [1e-6, 1e-4]");
    std::vector<std::vector<double>> grads;
    loss_and_gradient<double>(model, contexts, targets, {}, &grads);

    FfLmModelF64 probe = model;
    auto tensors = probe.tensors();
    const std::size_t total = probe.parameter_count();
    Rng rng(seed);
    GradCheckResult res;
    for (std::size_t k = 0; k < params; ++k) {
        std::size_t flat = rng.below(total);
        std::size_t t = 0;
        while (flat >= tensors[t].size()) flat -= tensors[t++].size();
        double& p = tensors[t][flat];
        const double saved = p;
        p = saved + epsilon;
        const double up = loss_and_gradient<double>(probe, contexts, targets, {}, nullptr);
        p = saved - epsilon;
        const double down = loss_and_gradient<double>(probe, contexts, targets, {}, nullptr);
        p = saved;
        const double fd = (up - down) / (2.0 * epsilon);
        const double ga = grads[t][flat];
        const double rel = std::abs(ga - fd) / std::max(std::abs(ga) + std::abs(fd), 1e-8);
        res.max_rel_error = std::max(res.max_rel_error, rel);
        ++res.checked;
    }
    return res;
}

template class BasicFfLm<float>;
template class BasicFfLm<double>;
template BasicFfLm<double> BasicFfLm<float>::cast<double>() const;
template BasicFfLm<float> BasicFfLm<double>::cast<float>() const;
template double loss_and_gradient<float>(const BasicFfLm<float>&, std::span<const TokenId>,
                                         std::span<const TokenId>, std::span<const float>,
                                         std::vector<std::vector<float>>*);
template double loss_and_gradient<double>(const BasicFfLm<double>&, std::span<const TokenId>,
                                          std::span<const TokenId>, std::span<const double>,
                                          std::vector<std::vector<double>>*);
template double mean_nll<float>(const BasicFfLm<float>&, const TokenSequence&);
template double mean_nll<double>(const BasicFfLm<double>&, const TokenSequence&);
template std::vector<float> window_logprobs<float>(const BasicFfLm<float>&, const TokenSequence&);
template std::vector<double> window_logprobs<double>(const BasicFfLm<double>&, const TokenSequence&);

}  // namespace knnlm
