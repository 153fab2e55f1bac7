#include "knnlm/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <json.hpp>

namespace knnlm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) { return fmt::format("{:.10g}", v); }

std::vector<double> exp_of(std::span<const float> logp) {
    std::vector<double> p(logp.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(static_cast<double>(logp[i]));
    return p;
}

}  // namespace

EvalTrace make_trace(const FfLmModel& model, const TokenSequence& seq, KeyTap tap) {
    model.check_tap(tap);
    seq.validate(model.config().vocab_size);
    const WindowSet w(seq, model.config().window());
    EvalTrace t;
    t.dim = model.dim();
    t.keys.resize(w.size() * t.dim);
    t.logp.resize(w.size());
    t.targets.assign(w.targets().begin(), w.targets().end());
    if (w.size())
        model.score({w.context(0).data(), w.size() * w.context_len()}, w.targets(), tap, t.keys, t.logp);
    for (float& lp : t.logp) lp = std::min(lp, 0.0f);
    t.doc_ids.resize(w.size());
    for (std::size_t d = 0; d < seq.doc_count(); ++d)
        for (std::size_t i = seq.doc_begin(d); i < seq.doc_end(d); ++i) t.doc_ids[i] = static_cast<std::uint32_t>(d);
    t.prov = {static_cast<std::uint8_t>(tap), model.hash(), seq.hash()};
    return t;
}

std::vector<double> trace_logp(const EvalTrace& trace) {
    return {trace.logp.begin(), trace.logp.end()};
}

double base_perplexity(const EvalTrace& trace) {
    require(trace.size() > 0, ErrorCode::EmptyInput, "perplexity of an empty trace");
    std::vector<double> nll(trace.size());
    for (std::size_t i = 0; i < nll.size(); ++i) nll[i] = -static_cast<double>(trace.logp[i]);
    return std::exp(pairwise_sum(nll) / static_cast<double>(nll.size()));
}

KnnProbs knn_target_probs(const EvalTrace& trace, const Datastore& ds, const IvfPqIndex* index,
                          const SearchParams& params, std::vector<std::size_t> ks) {
    require(!ds.empty(), ErrorCode::EmptyInput, "retrieval from an empty datastore");
    require(trace.dim == ds.dim(), ErrorCode::DimensionMismatch,
            fmt::format("trace key dimension {} does not match datastore dimension {}", trace.dim, ds.dim()));
    require(!ks.empty(), ErrorCode::InvalidArgument, "no k values requested");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    require(ks.front() >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
    SearchParams sp = params;
    sp.k = ks.back();

    const std::size_t n = trace.size(), nk = ks.size();
    KnnProbs out;
    out.ks = ks;
    out.p.assign(nk, std::vector<double>(n, 0.0));
    out.metric = index && sp.rerank == Rerank::None ? Metric::L2 : Metric::SquaredL2;
    std::vector<std::uint8_t> hit(nk * n, 0);
    parallel_for(n, 32, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const NeighborSet nb = index ? search(*index, ds, trace.key(i), sp)
                                         : exact_search(ds, trace.key(i), sp.k, Metric::SquaredL2);
            if (nb.empty()) continue;
            const TokenId y = trace.targets[i];
            for (std::size_t j = 0; j < nk; ++j) {
                const std::size_t len = std::min(ks[j], nb.size());
                const std::span<const Neighbor> prefix(nb.entries.data(), len);
                out.p[j][i] = knn_target_prob(prefix, y);
                hit[j * n + i] = std::any_of(prefix.begin(), prefix.end(),
                                             [y](const Neighbor& x) { return x.value == y; });
            }
        }
    });
    out.misses.assign(nk, 0);
    for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t i = 0; i < n; ++i) out.misses[j] += hit[j * n + i] ? 0 : 1;
    return out;
}

CacheProbs cache_target_probs(const EvalTrace& trace, const CacheConfig& cfg) {
    cfg.validate();
    const std::size_t n = trace.size(), d = trace.dim;
    CacheProbs out;
    out.p.assign(n, 0.0);
    out.has.assign(n, 0);
    // start of each position's document
    std::vector<std::size_t> doc_start(n);
    for (std::size_t i = 0; i < n; ++i)
        doc_start[i] = (i > 0 && trace.doc_ids[i] == trace.doc_ids[i - 1]) ? doc_start[i - 1] : i;
    parallel_for(n, 64, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const std::size_t b = std::max(doc_start[i], i > cfg.window ? i - cfg.window : 0);
            if (b == i) continue;
            out.p[i] = cache_target_prob({trace.keys.data() + b * d, (i - b) * d},
                                         {trace.targets.data() + b, i - b}, trace.key(i), cfg, trace.targets[i]);
            out.has[i] = 1;
        }
    });
    return out;
}

EvalReport evaluate(const EvalTrace& trace, const Datastore* ds, const IvfPqIndex* index, const EvalOptions& opt) {
    trace.validate();
    require(trace.size() > 0, ErrorCode::EmptyInput, "evaluation trace is empty");
    opt.interp.validate();
    if (opt.cache) opt.cache->validate();
    require(!index || ds, ErrorCode::InvalidArgument, "an index needs its datastore");

    EvalReport r;
    r.tokens = trace.size();
    r.tap = trace.prov.tap == kExternalTap ? "external" : std::string(tap_name(static_cast<KeyTap>(trace.prov.tap)));
    r.lambda_tuned = opt.tune;
    auto t0 = Clock::now();
    r.base = base_perplexity(trace);
    const auto logp = trace_logp(trace);
    r.seconds["base"] = seconds_since(t0);

    std::vector<double> p_knn(trace.size(), 0.0);
    if (ds) {
        r.k = opt.params.k;
        r.nprobe = index ? std::min(opt.params.nprobe, index->n_lists()) : 0;
        r.search = index ? std::string(rerank_name(opt.params.rerank)) : "exact-scan";
        t0 = Clock::now();
        auto kp = knn_target_probs(trace, *ds, index, opt.params, {opt.params.k});
        r.seconds["retrieval"] = seconds_since(t0);
        p_knn = std::move(kp.p[0]);
        r.misses = kp.misses[0];
        t0 = Clock::now();
        if (opt.tune) {
            const auto fit = tune_lambda(logp, p_knn, opt.interp.grid);
            r.lambda = fit.lambda;
            r.knn = fit.perplexity;
        } else {
            require(!(opt.interp.lambda == 1.0 && r.misses > 0), ErrorCode::InvalidArgument,
                    fmt::format("lambda = 1 with {} retrieval misses gives infinite perplexity; use lambda < 1",
                                r.misses));
            r.lambda = opt.interp.lambda;
            r.knn = interpolated_perplexity(logp, p_knn, r.lambda);
        }
        r.seconds["interpolation"] = seconds_since(t0);
    }
    if (opt.cache) {
        t0 = Clock::now();
        const auto cp = cache_target_probs(trace, *opt.cache);
        const std::vector<double> zeros(trace.size(), 0.0);
        const std::vector<double> only_zero{0.0};
        if (opt.tune) {
            const auto fit = tune_joint(logp, zeros, cp.p, cp.has, only_zero, opt.cache->grid);
            r.cache = fit.perplexity;
            r.lambda_cache = fit.lambda_cache;
        } else {
            r.cache = joint_perplexity(logp, zeros, cp.p, cp.has, 0.0, opt.cache->lambda);
            r.lambda_cache = opt.cache->lambda;
        }
        if (ds) {
            if (opt.tune) {
                const auto fit = tune_joint(logp, p_knn, cp.p, cp.has, opt.interp.grid, opt.cache->grid);
                r.knn_cache = fit.perplexity;
                r.joint_lambda = fit.lambda;
                r.joint_lambda_cache = fit.lambda_cache;
            } else {
                const auto [l, lc] = opt.joint.value_or(std::pair{opt.interp.lambda, opt.cache->lambda});
                r.knn_cache = joint_perplexity(logp, p_knn, cp.p, cp.has, l, lc);
                r.joint_lambda = l;
                r.joint_lambda_cache = lc;
            }
        }
        r.seconds["cache"] = seconds_since(t0);
    }
    return r;
}

std::string EvalReport::to_text(bool with_timing) const {
    std::string s = fmt::format("tokens            {}\nbase perplexity   {:.4f}\n", tokens, base);
    if (knn) {
        s += fmt::format("knn perplexity    {:.4f}  (lambda {}{}, k {}, search {}", *knn, num(lambda),
                         lambda_tuned ? " tuned" : "", k, search);
        if (nprobe) s += fmt::format(", nprobe {}", nprobe);
        s += fmt::format(", tap {}, misses {})\n", tap, misses);
    }
    if (cache) s += fmt::format("cache perplexity  {:.4f}  (lambda_c {})\n", *cache, num(*lambda_cache));
    if (knn_cache)
        s += fmt::format("knn+cache         {:.4f}  (lambda {}, lambda_c {})\n", *knn_cache, num(*joint_lambda),
                         num(*joint_lambda_cache));
    if (with_timing)
        for (const auto& [stage, sec] : seconds) s += fmt::format("time {:<15}{:.3f}s\n", stage, sec);
    return s;
}

std::string EvalReport::to_json(bool with_timing) const {
    nlohmann::ordered_json j;
    j["tokens"] = tokens;
    j["perplexity"]["base"] = base;
    if (knn) j["perplexity"]["knn"] = *knn;
    if (cache) j["perplexity"]["cache"] = *cache;
    if (knn_cache) j["perplexity"]["knn+cache"] = *knn_cache;
    if (knn) {
        j["lambda"] = lambda;
        j["k"] = k;
        j["nprobe"] = nprobe;
        j["search"] = search;
        j["retrieval_misses"] = misses;
    }
    j["lambda_tuned"] = lambda_tuned;
    if (lambda_cache) j["lambda_cache"] = *lambda_cache;
    if (joint_lambda) {
        j["joint_lambda"] = *joint_lambda;
        j["joint_lambda_cache"] = *joint_lambda_cache;
    }
    j["tap"] = tap;
    if (with_timing) j["seconds"] = seconds;
    return j.dump(2);
}

// ---------------------------------------------------------------------------

void ExperimentGrid::validate() const {
    static const std::vector<std::string> axes = {"k", "lambda", "datastore_size", "nprobe", "key_tap", "ngram_order"};
    require(std::find(axes.begin(), axes.end(), axis) != axes.end(), ErrorCode::InvalidArgument,
            "unknown sweep axis '" + axis + "'");
    require(!values.empty(), ErrorCode::InvalidArgument, "sweep has no values");
    require(std::is_sorted(values.begin(), values.end()), ErrorCode::InvalidArgument, "sweep values must be sorted");
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string s = "axis,value,lambda,dev_perplexity,misses\n";
    for (const auto& r : rows)
        s += fmt::format("{},{},{},{},{}\n", r.axis, r.value, num(r.lambda), num(r.dev_perplexity), r.misses);
    return s;
}

namespace {

std::size_t as_count(double v, const char* what) {
    require(v >= 1.0 && v == std::floor(v), ErrorCode::InvalidArgument,
            std::string(what) + " values must be positive integers");
    return static_cast<std::size_t>(v);
}

IvfPqIndex desk_index(const Datastore& ds, std::uint64_t seed) {
    auto cfg = IndexConfig::desk_scaled(ds.size(), ds.dim());
    cfg.seed = seed;
    return build_index(ds, cfg);
}

// Exact scan for small stores where PQ training has too few points.
constexpr std::size_t kMinIndexedEntries = 4096;

SweepRow tuned_row(const std::string& axis, std::string value, std::span<const double> logp,
                   std::span<const double> p, std::size_t misses, std::span<const double> grid) {
    const auto fit = tune_lambda(logp, p, grid);
    return {axis, std::move(value), fit.lambda, fit.perplexity, misses};
}

}  // namespace

std::vector<SweepRow> run_sweep(const ExperimentGrid& grid, const SweepInputs& in) {
    grid.validate();
    require(in.dev != nullptr, ErrorCode::InvalidArgument, "sweep needs a dev trace");
    const EvalTrace& dev = *in.dev;
    dev.validate();
    const auto logp = trace_logp(dev);
    std::vector<SweepRow> rows;
    const std::string& axis = grid.axis;

    auto need_ds = [&] { require(in.ds != nullptr, ErrorCode::InvalidArgument, axis + " sweep needs a datastore"); };

    if (axis == "k") {
        need_ds();
        std::vector<std::size_t> ks;
        for (double v : grid.values) ks.push_back(as_count(v, "k"));
        const auto kp = knn_target_probs(dev, *in.ds, in.index, in.params, ks);
        for (std::size_t j = 0; j < kp.ks.size(); ++j)
            rows.push_back(tuned_row(axis, std::to_string(kp.ks[j]), logp, kp.p[j], kp.misses[j], in.lambda_grid));
    } else if (axis == "lambda") {
        need_ds();
        for (double v : grid.values)
            require(v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument, "lambda values must lie in [0, 1]");
        const auto kp = knn_target_probs(dev, *in.ds, in.index, in.params, {in.params.k});
        for (double v : grid.values)
            rows.push_back({axis, num(v), v, interpolated_perplexity(logp, kp.p[0], v), kp.misses[0]});
    } else if (axis == "nprobe") {
        need_ds();
        require(in.index != nullptr, ErrorCode::InvalidArgument, "nprobe sweep needs an index");
        for (double v : grid.values) {
            SearchParams sp = in.params;
            sp.nprobe = as_count(v, "nprobe");
            const auto kp = knn_target_probs(dev, *in.ds, in.index, sp, {sp.k});
            rows.push_back(tuned_row(axis, std::to_string(sp.nprobe), logp, kp.p[0], kp.misses[0], in.lambda_grid));
        }
    } else if (axis == "datastore_size") {
        need_ds();
        for (double f : grid.values) {
            require(f > 0.0 && f <= 1.0, ErrorCode::InvalidArgument, "datastore_size values are fractions in (0, 1]");
            const std::size_t m =
                std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * double(in.ds->size()))));
            const Datastore sub = subsample(*in.ds, m, in.seed);
            std::optional<IvfPqIndex> idx;
            if (in.index_per_size && m >= kMinIndexedEntries) idx = desk_index(sub, in.seed);
            const auto kp = knn_target_probs(dev, sub, idx ? &*idx : nullptr, in.params, {in.params.k});
            rows.push_back(tuned_row(axis, std::to_string(m), logp, kp.p[0], kp.misses[0], in.lambda_grid));
        }
    } else if (axis == "key_tap") {
        require(in.model && in.train && in.dev_tokens, ErrorCode::InvalidArgument,
                "key_tap sweep needs the model, training tokens and dev tokens");
        for (double v : grid.values) {
            require(v >= 0 && v < 4 && v == std::floor(v), ErrorCode::InvalidArgument, "key_tap values are 0..3");
            const auto tap = static_cast<KeyTap>(static_cast<int>(v));
            const Datastore ds = build_datastore(*in.model, *in.train, tap);
            const EvalTrace tr = make_trace(*in.model, *in.dev_tokens, tap);
            std::optional<IvfPqIndex> idx;
            if (in.index_per_size && ds.size() >= kMinIndexedEntries) idx = desk_index(ds, in.seed);
            const auto kp = knn_target_probs(tr, ds, idx ? &*idx : nullptr, in.params, {in.params.k});
            rows.push_back(
                tuned_row(axis, std::string(tap_name(tap)), trace_logp(tr), kp.p[0], kp.misses[0], in.lambda_grid));
        }
    } else if (axis == "ngram_order") {
        require(in.train && in.dev_tokens, ErrorCode::InvalidArgument,
                "ngram_order sweep needs training and dev tokens");
        require(in.dev_tokens->size() == dev.size(), ErrorCode::DimensionMismatch,
                "dev tokens do not match the dev trace");
        const std::size_t V = in.model ? in.model->config().vocab_size
                                       : 1 + *std::max_element(in.train->ids.begin(), in.train->ids.end());
        for (double v : grid.values) {
            const std::size_t order = as_count(v, "ngram_order");
            const NgramModel ng = NgramModel::train(*in.train, order, in.ngram_discount, V);
            const WindowSet w(*in.dev_tokens, {std::max<std::size_t>(order - 1, 1), kBosId});
            std::vector<double> p(w.size());
            for (std::size_t i = 0; i < w.size(); ++i) p[i] = ng.prob(w.context(i), w.target(i));
            rows.push_back(tuned_row(axis, std::to_string(order), logp, p, 0, in.lambda_grid));
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------

std::string MemorizationReport::curves_csv() const {
    std::string s = "epoch,train_loss_dropout,train_loss_no_dropout\n";
    for (std::size_t e = 0; e < std::max(loss_dropout.size(), loss_memorize.size()); ++e)
        s += fmt::format("{},{},{}\n", e + 1, e < loss_dropout.size() ? num(loss_dropout[e]) : "",
                         e < loss_memorize.size() ? num(loss_memorize[e]) : "");
    return s;
}

std::string MemorizationReport::to_text() const {
    return fmt::format(
        "train perplexity (dropout)     {:.4f}\n"
        "train perplexity (no dropout)  {:.4f}\n"
        "dev base LM                    {:.4f}\n"
        "dev memorizing LM              {:.4f}\n"
        "dev base + memorizing          {:.4f}  (lambda {})\n"
        "dev base + kNN                 {:.4f}  (lambda {})\n",
        train_ppl_dropout, train_ppl_memorize, dev_base, dev_memorize, dev_base_plus_memorize, num(lambda_memorize),
        dev_knn, num(lambda_knn));
}

MemorizationReport memorization_experiment(const TokenSequence& train_seq, const TokenSequence& dev,
                                           const MemorizationConfig& cfg) {
    LmConfig reg = cfg.lm;
    LmConfig mem = cfg.lm;
    mem.dropout_rate = 0.0;
    FfLmModel base(reg), memo(mem);
    MemorizationReport r;
    r.loss_dropout = train(base, train_seq).loss_curve;
    r.loss_memorize = train(memo, train_seq).loss_curve;
    r.train_ppl_dropout = std::exp(r.loss_dropout.back());
    r.train_ppl_memorize = std::exp(r.loss_memorize.back());

    const EvalTrace tb = make_trace(base, dev, cfg.tap);
    const EvalTrace tm = make_trace(memo, dev, cfg.tap);
    const auto logp = trace_logp(tb);
    r.dev_base = base_perplexity(tb);
    r.dev_memorize = base_perplexity(tm);
    const auto mix = tune_lambda(logp, exp_of(tm.logp), cfg.lambda_grid);
    r.dev_base_plus_memorize = mix.perplexity;
    r.lambda_memorize = mix.lambda;

    const Datastore ds = build_datastore(base, train_seq, cfg.tap);
    SearchParams sp;
    sp.k = std::min(cfg.k, ds.size());
    const auto kp = knn_target_probs(tb, ds, nullptr, sp, {sp.k});
    const auto knn = tune_lambda(logp, kp.p[0], cfg.lambda_grid);
    r.dev_knn = knn.perplexity;
    r.lambda_knn = knn.lambda;
    return r;
}

std::string DomainAdaptReport::to_text() const {
    return fmt::format(
        "out-of-domain LM            {:.4f}\n"
        "out-of-domain LM + datastore {:.4f}  (lambda {})\n"
        "in-domain LM                {:.4f}\n"
        "in-domain LM + datastore    {:.4f}  (lambda {})\n",
        cross_base, cross_knn, num(cross_lambda), in_base, in_knn, num(in_lambda));
}

std::string DomainAdaptReport::to_csv() const {
    return fmt::format("setting,base_perplexity,knn_perplexity,lambda\ncross_domain,{},{},{}\nin_domain,{},{},{}\n",
                       num(cross_base), num(cross_knn), num(cross_lambda), num(in_base), num(in_knn),
                       num(in_lambda));
}

DomainAdaptReport domain_adaptation_experiment(const TokenSequence& train_a, const TokenSequence& train_b,
                                               const TokenSequence& dev_b, const DomainAdaptConfig& cfg) {
    DomainAdaptReport r;
    auto run = [&](const TokenSequence& lm_corpus, double& base, double& knn, double& lambda) {
        FfLmModel m(cfg.lm);
        train(m, lm_corpus);
        const EvalTrace tr = make_trace(m, dev_b, cfg.tap);
        const Datastore ds = build_datastore(m, train_b, cfg.tap);
        std::optional<IvfPqIndex> idx;
        if (cfg.use_index) idx = desk_index(ds, cfg.lm.seed);
        SearchParams sp = cfg.params;
        sp.k = std::min(sp.k, ds.size());
        const auto kp = knn_target_probs(tr, ds, idx ? &*idx : nullptr, sp, {sp.k});
        const auto fit = tune_lambda(trace_logp(tr), kp.p[0], cfg.lambda_grid);
        base = base_perplexity(tr);
        knn = fit.perplexity;
        lambda = fit.lambda;
    };
    run(train_a, r.cross_base, r.cross_knn, r.cross_lambda);
    run(train_b, r.in_base, r.in_knn, r.in_lambda);
    return r;
}

// ---------------------------------------------------------------------------

std::vector<NeighborRow> inspect_neighbors(const FfLmModel& model, const Vocab& vocab, const Datastore& ds,
                                           const TokenSequence& tokens, const IvfPqIndex* index,
                                           const std::string& context_text, std::size_t k, KeyTap tap,
                                           std::size_t snippet_tokens) {
    require(ds.size() == tokens.size(), ErrorCode::DimensionMismatch,
            fmt::format("token file has {} tokens but the datastore has {} entries", tokens.size(), ds.size()));
    require(ds.dim() == model.dim(), ErrorCode::DimensionMismatch, "model and datastore dimensions differ");
    const TokenSequence q = encode(context_text, vocab);
    const std::size_t n = model.config().context_len;
    std::vector<TokenId> ctx(n, kBosId);
    for (std::size_t j = 0; j < n && j < q.size(); ++j) ctx[n - 1 - j] = q.ids[q.size() - 1 - j];
    const auto key = model.extract_key(ctx, tap);
    SearchParams sp = index ? index->default_params : SearchParams{};
    sp.k = k;
    const NeighborSet nb = index ? search(*index, ds, key, sp) : exact_search(ds, key, k, Metric::SquaredL2);

    std::vector<NeighborRow> rows;
    if (nb.empty()) return rows;
    double dmin = nb.entries.front().distance, z = 0.0;
    for (const auto& x : nb.entries) z += std::exp(dmin - x.distance);
    for (const auto& x : nb.entries) {
        const std::size_t begin_doc = tokens.doc_begin(tokens.doc_of(x.id));
        const std::size_t b = x.id > begin_doc + snippet_tokens ? x.id - snippet_tokens : begin_doc;
        std::string snippet = decode_range(tokens, vocab, b, x.id);
        if (b > begin_doc) snippet = "... " + snippet;
        rows.push_back({x.id, snippet, vocab.token(x.value), x.distance, std::exp(dmin - x.distance) / z});
    }
    return rows;
}

std::string render_neighbor_table(const std::vector<NeighborRow>& rows) {
    std::size_t width = 16;
    for (const auto& r : rows) width = std::max(width, r.context.size());
    std::string s = fmt::format("{:<{}}  {:<16}  {:>12}  {:>12}\n", "training context", width, "target",
                                "probability", "distance");
    for (const auto& r : rows)
        s += fmt::format("{:<{}}  {:<16}  {:>12.6g}  {:>12.6g}\n", r.context, width, r.target, r.share, r.distance);
    return s;
}

}  // namespace knnlm
