// Command-line driver: train -> forward pass -> index -> evaluate.

#include <fmt/format.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>

#include "knnlm/ann_index.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/eval.hpp"
#include "knnlm/knn_lm.hpp"
#include "knnlm/neural_lm.hpp"
#include "knnlm/ngram_lm.hpp"
#include "knnlm/synth.hpp"

namespace fs = std::filesystem;
using namespace knnlm;

namespace {

constexpr const char* kToolVersion = "knnlm 0.1.0";

using Clock = std::chrono::steady_clock;

/// Records what produced an artifact. Everything except wall_clock_seconds
/// is a function of the command line and the input bytes.
class Manifest {
public:
    Manifest(const CLI::App* cmd, std::string name) : cmd_(cmd), name_(std::move(name)), t0_(Clock::now()) {}

    void input(const std::string& path) {
        if (!path.empty()) inputs_[path] = hex64(hash_file(path));
    }
    void seed(std::uint64_t s) { seed_ = s; }

    void write_for(const std::string& artifact) const {
        nlohmann::ordered_json j;
        j["command"] = name_;
        j["config"] = cmd_->config_to_str(true, false);
        j["inputs"] = inputs_;
        // null for commands without randomness
        j["seed"] = seed_ ? nlohmann::ordered_json(*seed_) : nlohmann::ordered_json();
        j["tool_version"] = kToolVersion;
        j["output_hash"] = hex64(hash_file(artifact));
        j["wall_clock_seconds"] = std::chrono::duration<double>(Clock::now() - t0_).count();
        write_text_file(artifact + ".manifest.json", j.dump(2) + "\n");
    }

private:
    const CLI::App* cmd_;
    std::string name_;
    Clock::time_point t0_;
    std::map<std::string, std::string> inputs_;
    std::optional<std::uint64_t> seed_;
};

void add_lm_options(CLI::App* c, LmConfig& cfg) {
    c->add_option("--context-len", cfg.context_len, "Context window in tokens")->capture_default_str();
    c->add_option("--embed-dim", cfg.embed_dim, "Embedding width")->capture_default_str();
    c->add_option("--hidden-dim", cfg.hidden_dim, "Hidden width (key dimension)")->capture_default_str();
    c->add_option("--dropout", cfg.dropout_rate, "Dropout rate after the activation")->capture_default_str();
    c->add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
    c->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    c->add_option("--epochs", cfg.epochs)->capture_default_str();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    c->add_flag("!--no-layer-norm", cfg.use_layer_norm, "Disable the layer norm after the hidden layer");
}

KeyTap tap_option(const std::string& s) { return parse_tap(s); }

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        const std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!item.empty()) {
            std::size_t used = 0;
            double v = 0;
            try {
                v = std::stod(item, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            require(used == item.size(), ErrorCode::InvalidArgument, "not a number: '" + item + "'");
            out.push_back(v);
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    require(!out.empty(), ErrorCode::InvalidArgument, "empty value list");
    return out;
}

EvalTrace load_trace(const std::string& path, std::optional<std::size_t> dim = std::nullopt) {
    auto v = import_trace(path, dim);
    require(std::holds_alternative<EvalTrace>(v), ErrorCode::Format,
            path + " is a datastore file, not an evaluation trace");
    return std::get<EvalTrace>(std::move(v));
}

void check_pairing(const EvalTrace& tr, const Datastore& ds) {
    require(tr.dim == ds.dim(), ErrorCode::DimensionMismatch,
            fmt::format("trace key dimension {} does not match datastore dimension {}", tr.dim, ds.dim()));
    const auto& a = tr.prov;
    const auto& b = ds.provenance();
    if (a.tap != kExternalTap && b.tap != kExternalTap)
        require(a.tap == b.tap, ErrorCode::InvalidArgument,
                fmt::format("trace keys come from tap {} but datastore keys from tap {}",
                            tap_name(static_cast<KeyTap>(a.tap)), tap_name(static_cast<KeyTap>(b.tap))));
    if (a.model_hash && b.model_hash && a.model_hash != b.model_hash)
        std::fprintf(stderr, "note: trace and datastore were produced by different model files\n");
}

std::size_t vocab_size_of(const std::string& vocab_path) { return Vocab::load(vocab_path).size(); }

void print_downscale_notice(const IndexConfig& c, std::size_t n) {
    std::fprintf(stderr,
                 "notice: desk-scale index for %zu entries: %zu centroids, %zu-byte codes, %zu training points "
                 "(large-scale reference: 4096 centroids, 64-byte codes, 1M points)\n",
                 n, c.n_centroids, c.pq_m, c.train_sample_size);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kNN-augmented language modeling toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI file with option defaults (flags take precedence)");
    app.add_option_function<std::size_t>(
           "--threads", [](std::size_t n) { set_num_threads(n); }, "Worker threads (default: NLM_THREADS or all cores)")
        ->trigger_on_parse();

    // ---------------------------------------------------------------- vocab
    auto* vocab_cmd = app.add_subcommand("vocab", "Vocabulary tools")->require_subcommand(1);
    auto* vocab_build = vocab_cmd->add_subcommand("build", "Build a vocabulary from text");
    std::string vb_input, vb_out;
    std::uint64_t vb_min_count = 1;
    std::size_t vb_max_size = 0;
    std::vector<std::string> vb_extra;
    vocab_build->add_option("--input", vb_input, "Training text")->required()->check(CLI::ExistingFile);
    vocab_build->add_option("--also", vb_extra, "Additional text files counted into the vocabulary")
        ->check(CLI::ExistingFile);
    vocab_build->add_option("--min-count", vb_min_count)->capture_default_str();
    vocab_build->add_option("--max-size", vb_max_size, "0 = unlimited")->capture_default_str();
    vocab_build->add_option("--out", vb_out)->required();
    vocab_build->callback([&] {
        Manifest man(vocab_build, "vocab build");
        std::string text = read_text_file(vb_input);
        man.input(vb_input);
        for (const auto& p : vb_extra) {
            text += "\n\n" + read_text_file(p);
            man.input(p);
        }
        const Vocab v = Vocab::build(text, vb_min_count, vb_max_size ? vb_max_size : SIZE_MAX);
        v.save(vb_out);
        man.write_for(vb_out);
        fmt::print("vocabulary: {} types -> {}\n", v.size(), vb_out);
    });

    // --------------------------------------------------------------- corpus
    auto* corpus_cmd = app.add_subcommand("corpus", "Corpus tools")->require_subcommand(1);
    auto* encode_cmd = corpus_cmd->add_subcommand("encode", "Text to token ids");
    std::string ce_vocab, ce_input, ce_out;
    encode_cmd->add_option("--vocab", ce_vocab)->required()->check(CLI::ExistingFile);
    encode_cmd->add_option("--input", ce_input)->required()->check(CLI::ExistingFile);
    encode_cmd->add_option("--out", ce_out)->required();
    encode_cmd->callback([&] {
        Manifest man(encode_cmd, "corpus encode");
        man.input(ce_vocab);
        man.input(ce_input);
        const Vocab v = Vocab::load(ce_vocab);
        const TokenSequence seq = encode(read_text_file(ce_input), v);
        seq.save(ce_out);
        man.write_for(ce_out);
        fmt::print("{} tokens in {} documents -> {}\n", seq.size(), seq.doc_count(), ce_out);
    });

    auto* synth_cmd = corpus_cmd->add_subcommand("synth", "Write a deterministic synthetic corpus");
    SynthOptions so;
    std::string so_domain = "encyclopedic", so_dir;
    synth_cmd->add_option("--domain", so_domain)->check(CLI::IsMember({"encyclopedic", "narrative"}))
        ->capture_default_str();
    synth_cmd->add_option("--train-tokens", so.train_tokens)->capture_default_str();
    synth_cmd->add_option("--valid-tokens", so.valid_tokens)->capture_default_str();
    synth_cmd->add_option("--test-tokens", so.test_tokens)->capture_default_str();
    synth_cmd->add_option("--entities", so.entities)->capture_default_str();
    synth_cmd->add_option("--filler-pool", so.filler_pool)->capture_default_str();
    synth_cmd->add_option("--fact-rate", so.fact_rate)->capture_default_str();
    synth_cmd->add_option("--min-sentences", so.min_sentences, "Sentences per document, lower bound")
        ->capture_default_str();
    synth_cmd->add_option("--max-sentences", so.max_sentences)->capture_default_str();
    synth_cmd->add_option("--seed", so.seed)->capture_default_str();
    synth_cmd->add_option("--out-dir", so_dir)->required();
    synth_cmd->callback([&] {
        Manifest man(synth_cmd, "corpus synth");
        man.seed(so.seed);
        so.domain = so_domain == "narrative" ? SynthDomain::Narrative : SynthDomain::Encyclopedic;
        const SynthCorpus c = generate_synthetic(so);
        fs::create_directories(so_dir);
        for (const auto& [name, text] : {std::pair{"train.txt", &c.train}, {"valid.txt", &c.valid},
                                         {"test.txt", &c.test}}) {
            const std::string p = (fs::path(so_dir) / name).string();
            write_text_file(p, *text);
            man.write_for(p);
        }
        fmt::print("wrote train/valid/test to {}\n", so_dir);
    });

    // ------------------------------------------------------------------- lm
    auto* lm_cmd = app.add_subcommand("lm", "Feedforward neural LM")->require_subcommand(1);
    auto* lm_train = lm_cmd->add_subcommand("train", "Train on a token file");
    LmConfig lm_cfg;
    std::string lt_tokens, lt_vocab, lt_out, lt_curve;
    add_lm_options(lm_train, lm_cfg);
    lm_train->add_option("--tokens", lt_tokens)->required()->check(CLI::ExistingFile);
    lm_train->add_option("--vocab", lt_vocab)->required()->check(CLI::ExistingFile);
    lm_train->add_option("--out", lt_out)->required();
    lm_train->add_option("--curve", lt_curve, "Write per-epoch training loss CSV");
    lm_train->callback([&] {
        Manifest man(lm_train, "lm train");
        man.input(lt_tokens);
        man.input(lt_vocab);
        man.seed(lm_cfg.seed);
        lm_cfg.vocab_size = vocab_size_of(lt_vocab);
        const TokenSequence seq = TokenSequence::load(lt_tokens);
        FfLmModel model(lm_cfg);
        const auto res = train(model, seq);
        model.save(lt_out);
        man.write_for(lt_out);
        for (std::size_t e = 0; e < res.loss_curve.size(); ++e)
            fmt::print("epoch {:3d}  train loss {:.5f}  ppl {:.4f}\n", e + 1, res.loss_curve[e],
                       std::exp(res.loss_curve[e]));
        if (!lt_curve.empty()) {
            std::string csv = "epoch,train_loss\n";
            for (std::size_t e = 0; e < res.loss_curve.size(); ++e)
                csv += fmt::format("{},{:.10g}\n", e + 1, res.loss_curve[e]);
            write_text_file(lt_curve, csv);
            man.write_for(lt_curve);
        }
    });

    auto* lm_grad = lm_cmd->add_subcommand("gradcheck", "Finite-difference gradient check in double precision");
    LmConfig gc_cfg;
    gc_cfg.vocab_size = 50;
    gc_cfg.hidden_dim = 16;
    gc_cfg.embed_dim = 8;
    double gc_eps = 1e-5, gc_tol = 1e-4;
    std::size_t gc_params = 512, gc_batch = 16;
    lm_grad->add_option("--vocab-size", gc_cfg.vocab_size)->capture_default_str();
    lm_grad->add_option("--hidden-dim", gc_cfg.hidden_dim)->capture_default_str();
    lm_grad->add_option("--embed-dim", gc_cfg.embed_dim)->capture_default_str();
    lm_grad->add_option("--context-len", gc_cfg.context_len)->capture_default_str();
    lm_grad->add_flag("!--no-layer-norm", gc_cfg.use_layer_norm);
    lm_grad->add_option("--epsilon", gc_eps)->capture_default_str();
    lm_grad->add_option("--params", gc_params, "Parameters sampled")->capture_default_str();
    lm_grad->add_option("--batch", gc_batch, "Random windows in the loss")->capture_default_str();
    lm_grad->add_option("--tol", gc_tol)->capture_default_str();
    lm_grad->add_option("--seed", gc_cfg.seed)->capture_default_str();
    lm_grad->callback([&] {
        const FfLmModelF64 model(gc_cfg);
        Rng rng(derive_seed(gc_cfg.seed, 99));
        std::vector<TokenId> ctx(gc_batch * gc_cfg.context_len), tgt(gc_batch);
        for (auto& t : ctx) t = static_cast<TokenId>(rng.below(gc_cfg.vocab_size));
        for (auto& t : tgt) t = static_cast<TokenId>(rng.below(gc_cfg.vocab_size));
        const auto r = grad_check(model, ctx, tgt, gc_eps, gc_params, gc_cfg.seed);
        fmt::print("checked {} parameters, max relative error {:.3e} (tolerance {:.1e})\n", r.checked,
                   r.max_rel_error, gc_tol);
        if (!(r.max_rel_error < gc_tol)) throw Error(ErrorCode::Diverged, "gradient check failed");
    });

    auto* lm_eval = lm_cmd->add_subcommand("eval", "Perplexity of a model on a token file");
    std::string le_model, le_tokens;
    lm_eval->add_option("--model", le_model)->required()->check(CLI::ExistingFile);
    lm_eval->add_option("--tokens", le_tokens)->required()->check(CLI::ExistingFile);
    lm_eval->callback([&] {
        const auto model = FfLmModel::load(le_model);
        const auto seq = TokenSequence::load(le_tokens);
        fmt::print("tokens {}  perplexity {:.4f}\n", seq.size(), std::exp(mean_nll(model, seq)));
    });

    // ---------------------------------------------------------------- ngram
    auto* ng_cmd = app.add_subcommand("ngram", "Kneser-Ney n-gram LM")->require_subcommand(1);
    auto* ng_train = ng_cmd->add_subcommand("train");
    std::string nt_tokens, nt_vocab, nt_out;
    std::size_t nt_order = 3;
    double nt_discount = 0.75;
    ng_train->add_option("--tokens", nt_tokens)->required()->check(CLI::ExistingFile);
    ng_train->add_option("--vocab", nt_vocab)->required()->check(CLI::ExistingFile);
    ng_train->add_option("--order", nt_order)->capture_default_str();
    ng_train->add_option("--discount", nt_discount)->capture_default_str();
    ng_train->add_option("--out", nt_out)->required();
    ng_train->callback([&] {
        Manifest man(ng_train, "ngram train");
        man.input(nt_tokens);
        man.input(nt_vocab);
        const auto seq = TokenSequence::load(nt_tokens);
        const auto m = NgramModel::train(seq, nt_order, nt_discount, vocab_size_of(nt_vocab));
        m.save(nt_out);
        man.write_for(nt_out);
        fmt::print("order {} model -> {}\n", nt_order, nt_out);
    });
    auto* ng_eval = ng_cmd->add_subcommand("eval");
    std::string ne_model, ne_tokens;
    ng_eval->add_option("--model", ne_model)->required()->check(CLI::ExistingFile);
    ng_eval->add_option("--tokens", ne_tokens)->required()->check(CLI::ExistingFile);
    ng_eval->callback([&] {
        const auto m = NgramModel::load(ne_model);
        const auto seq = TokenSequence::load(ne_tokens);
        seq.validate(m.vocab_size());
        const WindowSet w(seq, {std::max<std::size_t>(m.order() - 1, 1), kBosId});
        std::vector<double> nll(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) nll[i] = -std::log(m.prob(w.context(i), w.target(i)));
        fmt::print("tokens {}  perplexity {:.4f}\n", seq.size(), std::exp(pairwise_sum(nll) / double(nll.size())));
    });

    // ------------------------------------------------------------ datastore
    auto* ds_cmd = app.add_subcommand("datastore", "Key-value datastore")->require_subcommand(1);
    auto* ds_build = ds_cmd->add_subcommand("build", "One forward pass over a token file");
    std::string db_model, db_tokens, db_out, db_tap = "post-layernorm";
    ds_build->add_option("--model", db_model)->required()->check(CLI::ExistingFile);
    ds_build->add_option("--tokens", db_tokens)->required()->check(CLI::ExistingFile);
    ds_build->add_option("--tap", db_tap, "pre-activation|post-activation|post-layernorm|output-input")
        ->capture_default_str();
    ds_build->add_option("--out", db_out)->required();
    ds_build->callback([&] {
        Manifest man(ds_build, "datastore build");
        man.input(db_model);
        man.input(db_tokens);
        const auto model = FfLmModel::load(db_model);
        const auto ds = build_datastore(model, TokenSequence::load(db_tokens), tap_option(db_tap));
        save_datastore(ds, db_out);
        man.write_for(db_out);
        fmt::print("{} entries of dimension {} -> {}\n", ds.size(), ds.dim(), db_out);
    });

    auto* ds_sub = ds_cmd->add_subcommand("subsample", "Uniform subsample without replacement");
    std::string dsub_in, dsub_out;
    std::size_t dsub_size = 0;
    double dsub_frac = 0.0;
    std::uint64_t dsub_seed = 1;
    ds_sub->add_option("--datastore", dsub_in)->required()->check(CLI::ExistingFile);
    auto* size_opt = ds_sub->add_option("--size", dsub_size, "Entries to keep");
    ds_sub->add_option("--fraction", dsub_frac, "Fraction to keep")->excludes(size_opt);
    ds_sub->add_option("--seed", dsub_seed)->capture_default_str();
    ds_sub->add_option("--out", dsub_out)->required();
    ds_sub->callback([&] {
        Manifest man(ds_sub, "datastore subsample");
        man.input(dsub_in);
        man.seed(dsub_seed);
        const auto ds = load_datastore(dsub_in);
        std::size_t m = dsub_size;
        if (dsub_frac > 0.0) m = static_cast<std::size_t>(std::llround(dsub_frac * double(ds.size())));
        const auto sub = subsample(ds, m, dsub_seed);
        save_datastore(sub, dsub_out);
        man.write_for(dsub_out);
        fmt::print("{} of {} entries -> {}\n", sub.size(), ds.size(), dsub_out);
    });

    auto* ds_import = ds_cmd->add_subcommand("import", "Validate an externally produced datastore or trace file");
    std::string di_in, di_out;
    std::size_t di_dim = 0;
    ds_import->add_option("--input", di_in)->required()->check(CLI::ExistingFile);
    ds_import->add_option("--dim", di_dim, "Expected key dimension");
    ds_import->add_option("--out", di_out, "Re-write the validated file here");
    ds_import->callback([&] {
        Manifest man(ds_import, "datastore import");
        man.input(di_in);
        auto v = import_trace(di_in, di_dim ? std::optional<std::size_t>(di_dim) : std::nullopt);
        if (auto* ds = std::get_if<Datastore>(&v)) {
            fmt::print("datastore: {} entries, dimension {}\n", ds->size(), ds->dim());
            if (!di_out.empty()) save_datastore(*ds, di_out);
        } else {
            const auto& tr = std::get<EvalTrace>(v);
            fmt::print("eval trace: {} records, dimension {}, base perplexity {:.4f}\n", tr.size(), tr.dim,
                       base_perplexity(tr));
            if (!di_out.empty()) save_trace(tr, di_out);
        }
        if (!di_out.empty()) man.write_for(di_out);
    });

    auto* trace_cmd = app.add_subcommand("trace", "Evaluation traces")->require_subcommand(1);
    auto* trace_make = trace_cmd->add_subcommand("make", "Keys, targets and base log-probs for a token file");
    std::string tm_model, tm_tokens, tm_out, tm_tap = "post-layernorm";
    trace_make->add_option("--model", tm_model)->required()->check(CLI::ExistingFile);
    trace_make->add_option("--tokens", tm_tokens)->required()->check(CLI::ExistingFile);
    trace_make->add_option("--tap", tm_tap)->capture_default_str();
    trace_make->add_option("--out", tm_out)->required();
    trace_make->callback([&] {
        Manifest man(trace_make, "trace make");
        man.input(tm_model);
        man.input(tm_tokens);
        const auto model = FfLmModel::load(tm_model);
        const auto tr = make_trace(model, TokenSequence::load(tm_tokens), tap_option(tm_tap));
        save_trace(tr, tm_out);
        man.write_for(tm_out);
        fmt::print("{} records, base perplexity {:.4f} -> {}\n", tr.size(), base_perplexity(tr), tm_out);
    });

    // ---------------------------------------------------------------- index
    auto* idx_cmd = app.add_subcommand("index", "IVF-PQ index")->require_subcommand(1);
    auto* idx_build = idx_cmd->add_subcommand("build");
    std::string ib_ds, ib_out, ib_rerank = "exact";
    std::size_t ib_centroids = 0, ib_pq_m = 0, ib_sample = 0, ib_nprobe = 32, ib_k = 1024, ib_iters = 25;
    std::uint64_t ib_seed = 1;
    idx_build->add_option("--datastore", ib_ds)->required()->check(CLI::ExistingFile);
    idx_build->add_option("--centroids", ib_centroids, "Coarse centroids (default: desk-scaled)");
    idx_build->add_option("--pq-m", ib_pq_m, "Code bytes per entry (default: desk-scaled)");
    idx_build->add_option("--sample", ib_sample, "Training sample size (default: desk-scaled)");
    idx_build->add_option("--iters", ib_iters)->capture_default_str();
    idx_build->add_option("--nprobe", ib_nprobe, "Default lists probed at search time")->capture_default_str();
    idx_build->add_option("--k", ib_k, "Default neighbors per query")->capture_default_str();
    idx_build->add_option("--rerank", ib_rerank)->check(CLI::IsMember({"none", "exact"}))->capture_default_str();
    idx_build->add_option("--seed", ib_seed)->capture_default_str();
    idx_build->add_option("--out", ib_out)->required();
    idx_build->callback([&] {
        Manifest man(idx_build, "index build");
        man.input(ib_ds);
        man.seed(ib_seed);
        const auto ds = load_datastore(ib_ds);
        bool scaled = false;
        IndexConfig cfg = IndexConfig::desk_scaled(ds.size(), ds.dim(), &scaled);
        if (ib_centroids) cfg.n_centroids = ib_centroids;
        if (ib_pq_m) cfg.pq_m = ib_pq_m;
        if (ib_sample) cfg.train_sample_size = ib_sample;
        cfg.kmeans_iters = ib_iters;
        cfg.seed = ib_seed;
        if (scaled && !(ib_centroids && ib_pq_m && ib_sample)) print_downscale_notice(cfg, ds.size());
        auto index = build_index(ds, cfg);
        index.default_params = {ib_k, std::min(ib_nprobe, cfg.n_centroids), parse_rerank(ib_rerank)};
        index.save(ib_out);
        man.write_for(ib_out);
        fmt::print("{} entries in {} lists, {}-byte codes -> {}\n", index.total(), index.n_lists(), cfg.pq_m, ib_out);
    });

    auto* idx_check = idx_cmd->add_subcommand("check", "Recall against exact search");
    std::string ic_index, ic_ds, ic_queries, ic_rerank;
    std::size_t ic_n = 100, ic_k = 10, ic_nprobe = 0;
    bool ic_exhaustive = false;
    idx_check->add_option("--index", ic_index)->required()->check(CLI::ExistingFile);
    idx_check->add_option("--datastore", ic_ds)->required()->check(CLI::ExistingFile);
    idx_check->add_option("--queries", ic_queries, "Trace or datastore file with query keys")
        ->check(CLI::ExistingFile);
    idx_check->add_option("--n-queries", ic_n)->capture_default_str();
    idx_check->add_option("--k", ic_k)->capture_default_str();
    idx_check->add_option("--nprobe", ic_nprobe, "Default: the index's stored value");
    idx_check->add_option("--rerank", ic_rerank)->check(CLI::IsMember({"none", "exact"}));
    idx_check->add_flag("--exhaustive", ic_exhaustive, "Probe every list with exact re-ranking");
    idx_check->callback([&] {
        const auto index = IvfPqIndex::load(ic_index);
        const auto ds = load_datastore(ic_ds);
        SearchParams sp = index.default_params;
        sp.k = ic_k;
        if (ic_nprobe) sp.nprobe = ic_nprobe;
        if (!ic_rerank.empty()) sp.rerank = parse_rerank(ic_rerank);
        if (ic_exhaustive) sp = {ic_k, index.n_lists(), Rerank::ExactSquaredL2};
        std::vector<float> keys;
        std::size_t nq = 0, dim = ds.dim();
        if (ic_queries.empty()) {
            nq = std::min(ic_n, ds.size());
            for (std::size_t i = 0; i < nq; ++i) {
                const auto k = ds.key(i * ds.size() / nq);
                keys.insert(keys.end(), k.begin(), k.end());
            }
        } else {
            auto v = import_trace(ic_queries, dim);
            if (auto* q = std::get_if<Datastore>(&v)) {
                nq = std::min(ic_n, q->size());
                keys.assign(q->keys().begin(), q->keys().begin() + static_cast<std::ptrdiff_t>(nq * dim));
            } else {
                auto& t = std::get<EvalTrace>(v);
                nq = std::min(ic_n, t.size());
                keys.assign(t.keys.begin(), t.keys.begin() + static_cast<std::ptrdiff_t>(nq * dim));
            }
        }
        require(nq > 0, ErrorCode::EmptyInput, "no queries");
        std::vector<double> rec(nq);
        const Metric m = sp.rerank == Rerank::None ? Metric::L2 : Metric::SquaredL2;
        parallel_for(nq, 8, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                const std::span<const float> q(keys.data() + i * dim, dim);
                rec[i] = recall_at_k(search(index, ds, q, sp), exact_search(ds, q, sp.k, m));
            }
        });
        fmt::print("queries {}  k {}  nprobe {}/{}  rerank {}  recall@{} = {:.4f}\n", nq, sp.k,
                   std::min(sp.nprobe, index.n_lists()), index.n_lists(), rerank_name(sp.rerank), sp.k,
                   pairwise_sum(rec) / double(nq));
    });

    // ----------------------------------------------------------------- eval
    auto* eval_cmd = app.add_subcommand("eval", "kNN-LM evaluation")->require_subcommand(1);
    auto* eval_run = eval_cmd->add_subcommand("run");
    std::string er_dev, er_test, er_ds, er_index, er_json, er_tap, er_rerank;
    std::size_t er_k = 1024, er_nprobe = 0;
    double er_lambda = 0.25;
    bool er_tune = false, er_cache = false, er_cheat = false;
    CacheConfig er_cache_cfg;
    eval_run->add_option("--dev", er_dev, "Dev trace (lambda is tuned here)")->check(CLI::ExistingFile);
    eval_run->add_option("--test", er_test, "Test trace")->check(CLI::ExistingFile);
    eval_run->add_option("--datastore", er_ds)->check(CLI::ExistingFile);
    eval_run->add_option("--index", er_index, "IVF-PQ index (default: exact scan)")->check(CLI::ExistingFile);
    eval_run->add_option("--k", er_k)->capture_default_str();
    eval_run->add_option("--nprobe", er_nprobe, "Default: the index's stored value");
    eval_run->add_option("--rerank", er_rerank)->check(CLI::IsMember({"none", "exact"}));
    auto* lam_opt = eval_run->add_option("--lambda", er_lambda)->capture_default_str();
    eval_run->add_flag("--tune-lambda", er_tune, "Tune lambda on the dev trace")->excludes(lam_opt);
    eval_run->add_flag("--cache", er_cache, "Add the continuous cache");
    eval_run->add_option("--cache-window", er_cache_cfg.window)->capture_default_str();
    eval_run->add_option("--cache-theta", er_cache_cfg.theta)->capture_default_str();
    eval_run->add_option("--cache-lambda", er_cache_cfg.lambda)->capture_default_str();
    eval_run->add_option("--tap", er_tap, "Require trace and datastore keys from this tap");
    eval_run->add_flag("--cheat", er_cheat, "Allow tuning lambda on the test trace");
    eval_run->add_option("--json", er_json, "Write the report(s) as JSON");
    eval_run->callback([&] {
        require(!er_dev.empty() || !er_test.empty(), ErrorCode::InvalidArgument, "give --dev and/or --test");
        if (er_tune && er_dev.empty())
            require(er_cheat, ErrorCode::InvalidArgument,
                    "--tune-lambda without --dev would tune on the test trace; pass --cheat to allow it");
        Manifest man(eval_run, "eval run");
        std::optional<Datastore> ds;
        std::optional<IvfPqIndex> index;
        if (!er_ds.empty()) {
            ds = load_datastore(er_ds);
            man.input(er_ds);
        }
        if (!er_index.empty()) {
            require(ds.has_value(), ErrorCode::InvalidArgument, "--index needs --datastore");
            index = IvfPqIndex::load(er_index);
            man.input(er_index);
        }
        EvalOptions opt;
        opt.params.k = er_k;
        if (index) opt.params = index->default_params, opt.params.k = er_k;
        if (er_nprobe) opt.params.nprobe = er_nprobe;
        if (!er_rerank.empty()) opt.params.rerank = parse_rerank(er_rerank);
        opt.interp.lambda = er_lambda;
        if (er_cache) opt.cache = er_cache_cfg;

        auto prepare = [&](const std::string& path) {
            EvalTrace tr = load_trace(path);
            man.input(path);
            if (ds) check_pairing(tr, *ds);
            if (!er_tap.empty()) {
                const auto t = static_cast<std::uint8_t>(parse_tap(er_tap));
                require(tr.prov.tap == t && (!ds || ds->provenance().tap == t), ErrorCode::InvalidArgument,
                        "keys were not produced with tap " + er_tap);
            }
            return tr;
        };
        nlohmann::ordered_json out;
        if (!er_dev.empty()) {
            const auto tr = prepare(er_dev);
            opt.tune = er_tune;
            const auto rep = evaluate(tr, ds ? &*ds : nullptr, index ? &*index : nullptr, opt);
            fmt::print("== dev ==\n{}", rep.to_text());
            out["dev"] = nlohmann::json::parse(rep.to_json(false));
            if (er_tune) {
                opt.interp.lambda = rep.knn ? rep.lambda : opt.interp.lambda;
                if (opt.cache && rep.lambda_cache) opt.cache->lambda = *rep.lambda_cache;
                if (rep.joint_lambda) opt.joint = std::pair{*rep.joint_lambda, *rep.joint_lambda_cache};
            }
        }
        if (!er_test.empty()) {
            const auto tr = prepare(er_test);
            opt.tune = er_tune && er_dev.empty();
            const auto rep = evaluate(tr, ds ? &*ds : nullptr, index ? &*index : nullptr, opt);
            fmt::print("== test{} ==\n{}", opt.tune ? " (lambda tuned on test)" : "", rep.to_text());
            out["test"] = nlohmann::json::parse(rep.to_json(false));
        }
        if (!er_json.empty()) {
            write_text_file(er_json, out.dump(2) + "\n");
            man.write_for(er_json);
        }
    });

    // ---------------------------------------------------------------- sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "One-axis experiment grids (CSV)")->require_subcommand(1);
    struct SweepArgs {
        std::string dev, ds, index, out, values, model, train, dev_tokens, rerank;
        std::size_t k = 1024, nprobe = 0;
        std::uint64_t seed = 1;
        bool index_per_point = false;
        double discount = 0.75;
    };
    static SweepArgs sa;
    const std::map<std::string, std::string> axes = {{"k", "k"},         {"lambda", "lambda"},
                                                     {"size", "datastore_size"}, {"nprobe", "nprobe"},
                                                     {"tap", "key_tap"}, {"ngram", "ngram_order"}};
    for (const auto& [name, axis] : axes) {
        auto* c = sweep_cmd->add_subcommand(name);
        c->add_option("--dev", sa.dev, "Dev trace")->required()->check(CLI::ExistingFile);
        c->add_option("--values", sa.values, "Comma-separated axis values")->required();
        c->add_option("--out", sa.out, "CSV output")->required();
        c->add_option("--k", sa.k)->capture_default_str();
        c->add_option("--seed", sa.seed)->capture_default_str();
        if (name != "ngram" && name != "tap") {
            c->add_option("--datastore", sa.ds)->required()->check(CLI::ExistingFile);
            c->add_option("--index", sa.index)->check(CLI::ExistingFile);
            c->add_option("--nprobe", sa.nprobe);
            c->add_option("--rerank", sa.rerank)->check(CLI::IsMember({"none", "exact"}));
        }
        if (name == "size" || name == "tap")
            c->add_flag("--index-per-point", sa.index_per_point, "Build a desk-scaled index for each point");
        if (name == "tap" || name == "ngram") {
            c->add_option("--train-tokens", sa.train)->required()->check(CLI::ExistingFile);
            c->add_option("--dev-tokens", sa.dev_tokens)->required()->check(CLI::ExistingFile);
            c->add_option("--model", sa.model)->check(CLI::ExistingFile)->required(name == "tap");
        }
        if (name == "ngram") c->add_option("--discount", sa.discount)->capture_default_str();
        const std::string ax = axis;
        c->callback([c, ax] {
            Manifest man(c, "sweep " + ax);
            man.seed(sa.seed);
            const EvalTrace dev = load_trace(sa.dev);
            man.input(sa.dev);
            std::optional<Datastore> ds;
            std::optional<IvfPqIndex> index;
            std::optional<FfLmModel> model;
            std::optional<TokenSequence> train_tok, dev_tok;
            SweepInputs in;
            in.dev = &dev;
            if (!sa.ds.empty()) {
                ds = load_datastore(sa.ds);
                man.input(sa.ds);
                check_pairing(dev, *ds);
                in.ds = &*ds;
            }
            if (!sa.index.empty()) {
                index = IvfPqIndex::load(sa.index);
                man.input(sa.index);
                in.index = &*index;
                in.params = index->default_params;
            }
            in.params.k = sa.k;
            if (sa.nprobe) in.params.nprobe = sa.nprobe;
            if (!sa.rerank.empty()) in.params.rerank = parse_rerank(sa.rerank);
            if (!sa.model.empty()) {
                model = FfLmModel::load(sa.model);
                man.input(sa.model);
                in.model = &*model;
            }
            if (!sa.train.empty()) {
                train_tok = TokenSequence::load(sa.train);
                dev_tok = TokenSequence::load(sa.dev_tokens);
                man.input(sa.train);
                man.input(sa.dev_tokens);
                in.train = &*train_tok;
                in.dev_tokens = &*dev_tok;
            }
            in.index_per_size = sa.index_per_point;
            in.seed = sa.seed;
            in.ngram_discount = sa.discount;
            ExperimentGrid grid{ax, parse_list(sa.values)};
            const auto rows = run_sweep(grid, in);
            const std::string csv = sweep_csv(rows);
            write_text_file(sa.out, csv);
            man.write_for(sa.out);
            fmt::print("{}", csv);
        });
    }

    // ----------------------------------------------------------- experiment
    auto* exp_cmd = app.add_subcommand("experiment", "Analysis experiments")->require_subcommand(1);
    auto* exp_mem = exp_cmd->add_subcommand("memorization", "Dropout-free memorizing LM vs datastore");
    MemorizationConfig mem_cfg;
    mem_cfg.lm.dropout_rate = 0.3;
    std::string em_train, em_dev, em_vocab, em_prefix, em_tap = "post-layernorm";
    add_lm_options(exp_mem, mem_cfg.lm);
    exp_mem->add_option("--train", em_train)->required()->check(CLI::ExistingFile);
    exp_mem->add_option("--dev", em_dev)->required()->check(CLI::ExistingFile);
    exp_mem->add_option("--vocab", em_vocab)->required()->check(CLI::ExistingFile);
    exp_mem->add_option("--k", mem_cfg.k)->capture_default_str();
    exp_mem->add_option("--tap", em_tap)->capture_default_str();
    exp_mem->add_option("--out-prefix", em_prefix, "Writes <prefix>curves.csv and <prefix>summary.txt")->required();
    exp_mem->callback([&] {
        Manifest man(exp_mem, "experiment memorization");
        man.input(em_train);
        man.input(em_dev);
        man.input(em_vocab);
        man.seed(mem_cfg.lm.seed);
        mem_cfg.lm.vocab_size = vocab_size_of(em_vocab);
        mem_cfg.tap = parse_tap(em_tap);
        const auto r =
            memorization_experiment(TokenSequence::load(em_train), TokenSequence::load(em_dev), mem_cfg);
        write_text_file(em_prefix + "curves.csv", r.curves_csv());
        write_text_file(em_prefix + "summary.txt", r.to_text());
        man.write_for(em_prefix + "curves.csv");
        man.write_for(em_prefix + "summary.txt");
        fmt::print("{}", r.to_text());
    });

    auto* exp_da = exp_cmd->add_subcommand("domain-adapt", "Out-of-domain LM with an in-domain datastore");
    DomainAdaptConfig da_cfg;
    da_cfg.params.k = 256;
    std::string ed_a, ed_b, ed_dev, ed_vocab, ed_out, ed_tap = "post-layernorm";
    add_lm_options(exp_da, da_cfg.lm);
    exp_da->add_option("--train-a", ed_a, "LM training tokens (domain A)")->required()->check(CLI::ExistingFile);
    exp_da->add_option("--train-b", ed_b, "Datastore tokens (domain B)")->required()->check(CLI::ExistingFile);
    exp_da->add_option("--dev-b", ed_dev, "Dev tokens (domain B)")->required()->check(CLI::ExistingFile);
    exp_da->add_option("--vocab", ed_vocab, "Vocabulary covering both domains")->required()
        ->check(CLI::ExistingFile);
    exp_da->add_option("--k", da_cfg.params.k)->capture_default_str();
    exp_da->add_option("--tap", ed_tap)->capture_default_str();
    exp_da->add_flag("--index", da_cfg.use_index, "Search through desk-scaled IVF-PQ indexes");
    exp_da->add_option("--out", ed_out, "CSV output")->required();
    exp_da->callback([&] {
        Manifest man(exp_da, "experiment domain-adapt");
        for (const auto* p : {&ed_a, &ed_b, &ed_dev, &ed_vocab}) man.input(*p);
        man.seed(da_cfg.lm.seed);
        da_cfg.lm.vocab_size = vocab_size_of(ed_vocab);
        da_cfg.tap = parse_tap(ed_tap);
        const auto r = domain_adaptation_experiment(TokenSequence::load(ed_a), TokenSequence::load(ed_b),
                                                    TokenSequence::load(ed_dev), da_cfg);
        write_text_file(ed_out, r.to_csv());
        man.write_for(ed_out);
        fmt::print("{}", r.to_text());
    });

    // -------------------------------------------------------------- inspect
    auto* insp_cmd = app.add_subcommand("inspect", "Qualitative tools")->require_subcommand(1);
    auto* insp_nb = insp_cmd->add_subcommand("neighbors", "Nearest training contexts of a text");
    std::string in_model, in_vocab, in_ds, in_tokens, in_index, in_context, in_tap = "post-layernorm";
    std::size_t in_k = 8, in_snippet = 12;
    insp_nb->add_option("--model", in_model)->required()->check(CLI::ExistingFile);
    insp_nb->add_option("--vocab", in_vocab)->required()->check(CLI::ExistingFile);
    insp_nb->add_option("--datastore", in_ds)->required()->check(CLI::ExistingFile);
    insp_nb->add_option("--tokens", in_tokens, "Token file the datastore was built from")->required();
    insp_nb->add_option("--index", in_index)->check(CLI::ExistingFile);
    insp_nb->add_option("--context", in_context)->required();
    insp_nb->add_option("--k", in_k)->capture_default_str();
    insp_nb->add_option("--tap", in_tap)->capture_default_str();
    insp_nb->add_option("--snippet", in_snippet, "Training tokens shown before each target")->capture_default_str();
    insp_nb->callback([&] {
        require(fs::exists(in_tokens), ErrorCode::Io, "token file not found: " + in_tokens);
        const auto model = FfLmModel::load(in_model);
        const auto ds = load_datastore(in_ds);
        std::optional<IvfPqIndex> index;
        if (!in_index.empty()) index = IvfPqIndex::load(in_index);
        const auto rows = inspect_neighbors(model, Vocab::load(in_vocab), ds, TokenSequence::load(in_tokens),
                                            index ? &*index : nullptr, in_context, in_k, parse_tap(in_tap),
                                            in_snippet);
        fmt::print("{}", render_neighbor_table(rows));
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::fprintf(stderr, "error [%s]: %s\n", error_code_name(e.code()), e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
