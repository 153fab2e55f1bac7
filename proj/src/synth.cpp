#include "knnlm/synth.hpp"

#include <algorithm>
#include <array>
#include <span>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "knnlm/common.hpp"

namespace knnlm {

namespace {

constexpr std::array<std::string_view, 24> kOnsets = {
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
    "v", "z", "br", "dr", "kl", "gr", "st", "th", "sh", "ch", "tr", "pl"};
constexpr std::array<std::string_view, 8> kVowels = {"a", "e", "i", "o", "u", "ai", "ou", "ei"};
constexpr std::array<std::string_view, 8> kCodas = {"", "", "", "n", "r", "s", "l", "m"};

class Lexicon {
public:
    explicit Lexicon(Rng& rng) : rng_(rng) {}

    std::vector<std::string> pool(std::size_t n, std::size_t min_syl, std::size_t max_syl) {
        std::vector<std::string> out;
        out.reserve(n);
        while (out.size() < n) {
            const std::size_t syl = min_syl + rng_.below(max_syl - min_syl + 1);
            std::string w;
            for (std::size_t i = 0; i < syl; ++i) {
                w += kOnsets[rng_.below(kOnsets.size())];
                w += kVowels[rng_.below(kVowels.size())];
            }
            w += kCodas[rng_.below(kCodas.size())];
            if (used_.insert(w).second) out.push_back(std::move(w));
        }
        return out;
    }

private:
    Rng& rng_;
    std::unordered_set<std::string> used_;
};

/// Zipf(1) sampler over a fixed list.
class ZipfPool {
public:
    ZipfPool() = default;
    explicit ZipfPool(std::vector<std::string> words) : words_(std::move(words)) {
        double acc = 0.0;
        for (std::size_t r = 0; r < words_.size(); ++r) {
            acc += 1.0 / static_cast<double>(r + 1);
            cdf_.push_back(acc);
        }
    }
    const std::string& sample(Rng& rng) const {
        const double u = rng.uniform() * cdf_.back();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        const auto idx = std::min<std::size_t>(it - cdf_.begin(), words_.size() - 1);
        return words_[idx];
    }
    const std::string& operator[](std::size_t i) const { return words_[i]; }
    std::size_t size() const { return words_.size(); }

private:
    std::vector<std::string> words_;
    std::vector<double> cdf_;
};

const std::string& pick(const std::vector<std::string>& v, Rng& rng) { return v[rng.below(v.size())]; }

struct Entity {
    std::string name;
    std::array<std::string, 8> slot;  // attribute values, meaning depends on domain
};

class Generator {
public:
    explicit Generator(const SynthOptions& opts)
        : opts_(opts), rng_(derive_seed(opts.seed, opts.domain == SynthDomain::Encyclopedic ? 11 : 23)) {
        Lexicon lex(rng_);
        const std::size_t fp = std::max<std::size_t>(opts.filler_pool, 8);
        nouns_ = ZipfPool(lex.pool(fp, 1, 2));
        verbs_ = ZipfPool(lex.pool(std::max<std::size_t>(fp / 2, 4), 1, 2));
        adjs_ = ZipfPool(lex.pool(std::max<std::size_t>(fp / 2, 4), 2, 2));
        const std::size_t ne = std::max<std::size_t>(opts.entities, 2);
        names_ = lex.pool(ne, 2, 3);
        places_ = lex.pool(std::max<std::size_t>(ne / 6, 4), 2, 3);
        groups_ = lex.pool(std::max<std::size_t>(ne / 10, 4), 3, 3);
        works_ = lex.pool(std::max<std::size_t>(ne / 2, 4), 3, 4);
        for (int y = 0; y < 120; ++y) years_.push_back(std::to_string(1800 + y));
        make_entities();
    }

    std::string split(std::size_t budget, bool cyclic) {
        std::string out;
        std::size_t tokens = 0;
        std::vector<std::size_t> order(entities_.size());
        std::size_t cursor = order.size();
        while (tokens < budget) {
            std::size_t e;
            if (cyclic) {
                if (cursor == order.size()) {
                    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                    rng_.shuffle(order);
                    cursor = 0;
                }
                e = order[cursor++];
            } else {
                e = rng_.below(entities_.size());
            }
            std::vector<std::string> doc;
            document(e, doc);
            if (!out.empty()) out += "\n\n";
            for (std::size_t i = 0; i < doc.size(); ++i) {
                if (i) out += ' ';
                out += doc[i];
            }
            tokens += doc.size();
        }
        out += '\n';
        return out;
    }

private:
    void make_entities() {
        entities_.resize(names_.size());
        for (std::size_t i = 0; i < entities_.size(); ++i) {
            auto& e = entities_[i];
            e.name = names_[i];
            e.slot[0] = pick(places_, rng_);
            e.slot[1] = pick(years_, rng_);
            e.slot[2] = opts_.domain == SynthDomain::Encyclopedic ? roles_[rng_.below(roles_.size())]
                                                                  : objects_[rng_.below(objects_.size())];
            e.slot[3] = pick(groups_, rng_);
            e.slot[4] = pick(works_, rng_);
            e.slot[5] = names_[(i + 1 + rng_.below(names_.size() - 1)) % names_.size()];
            e.slot[6] = pick(places_, rng_);
            e.slot[7] = pick(years_, rng_);
        }
    }

    static void emit(std::vector<std::string>& doc, std::initializer_list<std::string_view> words) {
        for (auto w : words) doc.emplace_back(w);
    }

    void fact(std::size_t idx, const Entity& e, std::vector<std::string>& doc) {
        const std::string& n = e.name;
        if (opts_.domain == SynthDomain::Encyclopedic) {
            switch (idx % 6) {
                case 0: emit(doc, {n, "was", "born", "in", e.slot[0], "in", e.slot[1], "."}); break;
                case 1: emit(doc, {n, "worked", "as", "a", e.slot[2], "for", "the", e.slot[3], "."}); break;
                case 2: emit(doc, {n, "is", "best", "known", "for", "the", e.slot[4], "."}); break;
                case 3: emit(doc, {"in", e.slot[7], n, "moved", "to", e.slot[6], "."}); break;
                case 4: emit(doc, {n, "married", e.slot[5], "in", e.slot[6], "."}); break;
                default: emit(doc, {"the", e.slot[4], "was", "written", "by", n, "."}); break;
            }
        } else {
            switch (idx % 6) {
                case 0: emit(doc, {n, "lived", "in", "the", e.slot[0], "near", "the", e.slot[6], "."}); break;
                case 1: emit(doc, {n, "always", "carried", "the", e.slot[2], "."}); break;
                case 2: emit(doc, {"\"", "where", "is", "the", e.slot[2], "?", "\"", "asked", n, "."}); break;
                case 3: emit(doc, {n, "and", e.slot[5], "walked", "to", "the", e.slot[0], "."}); break;
                case 4: emit(doc, {n, "sang", "of", "the", e.slot[3], "."}); break;
                default: emit(doc, {"the", e.slot[4], "belonged", "to", n, "."}); break;
            }
        }
    }

    void filler(std::vector<std::string>& doc) {
        if (opts_.domain == SynthDomain::Encyclopedic) {
            switch (rng_.below(4)) {
                case 0:
                    emit(doc, {"the", adjs_.sample(rng_), nouns_.sample(rng_), verbs_.sample(rng_), "the",
                               nouns_.sample(rng_), "."});
                    break;
                case 1:
                    emit(doc, {"a", nouns_.sample(rng_), "of", "the", nouns_.sample(rng_), "was",
                               adjs_.sample(rng_), "."});
                    break;
                case 2:
                    emit(doc, {"it", verbs_.sample(rng_), pick(preps_, rng_), "the", adjs_.sample(rng_),
                               nouns_.sample(rng_), "."});
                    break;
                default:
                    emit(doc, {pick(prons_, rng_), verbs_.sample(rng_), "the", nouns_.sample(rng_),
                               pick(preps_, rng_), "a", nouns_.sample(rng_), "."});
                    break;
            }
        } else {
            switch (rng_.below(4)) {
                case 0:
                    emit(doc, {pick(prons_, rng_), verbs_.sample(rng_), "at", "the", nouns_.sample(rng_), "and",
                               verbs_.sample(rng_), "."});
                    break;
                case 1:
                    emit(doc, {pick(prons_, rng_), verbs_.sample(rng_), "the", adjs_.sample(rng_),
                               nouns_.sample(rng_), "."});
                    break;
                case 2:
                    emit(doc, {"the", nouns_.sample(rng_), "was", adjs_.sample(rng_), "and",
                               adjs_.sample(rng_), "."});
                    break;
                default:
                    emit(doc, {"\"", pick(interj_, rng_), ",", "\"", "said", pick(names_, rng_), "."});
                    break;
            }
        }
    }

    void document(std::size_t e_idx, std::vector<std::string>& doc) {
        const Entity& e = entities_[e_idx];
        // opening sentence names the subject
        if (opts_.domain == SynthDomain::Encyclopedic)
            emit(doc, {e.name, "is", "a", e.slot[2], "from", e.slot[0], "."});
        else
            emit(doc, {"this", "is", "the", "story", "of", e.name, "."});
        const std::size_t sentences =
            opts_.min_sentences + rng_.below(opts_.max_sentences - opts_.min_sentences + 1);
        for (std::size_t s = 0; s < sentences; ++s) {
            if (rng_.uniform() < opts_.fact_rate)
                fact(rng_.below(6), e, doc);
            else
                filler(doc);
        }
    }

    SynthOptions opts_;
    Rng rng_;
    ZipfPool nouns_, verbs_, adjs_;
    std::vector<std::string> names_, places_, groups_, works_, years_;
    std::vector<std::string> roles_ = {"painter", "writer", "soldier", "farmer", "sailor", "priest",
                                       "doctor", "singer", "teacher", "judge", "merchant", "poet"};
    std::vector<std::string> objects_ = {"lamp", "knife", "ring", "map", "coin", "book",
                                         "key", "rope", "cup", "bell", "flute", "mirror"};
    std::vector<std::string> preps_ = {"with", "from", "under", "over", "near", "after"};
    std::vector<std::string> prons_ = {"he", "she", "they", "we"};
    std::vector<std::string> interj_ = {"yes", "no", "well", "look", "wait", "come"};
    std::vector<Entity> entities_;
};

}  // namespace

SynthCorpus generate_synthetic(const SynthOptions& opts) {
    require(opts.train_tokens > 0, ErrorCode::InvalidArgument, "train_tokens must be positive");
    require(opts.min_sentences <= opts.max_sentences, ErrorCode::InvalidArgument,
            "min_sentences must not exceed max_sentences");
    require(opts.entities >= 2 && opts.filler_pool >= 1, ErrorCode::InvalidArgument,
            "need at least 2 entities and a non-empty filler pool");
    Generator gen(opts);
    SynthCorpus c;
    c.train = gen.split(opts.train_tokens, true);
    c.valid = opts.valid_tokens ? gen.split(opts.valid_tokens, false) : std::string();
    c.test = opts.test_tokens ? gen.split(opts.test_tokens, false) : std::string();
    return c;
}

}  // namespace knnlm
