#pragma once

#include <cstdint>
#include <string>

namespace knnlm {

/// Deterministic generators for the bundled desk-scale corpora.
///
/// Encyclopedic text is organised as articles about entities. Each entity owns
/// a fixed set of facts (birthplace, year, occupation, ...) that recur across
/// several articles, interleaved with grammar-generated filler. Held-out
/// splits are whole articles about the same entity population, so rare facts
/// seen in training reappear at evaluation time. Narrative text uses a
/// different lexicon and sentence templates but shares function words.
enum class SynthDomain { Encyclopedic, Narrative };

struct SynthOptions {
    SynthDomain domain = SynthDomain::Encyclopedic;
    std::size_t train_tokens = 200'000;
    std::size_t valid_tokens = 10'000;
    std::size_t test_tokens = 10'000;
    std::size_t entities = 400;
    /// Size of each open-class filler pool (nouns, verbs, adjectives).
    std::size_t filler_pool = 120;
    /// Probability that a sentence is a fact sentence rather than filler.
    double fact_rate = 0.5;
    /// Sentences per document after the opening one, uniform in [min, max].
    std::size_t min_sentences = 6;
    std::size_t max_sentences = 13;
    std::uint64_t seed = 1;
};

struct SynthCorpus {
    std::string train;
    std::string valid;
    std::string test;
};

SynthCorpus generate_synthetic(const SynthOptions& opts);

}  // namespace knnlm
