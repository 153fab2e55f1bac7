#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "knnlm/corpus.hpp"
#include "knnlm/neural_lm.hpp"

namespace knnlm {

/// Read-only memory mapping of a whole file.
class MappedFile {
public:
    explicit MappedFile(const std::string& path);
    ~MappedFile();
    MappedFile(const MappedFile&) = delete;
    MappedFile& operator=(const MappedFile&) = delete;

    const std::uint8_t* data() const { return data_; }
    std::size_t size() const { return size_; }

private:
    const std::uint8_t* data_ = nullptr;
    std::size_t size_ = 0;
};

inline constexpr std::uint8_t kExternalTap = 0xff;

struct Provenance {
    std::uint8_t tap = kExternalTap;
    std::uint64_t model_hash = 0;
    std::uint64_t corpus_hash = 0;

    bool operator==(const Provenance&) const = default;
};

/// Key-value store: row i of keys is the representation of context i, value i
/// the token that followed it. Immutable; copies share storage.
class Datastore {
public:
    Datastore() = default;
    static Datastore from_vectors(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
                                  Provenance prov = {});

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }
    std::span<const float> keys() const { return keys_; }
    std::span<const float> key(std::size_t i) const { return keys_.subspan(i * dim_, dim_); }
    std::span<const TokenId> values() const { return values_; }
    TokenId value(std::size_t i) const { return values_[i]; }
    const Provenance& provenance() const { return prov_; }
    /// True when keys point into a memory-mapped file.
    bool is_mapped() const { return mapped_; }

    std::uint64_t content_hash() const;

private:
    friend Datastore load_datastore(const std::string& path);

    std::size_t dim_ = 0;
    std::shared_ptr<const void> owner_;
    std::span<const float> keys_;
    std::span<const TokenId> values_;
    Provenance prov_;
    bool mapped_ = false;
};

/// Per-position evaluation records: key, target and base-LM log p(target).
struct EvalTrace {
    std::size_t dim = 0;
    std::vector<float> keys;      // size() x dim
    std::vector<TokenId> targets;
    std::vector<float> logp;      // natural log, <= 0
    std::vector<std::uint32_t> doc_ids;
    Provenance prov;

    std::size_t size() const { return targets.size(); }
    std::span<const float> key(std::size_t i) const { return {keys.data() + i * dim, dim}; }
    void validate() const;
};

/// One forward pass over seq: entry i is (key of window i, token i).
Datastore build_datastore(const FfLmModel& model, const TokenSequence& seq, KeyTap tap);

/// Uniform sample of m entries without replacement; kept entries retain their
/// original relative order.
Datastore subsample(const Datastore& ds, std::size_t m, std::uint64_t seed);

void save_datastore(const Datastore& ds, const std::string& path);
/// Memory-maps the file; accepts datastore (mode 0) and eval-trace (mode 1) files.
Datastore load_datastore(const std::string& path);

void save_trace(const EvalTrace& trace, const std::string& path);

/// Reads a datastore or eval-trace file. When expected_dim is set, a file of
/// another width is rejected.
std::variant<Datastore, EvalTrace> import_trace(const std::string& path,
                                                std::optional<std::size_t> expected_dim = std::nullopt);

/// Byte size of the fixed file header.
inline constexpr std::size_t kDatastoreHeaderBytes = 40;

}  // namespace knnlm
