#include "knnlm/datastore.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>

namespace knnlm {

MappedFile::MappedFile(const std::string& path) {
    const int fd = ::open(path.c_str(), O_RDONLY);
    require(fd >= 0, ErrorCode::Io, "cannot open " + path + ": " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
        ::close(fd);
        fail(ErrorCode::Io, "cannot stat " + path);
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
        void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
        if (p == MAP_FAILED) {
            ::close(fd);
            fail(ErrorCode::Io, "mmap failed for " + path + ": " + std::strerror(errno));
        }
        data_ = static_cast<const std::uint8_t*>(p);
    }
    ::close(fd);
}

MappedFile::~MappedFile() {
    if (data_) ::munmap(const_cast<std::uint8_t*>(data_), size_);
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kDatastoreVersion = 1;
constexpr std::uint8_t kModeDatastore = 0;
constexpr std::uint8_t kModeTrace = 1;

struct Owned {
    std::vector<float> keys;
    std::vector<TokenId> values;
};

struct Header {
    std::uint32_t dim = 0;
    std::uint64_t count = 0;
    std::uint8_t mode = 0;
    Provenance prov;
};

void write_header(BinaryWriter& w, const Header& h) {
    w.bytes("NLMD", 4);
    w.pod<std::uint32_t>(kDatastoreVersion);
    w.pod<std::uint32_t>(h.dim);
    w.pod<std::uint64_t>(h.count);
    w.pod<std::uint8_t>(h.mode);
    w.pod<std::uint8_t>(h.prov.tap);
    w.pod<std::uint16_t>(0);
    w.pod<std::uint64_t>(h.prov.model_hash);
    w.pod<std::uint64_t>(h.prov.corpus_hash);
}

Header read_header(BinaryReader& r, const std::string& path, std::size_t file_size) {
    r.expect_magic("NLMD");
    Header h;
    const auto version = r.pod<std::uint32_t>();
    require(version == kDatastoreVersion, ErrorCode::Format,
            path + ": unsupported datastore version " + std::to_string(version));
    h.dim = r.pod<std::uint32_t>();
    h.count = r.pod<std::uint64_t>();
    h.mode = r.pod<std::uint8_t>();
    h.prov.tap = r.pod<std::uint8_t>();
    r.pod<std::uint16_t>();
    h.prov.model_hash = r.pod<std::uint64_t>();
    h.prov.corpus_hash = r.pod<std::uint64_t>();
    require(h.mode == kModeDatastore || h.mode == kModeTrace, ErrorCode::Format,
            path + ": unknown mode " + std::to_string(h.mode));
    require(h.dim > 0 || h.count == 0, ErrorCode::Format, path + ": zero dimension");
    const std::uint64_t per_entry = 4ull * h.dim + 4 + (h.mode == kModeTrace ? 8 : 0);
    require(h.count <= (file_size - kDatastoreHeaderBytes) / std::max<std::uint64_t>(per_entry, 1),
            ErrorCode::Format, path + ": truncated file");
    require(kDatastoreHeaderBytes + h.count * per_entry == file_size, ErrorCode::Format,
            path + ": size does not match header (truncated or trailing bytes)");
    return h;
}

void check_values(std::span<const float> keys) {
    for (float k : keys) require(std::isfinite(k), ErrorCode::Format, "non-finite key entry");
}

}  // namespace

Datastore Datastore::from_vectors(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
                                  Provenance prov) {
    require(keys.size() == dim * values.size(), ErrorCode::DimensionMismatch,
            "datastore keys/values size mismatch");
    require(dim > 0 || values.empty(), ErrorCode::InvalidArgument, "datastore dimension must be positive");
    check_values(keys);
    auto owned = std::make_shared<Owned>();
    owned->keys = std::move(keys);
    owned->values = std::move(values);
    Datastore ds;
    ds.dim_ = dim;
    ds.keys_ = owned->keys;
    ds.values_ = owned->values;
    ds.owner_ = std::move(owned);
    ds.prov_ = prov;
    return ds;
}

std::uint64_t Datastore::content_hash() const {
    Fnv1a h;
    h.update(keys_);
    h.update(values_);
    return h.digest();
}

void EvalTrace::validate() const {
    require(keys.size() == targets.size() * dim && logp.size() == targets.size() &&
                doc_ids.size() == targets.size(),
            ErrorCode::DimensionMismatch, "eval trace arrays have inconsistent sizes");
    for (float lp : logp)
        require(std::isfinite(lp) && lp <= 0.0f, ErrorCode::Format, "eval trace log-prob must be finite and <= 0");
    check_values(keys);
    for (std::size_t i = 1; i < doc_ids.size(); ++i)
        require(doc_ids[i] >= doc_ids[i - 1], ErrorCode::Format, "eval trace doc ids must be non-decreasing");
}

Datastore build_datastore(const FfLmModel& model, const TokenSequence& seq, KeyTap tap) {
    model.check_tap(tap);
    seq.validate(model.config().vocab_size);
    const std::size_t d = model.dim();
    const WindowSet windows(seq, model.config().window());
    std::vector<float> keys(windows.size() * d);
    if (windows.size())
        model.extract_keys(std::span<const TokenId>(windows.context(0).data(),
                                                    windows.size() * windows.context_len()),
                           tap, keys);
    std::vector<TokenId> values(seq.ids.begin(), seq.ids.end());
    return Datastore::from_vectors(d, std::move(keys), std::move(values),
                                   {static_cast<std::uint8_t>(tap), model.hash(), seq.hash()});
}

Datastore subsample(const Datastore& ds, std::size_t m, std::uint64_t seed) {
    require(m > 0, ErrorCode::InvalidArgument, "subsample size must be positive");
    require(m <= ds.size(), ErrorCode::InvalidArgument,
            "subsample size " + std::to_string(m) + " exceeds datastore size " + std::to_string(ds.size()));
    const std::size_t N = ds.size(), d = ds.dim();
    // partial Fisher-Yates over the index permutation
    std::vector<std::size_t> idx(N);
    for (std::size_t i = 0; i < N; ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(N - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    std::vector<float> keys(m * d);
    std::vector<TokenId> values(m);
    for (std::size_t r = 0; r < m; ++r) {
        const auto k = ds.key(idx[r]);
        std::copy(k.begin(), k.end(), keys.begin() + r * d);
        values[r] = ds.value(idx[r]);
    }
    return Datastore::from_vectors(d, std::move(keys), std::move(values), ds.provenance());
}

void save_datastore(const Datastore& ds, const std::string& path) {
    BinaryWriter w(path);
    write_header(w, {static_cast<std::uint32_t>(ds.dim()), ds.size(), kModeDatastore, ds.provenance()});
    w.array(ds.keys());
    w.array(ds.values());
    w.close();
}

Datastore load_datastore(const std::string& path) {
    auto map = std::make_shared<MappedFile>(path);
    BinaryReader r(map->data(), map->size(), path);
    require(map->size() >= kDatastoreHeaderBytes, ErrorCode::Format, path + ": truncated header");
    const Header h = read_header(r, path, map->size());
    Datastore ds;
    ds.dim_ = h.dim;
    ds.prov_ = h.prov;
    const auto* base = map->data() + kDatastoreHeaderBytes;
    ds.keys_ = {reinterpret_cast<const float*>(base), static_cast<std::size_t>(h.count * h.dim)};
    ds.values_ = {reinterpret_cast<const TokenId*>(base + 4 * h.count * h.dim), static_cast<std::size_t>(h.count)};
    check_values(ds.keys_);
    ds.owner_ = std::move(map);
    ds.mapped_ = true;
    return ds;
}

void save_trace(const EvalTrace& trace, const std::string& path) {
    trace.validate();
    BinaryWriter w(path);
    write_header(w, {static_cast<std::uint32_t>(trace.dim), trace.size(), kModeTrace, trace.prov});
    w.array(std::span<const float>(trace.keys));
    w.array(std::span<const TokenId>(trace.targets));
    w.array(std::span<const float>(trace.logp));
    w.array(std::span<const std::uint32_t>(trace.doc_ids));
    w.close();
}

std::variant<Datastore, EvalTrace> import_trace(const std::string& path,
                                                std::optional<std::size_t> expected_dim) {
    std::variant<Datastore, EvalTrace> out;
    std::uint8_t mode;
    {
        const auto bytes = read_file(path);
        BinaryReader r(bytes.data(), bytes.size(), path);
        require(bytes.size() >= kDatastoreHeaderBytes, ErrorCode::Format, path + ": truncated header");
        const Header h = read_header(r, path, bytes.size());
        mode = h.mode;
        if (expected_dim)
            require(h.dim == *expected_dim, ErrorCode::DimensionMismatch,
                    path + ": key dimension " + std::to_string(h.dim) + " does not match expected " +
                        std::to_string(*expected_dim));
        if (mode == kModeTrace) {
            EvalTrace t;
            t.dim = h.dim;
            t.prov = h.prov;
            t.keys = r.array<float>(h.count * h.dim);
            t.targets = r.array<TokenId>(h.count);
            t.logp = r.array<float>(h.count);
            t.doc_ids = r.array<std::uint32_t>(h.count);
            t.validate();
            out = std::move(t);
        }
    }
    if (mode == kModeDatastore) out = load_datastore(path);
    return out;
}

}  // namespace knnlm
