#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace knnlm {

using TokenId = std::uint32_t;

enum class ErrorCode {
    InvalidArgument,
    EmptyInput,
    Format,
    Io,
    DimensionMismatch,
    Diverged,
};

const char* error_code_name(ErrorCode code);

/// Every failure surfaced by the library carries one of these codes so the
/// CLI can map it to a stable message and exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& what);

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

// ---------------------------------------------------------------------------
// Random numbers. All sampling goes through this wrapper so streams are
// identical across standard library implementations.

std::uint64_t splitmix64(std::uint64_t& state);

class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). Rejection sampling, unbiased.
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller.
    double normal();

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derive an independent seed for a named sub-stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64 bit). Used for provenance and manifests only.

class Fnv1a {
public:
    void update(const void* data, std::size_t n);
    template <class T>
    void update(std::span<const T> s) { update(s.data(), s.size_bytes()); }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::uint64_t hash_file(const std::string& path);
std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// Parallelism. Work is split into fixed chunks whose boundaries depend only
// on the problem size, so any per-index result is independent of the thread
// count.

void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Calls body(begin, end) over [0, n) in chunks of `grain`.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body);

/// Pairwise (tree) summation in double. Result depends only on the values.
double pairwise_sum(std::span<const double> values);

// ---------------------------------------------------------------------------
// Little-endian binary I/O helpers.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path);
    ~BinaryWriter();
    BinaryWriter(const BinaryWriter&) = delete;
    BinaryWriter& operator=(const BinaryWriter&) = delete;

    void bytes(const void* data, std::size_t n);
    template <class T>
    void pod(const T& v) { bytes(&v, sizeof(T)); }
    template <class T>
    void array(std::span<const T> s) { bytes(s.data(), s.size_bytes()); }
    void close();

private:
    std::FILE* f_ = nullptr;
    std::string path_;
};

class BinaryReader {
public:
    BinaryReader(const std::uint8_t* data, std::size_t size, std::string what)
        : data_(data), size_(size), what_(std::move(what)) {}

    void bytes(void* out, std::size_t n);
    template <class T>
    T pod() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    template <class T>
    std::vector<T> array(std::size_t count) {
        require(count <= remaining() / sizeof(T), ErrorCode::Format,
                what_ + ": truncated file");
        std::vector<T> v(count);
        bytes(v.data(), count * sizeof(T));
        return v;
    }
    void expect_magic(const char (&magic)[5]);
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }
    const std::uint8_t* cursor() const { return data_ + pos_; }
    void skip(std::size_t n);

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::vector<std::uint8_t> read_file(const std::string& path);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace knnlm
