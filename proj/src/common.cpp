#include "knnlm/common.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace knnlm {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "invalid argument";
        case ErrorCode::EmptyInput: return "empty input";
        case ErrorCode::Format: return "format error";
        case ErrorCode::Io: return "i/o error";
        case ErrorCode::DimensionMismatch: return "dimension mismatch";
        case ErrorCode::Diverged: return "training diverged";
    }
    return "error";
}

void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) {
    std::uint64_t st = seed;
    for (auto& s : s_) s = splitmix64(st);
}

// xoshiro256**
std::uint64_t Rng::next_u64() {
    const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = std::rotl(s_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t st = seed ^ (stream * 0xd1b54a32d192ed03ULL);
    splitmix64(st);
    return splitmix64(st);
}

void Fnv1a::update(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ULL;
    }
}

std::uint64_t hash_file(const std::string& path) {
    const auto bytes = read_file(path);
    Fnv1a h;
    h.update(bytes.data(), bytes.size());
    return h.digest();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t initial_threads() {
    if (const char* env = std::getenv("NLM_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::atomic<std::size_t> g_threads{initial_threads()};

}  // namespace

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    grain = std::max<std::size_t>(1, grain);
    const std::size_t chunks = (n + grain - 1) / grain;
    const std::size_t workers = std::min(num_threads(), chunks);
    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c)
            body(c * grain, std::min(n, (c + 1) * grain));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= chunks) return;
            try {
                body(c * grain, std::min(n, (c + 1) * grain));
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

// ---------------------------------------------------------------------------

BinaryWriter::BinaryWriter(const std::string& path) : path_(path) {
    f_ = std::fopen(path.c_str(), "wb");
    require(f_ != nullptr, ErrorCode::Io, "cannot open for writing: " + path);
}

BinaryWriter::~BinaryWriter() {
    if (f_) std::fclose(f_);
}

void BinaryWriter::bytes(const void* data, std::size_t n) {
    if (n == 0) return;
    require(std::fwrite(data, 1, n, f_) == n, ErrorCode::Io, "short write: " + path_);
}

void BinaryWriter::close() {
    if (!f_) return;
    const int rc = std::fclose(f_);
    f_ = nullptr;
    require(rc == 0, ErrorCode::Io, "close failed: " + path_);
}

void BinaryReader::bytes(void* out, std::size_t n) {
    require(n <= remaining(), ErrorCode::Format, what_ + ": truncated file");
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
}

void BinaryReader::skip(std::size_t n) {
    require(n <= remaining(), ErrorCode::Format, what_ + ": truncated file");
    pos_ += n;
}

void BinaryReader::expect_magic(const char (&magic)[5]) {
    char got[4];
    require(remaining() >= 4, ErrorCode::Format, what_ + ": truncated header");
    bytes(got, 4);
    require(std::memcmp(got, magic, 4) == 0, ErrorCode::Format,
            what_ + ": bad magic (expected " + std::string(magic, 4) + ")");
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot open: " + path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> data(size);
    if (size) in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
    require(static_cast<bool>(in), ErrorCode::Io, "read failed: " + path);
    return data;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot open for writing: " + path);
    out << text;
    require(static_cast<bool>(out), ErrorCode::Io, "write failed: " + path);
}

}  // namespace knnlm
