#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tipformer {

using i64 = std::int64_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto stable exit codes:
//   UsageError/ConfigError/ShapeError -> 1, DataError/FormatError -> 2,
//   NumericError -> 3.
// ---------------------------------------------------------------------------

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : UsageError {
    explicit ConfigError(const std::string& msg) : UsageError(msg) {}
};

struct ShapeError : UsageError {
    explicit ShapeError(const std::string& msg) : UsageError(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InternalError : std::logic_error {
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

// ---------------------------------------------------------------------------
// Seeded random stream. All randomness in the library flows through this so
// that every operation is a deterministic function of (inputs, seed).
// Uniform doubles are derived from the raw 64-bit output instead of
// std::uniform_real_distribution, whose exact sequence is
// implementation-defined.
// ---------------------------------------------------------------------------

inline u64 splitmix64(u64 x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives independent stream seeds from one base seed.
inline u64 derive_seed(u64 base, u64 stream) {
    return splitmix64(base ^ splitmix64(stream + 0x51ed2701ULL));
}

// Label overload: FNV-1a over the label picks the stream number.
inline u64 derive_seed(u64 base, const std::string& label) {
    u64 h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return derive_seed(base, h);
}

class RngStream {
public:
    explicit RngStream(u64 seed) : engine_(splitmix64(seed)) {}

    u64 next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), n > 0
    u64 bounded(u64 n) {
        if (n == 0) throw InternalError("RngStream::bounded: n must be positive");
        return static_cast<u64>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (i64 i = static_cast<i64>(v.size()) - 1; i > 0; --i) {
            const u64 j = bounded(static_cast<u64>(i) + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

    std::string serialize_state() const;
    void restore_state(const std::string& text);

private:
    std::mt19937_64 engine_;
};

inline std::string RngStream::serialize_state() const {
    std::string out;
    // operator<< of mt19937_64 is specified by the standard: 312 space
    // separated decimal words plus the position.
    std::ostringstream ss;
    ss << engine_;
    out = ss.str();
    return out;
}

inline void RngStream::restore_state(const std::string& text) {
    std::istringstream ss(text);
    ss >> engine_;
    if (ss.fail()) throw FormatError("invalid RNG state string");
}

// ---------------------------------------------------------------------------
// Worker pool sizing. TIPFORMER_THREADS caps the read-only evaluation pool.
// ---------------------------------------------------------------------------

inline int worker_thread_count() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("TIPFORMER_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) hw = std::min<unsigned>(hw, static_cast<unsigned>(v));
    }
    return static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Results must be written into per-index slots by
// the caller so the output order is independent of the worker count.
template <typename Fn>
void parallel_for(i64 n, const Fn& fn) {
    const int workers = std::min<i64>(worker_thread_count(), n > 0 ? n : 1);
    if (workers <= 1) {
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    std::exception_ptr error;
    std::mutex error_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (i64 i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace tipformer
