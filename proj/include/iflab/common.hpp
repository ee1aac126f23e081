#pragma once

// Shared plumbing: error taxonomy mapped to CLI exit codes, deterministic
// RNG with fully pinned distributions, checksums, small utilities.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

namespace iflab {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes used by the CLI. Library code throws; the CLI maps.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfigError = 2,
    kExitIntegrityError = 3,
    kExitNumericError = 4,
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// distribution shaping below is ours, so sequences never depend on the
// standard library's unspecified <random> distributions.
class Rng {
public:
    Rng() : gen_(0) {}
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [lo, hi], inclusive. Unbiased via rejection.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) throw ConfigError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<int64_t>(gen_());  // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call (the partner draw is discarded so the
    // stream position is a pure function of the call count).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Sample k distinct values from [0, n) in selection order.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k > n) throw ConfigError("sample_without_replacement: k > n");
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        std::vector<int> out;
        out.reserve(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            size_t j = static_cast<size_t>(uniform_int(i, n - 1));
            std::swap(pool[static_cast<size_t>(i)], pool[j]);
            out.push_back(pool[static_cast<size_t>(i)]);
        }
        return out;
    }

    std::string save_state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        if (!is) throw IntegrityError("Rng: malformed serialized state");
    }

private:
    std::mt19937_64 gen_;
};

// Named substream derivation so independent stages (init, shuffle, dropout,
// ...) never share a stream position.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t derive_seed(uint64_t base, const std::string& stream) {
    uint64_t h = fnv1a64(stream);
    h ^= base + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

inline uint64_t checksum_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IntegrityError("cannot open file for checksum: " + p.string());
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    }
    return h;
}

// Deterministic parallel map over [0, n): results are a function of the
// index only, so the output is identical for any thread count.
inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    size_t t_count = std::min<size_t>(static_cast<size_t>(threads), n);
    for (size_t t = 0; t < t_count; ++t) {
        pool.emplace_back([&, t]() {
            for (size_t i = t; i < n; i += t_count) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

inline std::string format_double(double v, int sig = 9) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", sig, v);
    return buf;
}

}  // namespace iflab
