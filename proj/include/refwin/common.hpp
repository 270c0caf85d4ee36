#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace refwin {

// Numeric failure carrying enough context to locate the blow-up (step index,
// tensor name). CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class GenerationError : public std::runtime_error {
public:
    explicit GenerationError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Deterministic RNG. mt19937_64 is bit-exact across platforms; the gaussian
// uses an explicit Box-Muller so results do not depend on the standard
// library's distribution implementation.
struct Rng {
    std::uint64_t state_seed = 0;
    std::mt19937_64 eng;

    Rng() : Rng(0) {}
    explicit Rng(std::uint64_t seed) : state_seed(seed), eng(seed) {}

    std::uint64_t bits() { return eng(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(eng() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(eng() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double gauss() {
        double u1 = uniform(), u2 = uniform();
        if (u1 <= 0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }
};

// Derive a stream seed from a base seed and indices. splitmix64 mixing.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Static partition so results never depend on scheduling.
inline void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t, int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    int tc = std::min<std::int64_t>(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(tc);
    for (int t = 0; t < tc; ++t) {
        pool.emplace_back([=, &fn]() {
            for (std::int64_t i = t; i < n; i += tc) fn(i, t);
        });
    }
    for (auto& th : pool) th.join();
}

inline int default_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace refwin
