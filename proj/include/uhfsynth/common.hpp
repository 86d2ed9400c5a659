#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uhfsynth {

/// Scalar type of every tensor, metric and statistic. Double is the
/// correctness contract; all frozen test values assume it.
using real = double;

class Error : public std::runtime_error {
public:
    explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename T, typename... Rest>
void msg_append(std::ostringstream& oss, T&& head, Rest&&... rest) {
    oss << std::forward<T>(head);
    msg_append(oss, std::forward<Rest>(rest)...);
}
} // namespace detail

template <typename... Parts>
std::string make_msg(Parts&&... parts) {
    std::ostringstream oss;
    detail::msg_append(oss, std::forward<Parts>(parts)...);
    return oss.str();
}

template <typename... Parts>
[[noreturn]] void fail(Parts&&... parts) {
    throw Error(make_msg(std::forward<Parts>(parts)...));
}

template <typename... Parts>
void check(bool cond, Parts&&... parts) {
    if (!cond) fail(std::forward<Parts>(parts)...);
}

inline constexpr real kPi = 3.14159265358979323846;

/// Locale-independent float formatting for CSV / config echo.
/// %.17g round-trips doubles exactly.
inline std::string fmt_real(real v, int sig = 9) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.*g", sig, v);
    return buf;
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// std::mt19937 is portable but its distributions are not; everything random
// in this project (init, phantoms, shuffles, flips) goes through this
// splitmix64 stream so byte-identical reruns hold on any platform.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    real uniform() { return static_cast<real>(next_u64() >> 11) * 0x1.0p-53; }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n). n must be > 0.
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (single sample, no cache, so the
    /// stream state is always exactly two draws per call).
    real normal() {
        real u1 = uniform();
        real u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    uint64_t state() const { return state_; }
    void restore(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

/// Hierarchical sub-seed derivation: one splitmix step over mixed inputs.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    Rng r(a ^ (b * 0x9e3779b97f4a7c15ull) ^ 0x5851f42d4c957f2dull);
    return r.next_u64();
}

// ---------------------------------------------------------------------------
// Thread control. Parallel loops all run with one writer per output element,
// so results are bit-identical for any thread count.
// ---------------------------------------------------------------------------

inline int& thread_count_ref() {
    static int n = 0; // 0 = library default
    return n;
}

inline void set_threads(int n) {
    thread_count_ref() = n;
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#endif
}

inline int hardware_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation. conv2d and matmul add their exact MAC
// counts here; the closed-form FLOP model is cross-checked against it.
// ---------------------------------------------------------------------------

inline uint64_t& mac_counter_ref() {
    thread_local uint64_t count = 0;
    return count;
}

inline void reset_mac_counter() { mac_counter_ref() = 0; }
inline uint64_t mac_counter() { return mac_counter_ref(); }
inline void add_macs(uint64_t n) { mac_counter_ref() += n; }

} // namespace uhfsynth
