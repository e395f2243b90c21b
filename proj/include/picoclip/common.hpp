#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace picoclip {

// Error taxonomy: shape mismatches, non-finite values, bad arguments, I/O.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error("value error: " + msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// splitmix64, used to derive independent RNG streams from (seed, tags...).
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = mix64(seed ^ 0x51c0ffeeULL);
    h = mix64(h ^ a);
    h = mix64(h ^ b);
    h = mix64(h ^ c);
    return h;
}

// Deterministic RNG. All randomness in the project flows through this wrapper
// so that draws are reproducible and generator state can be checkpointed.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1) with 53-bit resolution
    double uniform01() { return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // standard normal via Box-Muller (no cached spare, state stays simple)
    double normal() {
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // unbiased integer in [0, n) by rejection
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw ValueError("uniform_index: n must be positive");
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return static_cast<std::size_t>(x % n);
    }

    std::string save_state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        if (is.fail()) throw ValueError("Rng: malformed state string");
    }

private:
    std::mt19937_64 gen_;
};

std::string format_shape(const std::vector<std::size_t>& shape);

}  // namespace picoclip
