#pragma once

// Deterministic random streams. Every consumer derives its own stream from
// (seed, purpose, index...) so that changing how work is batched or packed
// never shifts another consumer's noise.

#include "flexdit/common.hpp"

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace flexdit {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-style key derivation: mixes a seed with an ordered list of ids.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t id : ids) h = splitmix64(h ^ splitmix64(id + 0x632be59bd9b4e019ULL));
    return h;
}

// Stream ids used with derive_seed.
enum class Stream : std::uint64_t {
    initial_noise = 1,
    step_noise = 2,
    train_batch = 3,
    train_noise = 4,
    train_timestep = 5,
    init_weights = 6,
    dataset = 7,
    probe = 8,
    bootstrap = 9,
};

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // mt19937_64 output is fully specified by the standard; the transforms
    // below are ours so results do not depend on the library's distributions.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }

    Mat normal_matrix(Index rows, Index cols, double stddev = 1.0) {
        Mat m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal();
        return m;
    }

    Mat uniform_matrix(Index rows, Index cols, double lo, double hi) {
        Mat m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * uniform();
        return m;
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace flexdit
