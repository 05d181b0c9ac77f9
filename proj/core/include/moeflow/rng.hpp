#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace moeflow {

/// Deterministic random source used everywhere in the library.
///
/// Algorithm (fixed for the whole project): the raw stream is std::mt19937_64,
/// whose output sequence is pinned by the C++ standard, so equal seeds give
/// equal 64-bit streams on every platform. Derived draws:
///   uniform():  (u64 >> 11) * 2^-53, in [0, 1)
///   normal():   Marsaglia polar transform of two uniforms (second value cached)
///   permutation(): Fisher-Yates driven by below(n)
/// Substreams come from fork(tag): seed' = splitmix64(seed ^ splitmix64(tag)),
/// so streams for different tags are decorrelated and reproducible.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal draw (Marsaglia polar method).
    double normal();

    /// Unbiased integer in [0, n); rejection sampling on the raw stream.
    std::uint64_t below(std::uint64_t n);

    /// Uniformly random permutation of {0, .., n-1} (Fisher-Yates).
    std::vector<std::size_t> permutation(std::size_t n);

    /// Independent substream for (seed, tag); deterministic.
    Rng fork(std::uint64_t tag) const;

    /// Full state as text (engine state plus the cached normal spare), for
    /// checkpointing mid-stream. Restoring reproduces the draw sequence
    /// bit-exactly.
    std::string state_string() const;
    void set_state_string(const std::string& s);

    static std::uint64_t splitmix64(std::uint64_t x);

  private:
    std::uint64_t seed_ = 0;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Random permutation of {1, .., n}; one-based because neuron indices are
/// one-based in expert subset records. Throws on n == 0.
std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng);

}  // namespace moeflow
