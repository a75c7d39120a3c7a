#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace gren {

/// Deterministic random source. mt19937_64 supplies the bits; every
/// distribution on top is hand-rolled so streams are identical across
/// standard libraries (std::uniform_real_distribution etc. are
/// implementation-defined).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t bits() { return gen_(); }

    // [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0,n), rejection-sampled.
    std::uint64_t bounded(std::uint64_t n);

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace gren
