#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace countgen {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Child seed from a root seed, a purpose tag, and up to three indices.
// Deterministic, so any (purpose, step, item) stream can be regenerated in
// isolation; this is what makes chunked training runs bit-identical to
// uninterrupted ones.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t i0 = 0,
                          std::uint64_t i1 = 0, std::uint64_t i2 = 0);

// mt19937_64 stream with explicit uniform/normal mappings; the standard
// distributions are implementation-defined, these are not.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), rejection sampled so every value is equally likely
    std::uint64_t uniform_int(std::uint64_t n);

    // standard normal via Box-Muller
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace countgen
