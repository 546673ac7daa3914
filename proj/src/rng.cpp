#include "countgen/rng.hpp"

#include <cmath>
#include <limits>

namespace countgen {

std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t i0,
                          std::uint64_t i1, std::uint64_t i2) {
    std::uint64_t state = root ^ 0x6a09e667f3bcc908ULL;
    splitmix64(state);
    for (unsigned char ch : purpose) {
        state ^= ch;
        splitmix64(state);
    }
    state ^= i0;
    splitmix64(state);
    state ^= i1;
    splitmix64(state);
    state ^= i2;
    return splitmix64(state);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t rem = (max % n + 1) % n;
    const std::uint64_t limit = max - rem;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x > limit);
    return x % n;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

}  // namespace countgen
