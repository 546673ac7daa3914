#pragma once

#include "countgen/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace countgen {

// Class-agnostic regression counter: four 3x3 conv layers (3->16->32->64->64,
// the first three at stride 2), global average pool, then a two-layer head
// ending in softplus so the estimate is nonnegative everywhere.
struct CounterParams {
    Tensor c1_w, c1_b;  // 3 -> 16, stride 2
    Tensor c2_w, c2_b;  // 16 -> 32, stride 2
    Tensor c3_w, c3_b;  // 32 -> 64, stride 2
    Tensor c4_w, c4_b;  // 64 -> 64
    Tensor f1_w, f1_b;  // 64 -> 32
    Tensor f2_w, f2_b;  // 32 -> 1

    std::vector<std::pair<std::string, Tensor*>> entries();
    std::int64_t param_count();
};

CounterParams init_counter(std::uint64_t seed);
CounterParams frozen(const CounterParams& p);

// Differentiable scalar count estimate; inputs outside [0,1] are legal since
// predicted clean images overshoot at early timesteps.
Tensor count_forward(const CounterParams& params, const Tensor& image);

struct CountTarget {
    int n = 1;
    int n_off = 0;
    int effective() const { return n + n_off; }
};

// |(count - target)/target|^2 on a plain scalar; shared by the loss below and
// by tests of its scale invariance.
Tensor relative_count_loss(const Tensor& count, double target);

Tensor counting_loss(const CounterParams& params, const Tensor& image, const CountTarget& target);

}  // namespace countgen
