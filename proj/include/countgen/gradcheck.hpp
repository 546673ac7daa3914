#pragma once

#include "countgen/tensor.hpp"

#include <functional>
#include <vector>

namespace countgen {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::int64_t probes = 0;
    std::size_t worst_input = 0;
    std::int64_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central-difference check of d(loss)/d(inputs). loss_fn must rebuild the
// graph from the given leaves each call. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|). stride > 1 probes every
// stride-th coordinate. Throws if any probe evaluates non-finite.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                           std::vector<Tensor> inputs, double h = 1e-5, std::int64_t stride = 1);

}  // namespace countgen
