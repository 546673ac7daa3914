#include "countgen/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace countgen {

namespace {

double eval_loss(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                 const std::vector<Tensor>& inputs) {
    Tensor loss = fn(inputs);
    const double v = loss.item();
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss at probe");
    return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                           std::vector<Tensor> inputs, double h, std::int64_t stride) {
    if (stride < 1) stride = 1;

    std::vector<Array> analytic;
    {
        Tape tape;
        Tensor loss = loss_fn(inputs);
        Gradients grads = tape.backward(loss);
        for (const Tensor& in : inputs) {
            analytic.push_back(grads.has(in) ? grads.at(in) : Array(Array::Zero(in.size())));
        }
    }

    GradCheckResult r;
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        Tensor& in = inputs[ii];
        for (std::int64_t j = 0; j < in.size(); j += stride) {
            const double orig = in.values()[j];
            in.values_mut()[j] = orig + h;
            const double lp = eval_loss(loss_fn, inputs);
            in.values_mut()[j] = orig - h;
            const double lm = eval_loss(loss_fn, inputs);
            in.values_mut()[j] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double ana = analytic[ii][j];
            const double rel = std::abs(ana - numeric) / std::max(1.0, std::abs(ana));
            ++r.probes;
            if (rel > r.max_rel_err) {
                r.max_rel_err = rel;
                r.worst_input = ii;
                r.worst_index = j;
                r.worst_analytic = ana;
                r.worst_numeric = numeric;
            }
        }
    }
    return r;
}

}  // namespace countgen
