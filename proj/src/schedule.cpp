#include "countgen/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace countgen {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_t(const NoiseSchedule& ns, int t, const char* op) {
    if (t < 1 || t > ns.T) {
        fail(std::string(op) + ": step " + std::to_string(t) + " outside [1," +
             std::to_string(ns.T) + "]");
    }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        fail(std::string("shape mismatch in ") + op + ": " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
}

}  // namespace

double NoiseSchedule::a_bar(int t) const {
    if (t < 0 || t > T) fail("a_bar: step " + std::to_string(t) + " outside [0," + std::to_string(T) + "]");
    return alpha_bar[static_cast<std::size_t>(t)];
}

double NoiseSchedule::beta_at(int t) const {
    if (t < 1 || t > T) fail("beta_at: step out of range");
    return beta[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_at(int t) const {
    if (t < 1 || t > T) fail("alpha_at: step out of range");
    return alpha[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
    if (betas.size() < 2) fail("schedule: need at least 2 steps");
    NoiseSchedule ns;
    ns.T = static_cast<int>(betas.size());
    ns.beta = std::move(betas);
    ns.alpha.reserve(ns.beta.size());
    ns.alpha_bar.reserve(ns.beta.size() + 1);
    ns.alpha_bar.push_back(1.0);
    double prod = 1.0;
    for (double b : ns.beta) {
        if (!(b > 0.0 && b < 1.0)) fail("schedule: beta must lie in (0,1)");
        ns.alpha.push_back(1.0 - b);
        prod *= 1.0 - b;
        if (prod >= ns.alpha_bar.back()) fail("schedule: alpha_bar must be strictly decreasing");
        ns.alpha_bar.push_back(prod);
    }
    return ns;
}

NoiseSchedule make_schedule(int T, double beta_lo, double beta_hi) {
    if (T < 2) fail("make_schedule: T must be >= 2");
    if (!(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0)) {
        fail("make_schedule: need 0 < beta_lo <= beta_hi < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        betas[static_cast<std::size_t>(t)] =
            beta_lo + (beta_hi - beta_lo) * static_cast<double>(t) / static_cast<double>(T - 1);
    }
    return schedule_from_betas(std::move(betas));
}

std::vector<int> timestep_subsequence(int T, int steps) {
    if (T < 2) fail("timestep_subsequence: T must be >= 2");
    if (steps < 2 || steps > T) {
        fail("timestep_subsequence: steps must lie in [2," + std::to_string(T) + "]");
    }
    std::vector<int> ts(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        ts[static_cast<std::size_t>(k)] = static_cast<int>(std::llround(
            static_cast<double>(T) -
            static_cast<double>(T - 1) * static_cast<double>(k) / static_cast<double>(steps - 1)));
    }
    return ts;
}

Tensor q_step(const NoiseSchedule& ns, const Tensor& x_prev, int t, const Tensor& noise) {
    check_t(ns, t, "q_step");
    check_same_shape("q_step", x_prev, noise);
    const double a = ns.alpha_at(t);
    return x_prev * std::sqrt(a) + noise * std::sqrt(1.0 - a);
}

Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, int t, const Tensor& noise) {
    check_t(ns, t, "q_sample");
    check_same_shape("q_sample", x0, noise);
    const double ab = ns.a_bar(t);
    return x0 * std::sqrt(ab) + noise * std::sqrt(1.0 - ab);
}

Tensor predict_x0(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps, int t) {
    check_t(ns, t, "predict_x0");
    check_same_shape("predict_x0", x_t, eps);
    const double ab = ns.a_bar(t);
    if (ab <= 0.0) fail("predict_x0: alpha_bar is zero at this step (singular)");
    return (x_t - eps * std::sqrt(1.0 - ab)) / std::sqrt(ab);
}

Tensor ddim_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps, int t, int t_prev) {
    check_t(ns, t, "ddim_step");
    if (t_prev < 0 || t_prev > t) {
        fail("ddim_step: t_prev " + std::to_string(t_prev) + " must lie in [0," + std::to_string(t) + "]");
    }
    Tensor x0 = predict_x0(ns, x_t, eps, t);
    const double ab_prev = ns.a_bar(t_prev);
    if (ab_prev == 1.0) return x0;
    return x0 * std::sqrt(ab_prev) + eps * std::sqrt(1.0 - ab_prev);
}

Tensor ddpm_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps, int t, Rng& rng) {
    check_t(ns, t, "ddpm_step");
    check_same_shape("ddpm_step", x_t, eps);
    const double a = ns.alpha_at(t);
    const double b = ns.beta_at(t);
    const double ab = ns.a_bar(t);
    const double ab_prev = ns.a_bar(t - 1);
    Tensor mean = (x_t - eps * (b / std::sqrt(1.0 - ab))) * (1.0 / std::sqrt(a));
    const double var = b * (1.0 - ab_prev) / (1.0 - ab);
    if (t == 1 || var <= 0.0) return mean;
    Array z(x_t.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Tensor noise = Tensor::from_array(x_t.shape(), std::move(z), false);
    return mean + noise * std::sqrt(var);
}

}  // namespace countgen
