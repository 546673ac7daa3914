#pragma once

#include "countgen/rng.hpp"
#include "countgen/tensor.hpp"

#include <cstdint>
#include <vector>

namespace countgen {

// Linear-beta noise schedule. Step indices t run 1..T; alpha_bar(0) is 1 by
// convention so t-1 lookups stay in range at the last denoising step.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1] belongs to step t
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // alpha_bar[t], size T+1, alpha_bar[0] == 1

    double a_bar(int t) const;
    double beta_at(int t) const;
    double alpha_at(int t) const;
};

NoiseSchedule make_schedule(int T, double beta_lo, double beta_hi);
NoiseSchedule schedule_from_betas(std::vector<double> beta);

enum class SamplerKind { DDPM, DDIM };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::DDIM;
    int steps = 50;
    std::uint64_t rng_seed = 0;
};

// Uniformly strided decreasing timesteps from T down to 1 inclusive.
std::vector<int> timestep_subsequence(int T, int steps);

// x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) noise
Tensor q_step(const NoiseSchedule& ns, const Tensor& x_prev, int t, const Tensor& noise);
// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise
Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, int t, const Tensor& noise);
// x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t); differentiable
Tensor predict_x0(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps, int t);
// x_{t_prev} = sqrt(abar_{t_prev}) x0_hat + sqrt(1 - abar_{t_prev}) eps
Tensor ddim_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps, int t, int t_prev);
// ancestral step with posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t)
Tensor ddpm_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps, int t, Rng& rng);

}  // namespace countgen
