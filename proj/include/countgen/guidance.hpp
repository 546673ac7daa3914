#pragma once

#include "countgen/counter.hpp"
#include "countgen/denoiser.hpp"
#include "countgen/scenes.hpp"
#include "countgen/schedule.hpp"
#include "countgen/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace countgen {

struct GuidanceConfig {
    double s_count = 30.0;      // noise-refinement scale for the counting loss
    double s_attention = 10.0;  // scale for the attention separation loss
    double s_max = 0.1;         // weight of the coverage term inside the attention loss
    std::vector<double> s_count_i;  // per-object overrides; objects past the end use s_count
    int t_hi = -1;                  // guidance window upper bound; -1 means the schedule's T
    int t_lo = 1;                   // lower bound, in timestep units
    double grad_cap = 1.0;          // cap on the gradient's root-mean-square before scaling
    double count_bias = 0.0;        // evaluation stub: added to the differentiable count
                                    // before the loss, simulating a miscalibrated counter
                                    // that a count offset should compensate

    void validate(int T) const;
    double object_scale(std::size_t i) const {
        return i < s_count_i.size() ? s_count_i[i] : s_count;
    }
    bool in_window(int t, int T) const {
        const int hi = t_hi < 0 ? T : t_hi;
        return t >= t_lo && t <= hi;
    }
};

// eps <- eps + scale * sqrt(1 - abar_t) * grad(loss, z_t), with the gradient's
// RMS capped at grad_cap first. Scale zero, a zero gradient, or a loss that
// never touches z_t all return the eps handle unchanged, which is what makes
// zero-scale guided sampling bit-identical to the plain sampler. A non-finite
// gradient sets `skipped` and leaves eps alone; callers record the event.
struct RefineOutcome {
    Tensor eps;
    double grad_rms = 0.0;  // RMS of the raw gradient, before capping
    bool applied = false;
    bool skipped = false;
};

RefineOutcome refine_eps_with_loss(Tape& tape, const Tensor& eps, const Tensor& z_t,
                                   const Tensor& loss, double scale, const NoiseSchedule& ns,
                                   int t, double grad_cap = 1.0);

// (m - min) / (max - min); a map whose spread is below 1e-8 maps to the
// constant 0.5 field instead of dividing by nothing.
Tensor normalize_map(const Tensor& m);

// L_min sums the pointwise minimum over objects (overlap penalty), L_max the
// pointwise maximum (coverage reward), both over normalized maps.
// l_attention = l_min - s_max * l_max.
struct AttentionLosses {
    Tensor l_min, l_max, l_attention;
};
AttentionLosses attention_losses(const std::vector<Tensor>& normalized_maps, double s_max);

// Per-pixel argmax over the raw aggregated maps, ties to the lowest object
// index. The result is a set of constant {0,1} maps that partition the grid;
// backward treats them as constants.
std::vector<Tensor> binarize_masks(const std::vector<Tensor>& maps);

// x0 * mask, mask broadcast over channels; mask must be exactly {0,1} valued
// and match the image's spatial extent.
Tensor masked_image(const Tensor& x0, const Tensor& mask);

// Mean pairwise intersection-over-union of the maps' top-`fraction` pixel
// sets (value-descending, index-ascending tie order).
double top_fraction_iou(const std::vector<Tensor>& maps, double fraction = 0.2);

struct GuidanceStepRecord {
    int t = 0;
    int t_prev = 0;
    std::vector<double> counts;        // per-target count estimates at this step
    std::vector<double> count_losses;  // matching relative losses
    std::vector<double> grad_rms;      // one entry per attempted refinement, in order
    bool has_attention = false;        // the three fields below are meaningful
    double l_min = 0.0;
    double l_max = 0.0;
    double l_attention = 0.0;
    std::vector<double> mask_areas;  // mask pixel counts at map resolution
    double attention_iou = 0.0;
    bool has_partition = false;   // set when binarized masks were checked
    bool partition_ok = false;    // every pixel claimed by exactly one mask
    bool skipped_refinement = false;

    std::string line() const;
};

struct SampleResult {
    Tensor image;  // predicted clean image after the final step
    std::vector<GuidanceStepRecord> trace;
    int refinement_skips = 0;
};

SampleResult unguided_sample(const DenoiserParams& dn, const NoiseSchedule& ns,
                             const CaptionTokens& caption, const SamplerConfig& sc);

// Single-noun captions: per step predict eps, form x0-hat, run the counter
// on it, and push eps along the counting-loss gradient before the DDIM step.
SampleResult counting_guided_sample(const DenoiserParams& dn, const CounterParams& ct,
                                    const NoiseSchedule& ns, const CaptionTokens& caption,
                                    const CountTarget& target, const GuidanceConfig& cfg,
                                    const SamplerConfig& sc);

// Two or more nouns: attention separation refinement first, one x0-hat
// recomputation from the refined eps, then per-object masked counting
// refinements against that fixed x0-hat, then the DDIM step.
SampleResult multi_object_guided_sample(const DenoiserParams& dn, const CounterParams& ct,
                                        const NoiseSchedule& ns, const CaptionTokens& caption,
                                        const std::vector<CountTarget>& targets,
                                        const GuidanceConfig& cfg, const SamplerConfig& sc);

}  // namespace countgen
