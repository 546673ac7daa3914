#pragma once

#include "countgen/scenes.hpp"
#include "countgen/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace countgen {

// Raw cross-attention weights captured from one forward pass. Each head map is
// [res*res, token_count] with nonnegative rows summing to 1.
struct AttentionLayer {
    int res = 0;
    std::vector<Tensor> heads;
};

struct AttentionStack {
    std::vector<AttentionLayer> layers;
    int eot_index = -1;
    // Smoothed per-noun token-dominance maps at the finest layer resolution,
    // filled by aggregate_attention.
    std::vector<Tensor> aggregated;
};

constexpr int kTokenDim = 32;
constexpr int kTimeHidden = 64;
constexpr int kAttnHeads = 4;

// Small U-Net over 32/16/8 resolutions with channel widths 32/64/128, one
// cross-attention block per downsampled resolution (queries from spatial
// features, keys/values from caption token embeddings). Token embeddings get
// a learned positional table added; without it captions that differ only in
// which count precedes which noun are indistinguishable to the attention.
struct DenoiserParams {
    Tensor tok_emb;  // [vocab, 32]
    Tensor pos_emb;  // [kCaptionLen, 32]

    Tensor time_w1, time_b1;      // sinusoid 32 -> 64
    Tensor tb_d1_w, tb_d1_b;      // 64 -> 64
    Tensor tb_h1_w, tb_h1_b;      // 64 -> 64
    Tensor tb_d2_w, tb_d2_b;      // 64 -> 128
    Tensor tb_mid_w, tb_mid_b;    // 64 -> 128
    Tensor tb_u1_w, tb_u1_b;      // 64 -> 64
    Tensor tb_u2_w, tb_u2_b;      // 64 -> 32

    Tensor in_w, in_b;     // 3 -> 32
    Tensor d1_w, d1_b;     // 32 -> 64, stride 2
    Tensor h1_w, h1_b;     // 64 -> 64
    Tensor d2_w, d2_b;     // 64 -> 128, stride 2
    Tensor mid_w, mid_b;   // 128 -> 128
    Tensor u1_w, u1_b;     // 128 -> 64 after 2x upsample
    Tensor u1b_w, u1b_b;   // 64 -> 64
    Tensor u2_w, u2_b;     // 64 -> 32 after 2x upsample
    Tensor out_w, out_b;   // 32 -> 3

    Tensor a1_wq, a1_wk, a1_wv, a1_wo;  // attention at 16x16, C=64
    Tensor a2_wq, a2_wk, a2_wv, a2_wo;  // attention at 8x8, C=128

    // Stable name -> tensor listing used by the optimizer and checkpoints.
    std::vector<std::pair<std::string, Tensor*>> entries();
    std::int64_t param_count();
};

DenoiserParams init_denoiser(std::uint64_t seed);

// Copy whose tensors are plain constants; backward passes skip all parameter
// gradients, which is what sampling-time guidance wants.
DenoiserParams frozen(const DenoiserParams& p);

std::pair<Tensor, AttentionStack> denoise_forward(const DenoiserParams& params, const Tensor& z_t,
                                                  int t, const CaptionTokens& caption);

// Head- and layer-averaged maps (coarser layers nearest-upsampled to the
// finest resolution), <sot> column dropped, remaining caption columns up to
// and including <eot> softmaxed per pixel, noun columns selected and smoothed
// with a sigma-1 radius-3 Gaussian. Differentiable through the raw weights.
const std::vector<Tensor>& aggregate_attention(AttentionStack& attn,
                                               const std::vector<int>& noun_positions);

}  // namespace countgen
