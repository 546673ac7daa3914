#include "countgen/denoiser.hpp"

#include "countgen/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace countgen {

namespace {

Tensor sinusoidal_time(int t) {
    const int half = kTokenDim / 2;
    Array v(kTokenDim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / (half - 1));
        v[2 * i] = std::sin(t * freq);
        v[2 * i + 1] = std::cos(t * freq);
    }
    return Tensor::from_array({1, kTokenDim}, std::move(v));
}

Tensor linear_row(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), reshape(b, {1, b.dim(0)}));
}

struct AttnResult {
    Tensor feat;
    std::vector<Tensor> heads;
};

AttnResult cross_attention(const Tensor& x, const Tensor& emb, const Tensor& wq, const Tensor& wk,
                           const Tensor& wv, const Tensor& wo) {
    const std::int64_t c = x.dim(0), r = x.dim(1);
    Tensor flat = transpose(reshape(x, {c, r * r}));
    Tensor q = matmul(flat, wq);
    Tensor k = matmul(emb, wk);
    Tensor v = matmul(emb, wv);
    const std::int64_t dh = c / kAttnHeads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs, maps;
    for (int h = 0; h < kAttnHeads; ++h) {
        Tensor qh = slice(q, 1, h * dh, dh);
        Tensor kh = slice(k, 1, h * dh, dh);
        Tensor vh = slice(v, 1, h * dh, dh);
        Tensor attn = softmax(mul(matmul(qh, transpose(kh)), scale), 1);
        maps.push_back(attn);
        outs.push_back(matmul(attn, vh));
    }
    Tensor o = matmul(concat(outs, 1), wo);
    return {add(x, reshape(transpose(o), {c, r, r})), std::move(maps)};
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> DenoiserParams::entries() {
    return {
        {"tok_emb", &tok_emb},   {"pos_emb", &pos_emb},   {"time_w1", &time_w1},
        {"time_b1", &time_b1},   {"tb_d1_w", &tb_d1_w},   {"tb_d1_b", &tb_d1_b},
        {"tb_h1_w", &tb_h1_w},   {"tb_h1_b", &tb_h1_b},   {"tb_d2_w", &tb_d2_w},
        {"tb_d2_b", &tb_d2_b},   {"tb_mid_w", &tb_mid_w}, {"tb_mid_b", &tb_mid_b},
        {"tb_u1_w", &tb_u1_w},   {"tb_u1_b", &tb_u1_b},   {"tb_u2_w", &tb_u2_w},
        {"tb_u2_b", &tb_u2_b},   {"in_w", &in_w},         {"in_b", &in_b},
        {"d1_w", &d1_w},         {"d1_b", &d1_b},         {"h1_w", &h1_w},
        {"h1_b", &h1_b},         {"d2_w", &d2_w},         {"d2_b", &d2_b},
        {"mid_w", &mid_w},       {"mid_b", &mid_b},       {"u1_w", &u1_w},
        {"u1_b", &u1_b},         {"u1b_w", &u1b_w},       {"u1b_b", &u1b_b},
        {"u2_w", &u2_w},         {"u2_b", &u2_b},         {"out_w", &out_w},
        {"out_b", &out_b},       {"a1_wq", &a1_wq},       {"a1_wk", &a1_wk},
        {"a1_wv", &a1_wv},       {"a1_wo", &a1_wo},       {"a2_wq", &a2_wq},
        {"a2_wk", &a2_wk},       {"a2_wv", &a2_wv},       {"a2_wo", &a2_wo},
    };
}

std::int64_t DenoiserParams::param_count() {
    std::int64_t n = 0;
    for (auto& e : entries()) n += e.second->size();
    return n;
}

DenoiserParams init_denoiser(std::uint64_t seed) {
    int k = 0;
    auto normal = [&](Shape shp, double sd) {
        Rng rng(derive_seed(seed, "init", static_cast<std::uint64_t>(k++)));
        Array a(numel(shp));
        for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.normal(0.0, sd);
        return Tensor::from_array(std::move(shp), std::move(a), true);
    };
    auto conv = [&](std::int64_t co, std::int64_t ci) {
        return normal({co, ci, 3, 3}, std::sqrt(2.0 / static_cast<double>(ci * 9)));
    };
    auto lin = [&](std::int64_t di, std::int64_t dout) {
        return normal({di, dout}, std::sqrt(1.0 / static_cast<double>(di)));
    };
    auto zeros = [](std::int64_t n) { return Tensor::zeros({n}, true); };

    DenoiserParams p;
    p.tok_emb = normal({vocab::kSize, kTokenDim}, 0.25);
    p.pos_emb = normal({kCaptionLen, kTokenDim}, 0.25);
    p.time_w1 = lin(kTokenDim, kTimeHidden);
    p.time_b1 = zeros(kTimeHidden);
    p.tb_d1_w = lin(kTimeHidden, 64);
    p.tb_d1_b = zeros(64);
    p.tb_h1_w = lin(kTimeHidden, 64);
    p.tb_h1_b = zeros(64);
    p.tb_d2_w = lin(kTimeHidden, 128);
    p.tb_d2_b = zeros(128);
    p.tb_mid_w = lin(kTimeHidden, 128);
    p.tb_mid_b = zeros(128);
    p.tb_u1_w = lin(kTimeHidden, 64);
    p.tb_u1_b = zeros(64);
    p.tb_u2_w = lin(kTimeHidden, 32);
    p.tb_u2_b = zeros(32);
    p.in_w = conv(32, 3);
    p.in_b = zeros(32);
    p.d1_w = conv(64, 32);
    p.d1_b = zeros(64);
    p.h1_w = conv(64, 64);
    p.h1_b = zeros(64);
    p.d2_w = conv(128, 64);
    p.d2_b = zeros(128);
    p.mid_w = conv(128, 128);
    p.mid_b = zeros(128);
    p.u1_w = conv(64, 128);
    p.u1_b = zeros(64);
    p.u1b_w = conv(64, 64);
    p.u1b_b = zeros(64);
    p.u2_w = conv(32, 64);
    p.u2_b = zeros(32);
    // small final head keeps the untrained predictor from swamping q_sample stats
    p.out_w = normal({3, 32, 3, 3}, 0.2 * std::sqrt(2.0 / (32.0 * 9.0)));
    p.out_b = zeros(3);
    p.a1_wq = lin(64, 64);
    p.a1_wk = lin(kTokenDim, 64);
    p.a1_wv = lin(kTokenDim, 64);
    p.a1_wo = lin(64, 64);
    p.a2_wq = lin(128, 128);
    p.a2_wk = lin(kTokenDim, 128);
    p.a2_wv = lin(kTokenDim, 128);
    p.a2_wo = lin(128, 128);
    return p;
}

DenoiserParams frozen(const DenoiserParams& p) {
    DenoiserParams q = p;
    for (auto& e : q.entries()) *e.second = e.second->detached();
    return q;
}

std::pair<Tensor, AttentionStack> denoise_forward(const DenoiserParams& params, const Tensor& z_t,
                                                  int t, const CaptionTokens& caption) {
    if (z_t.rank() != 3 || z_t.dim(0) != 3 || z_t.dim(1) != kCanvas || z_t.dim(2) != kCanvas) {
        throw std::invalid_argument("denoise_forward: input must be [3,32,32], got " +
                                    shape_str(z_t.shape()));
    }
    if (t < 1) throw std::invalid_argument("denoise_forward: t must be >= 1, got " + std::to_string(t));
    for (int id : caption.tokens) {
        if (id < 0 || id >= vocab::kSize) {
            throw std::invalid_argument("denoise_forward: token id " + std::to_string(id) +
                                        " outside vocabulary of " + std::to_string(vocab::kSize));
        }
    }
    const DenoiserParams& p = params;

    std::vector<Tensor> rows;
    rows.reserve(kCaptionLen);
    for (int id : caption.tokens) rows.push_back(slice(p.tok_emb, 0, id, 1));
    Tensor emb = add(concat(rows, 0), p.pos_emb);

    Tensor tfeat = relu(linear_row(sinusoidal_time(t), p.time_w1, p.time_b1));
    auto tbias = [&](const Tensor& w, const Tensor& b) {
        Tensor v = linear_row(tfeat, w, b);
        return reshape(v, {v.dim(1)});
    };

    Tensor h0 = relu(conv2d(z_t, p.in_w, p.in_b, 1, 1));
    Tensor d1 = relu(add_channel_bias(conv2d(h0, p.d1_w, p.d1_b, 2, 1), tbias(p.tb_d1_w, p.tb_d1_b)));
    AttnResult at1 = cross_attention(d1, emb, p.a1_wq, p.a1_wk, p.a1_wv, p.a1_wo);
    Tensor h1 = relu(add_channel_bias(conv2d(at1.feat, p.h1_w, p.h1_b, 1, 1), tbias(p.tb_h1_w, p.tb_h1_b)));
    Tensor d2 = relu(add_channel_bias(conv2d(h1, p.d2_w, p.d2_b, 2, 1), tbias(p.tb_d2_w, p.tb_d2_b)));
    AttnResult at2 = cross_attention(d2, emb, p.a2_wq, p.a2_wk, p.a2_wv, p.a2_wo);
    Tensor mid = relu(add_channel_bias(conv2d(at2.feat, p.mid_w, p.mid_b, 1, 1), tbias(p.tb_mid_w, p.tb_mid_b)));
    Tensor u1 = add(relu(add_channel_bias(conv2d(upsample_nearest(mid, 2), p.u1_w, p.u1_b, 1, 1),
                                          tbias(p.tb_u1_w, p.tb_u1_b))),
                    h1);
    Tensor u1b = relu(conv2d(u1, p.u1b_w, p.u1b_b, 1, 1));
    Tensor u2 = add(relu(add_channel_bias(conv2d(upsample_nearest(u1b, 2), p.u2_w, p.u2_b, 1, 1),
                                          tbias(p.tb_u2_w, p.tb_u2_b))),
                    h0);
    Tensor eps = conv2d(u2, p.out_w, p.out_b, 1, 1);

    AttentionStack stack;
    stack.layers.push_back({kCanvas / 2, std::move(at1.heads)});
    stack.layers.push_back({kCanvas / 4, std::move(at2.heads)});
    stack.eot_index = caption.eot_index();
    return {eps, std::move(stack)};
}

const std::vector<Tensor>& aggregate_attention(AttentionStack& attn,
                                               const std::vector<int>& noun_positions) {
    if (attn.layers.empty()) throw std::invalid_argument("aggregate_attention: empty stack");
    if (noun_positions.empty()) throw std::invalid_argument("aggregate_attention: no noun positions");
    const std::int64_t ntok = attn.layers.front().heads.at(0).dim(1);
    std::int64_t target = 0;
    for (const AttentionLayer& l : attn.layers) {
        if (l.heads.empty()) throw std::invalid_argument("aggregate_attention: layer without heads");
        target = std::max<std::int64_t>(target, l.res);
        for (const Tensor& h : l.heads) {
            if (h.rank() != 2 || h.dim(0) != static_cast<std::int64_t>(l.res) * l.res ||
                h.dim(1) != ntok) {
                throw std::invalid_argument("aggregate_attention: head shape " + shape_str(h.shape()) +
                                            " does not match res " + std::to_string(l.res));
            }
        }
    }
    if (attn.eot_index < 1 || attn.eot_index >= ntok) {
        throw std::invalid_argument("aggregate_attention: eot index " + std::to_string(attn.eot_index) +
                                    " out of range for " + std::to_string(ntok) + " tokens");
    }

    std::vector<Tensor> per_layer;
    per_layer.reserve(attn.layers.size());
    for (const AttentionLayer& l : attn.layers) {
        Tensor m = l.heads[0];
        for (std::size_t i = 1; i < l.heads.size(); ++i) m = add(m, l.heads[i]);
        m = mul(m, 1.0 / static_cast<double>(l.heads.size()));
        if (l.res != target) {
            if (target % l.res != 0) {
                throw std::invalid_argument("aggregate_attention: resolution " + std::to_string(l.res) +
                                            " does not divide " + std::to_string(target));
            }
            Tensor img = reshape(transpose(m), {ntok, l.res, l.res});
            Tensor up = upsample_nearest(img, static_cast<int>(target / l.res));
            m = transpose(reshape(up, {ntok, target * target}));
        }
        per_layer.push_back(m);
    }
    Tensor m = per_layer[0];
    for (std::size_t i = 1; i < per_layer.size(); ++i) m = add(m, per_layer[i]);
    m = mul(m, 1.0 / static_cast<double>(per_layer.size()));

    // drop <sot>, keep caption positions 1..eot; pads after <eot> never count
    Tensor sm = softmax(slice(m, 1, 1, attn.eot_index), 1);

    attn.aggregated.clear();
    attn.aggregated.reserve(noun_positions.size());
    for (int pos : noun_positions) {
        if (pos < 1 || pos > attn.eot_index) {
            throw std::invalid_argument("aggregate_attention: noun position " + std::to_string(pos) +
                                        " outside tokens 1.." + std::to_string(attn.eot_index));
        }
        Tensor col = slice(sm, 1, pos - 1, 1);
        attn.aggregated.push_back(gaussian_blur(reshape(col, {target, target}), 1.0, 3));
    }
    return attn.aggregated;
}

}  // namespace countgen
