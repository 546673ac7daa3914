#include "countgen/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace countgen {

void GuidanceConfig::validate(int T) const {
    auto nonneg = [](double v, const char* name) {
        if (!std::isfinite(v) || v < 0.0) {
            throw std::invalid_argument(std::string("GuidanceConfig: ") + name +
                                        " must be finite and >= 0");
        }
    };
    nonneg(s_count, "s_count");
    nonneg(s_attention, "s_attention");
    nonneg(s_max, "s_max");
    for (double s : s_count_i) nonneg(s, "s_count_i");
    if (!std::isfinite(grad_cap) || grad_cap <= 0.0) {
        throw std::invalid_argument("GuidanceConfig: grad_cap must be positive");
    }
    if (!std::isfinite(count_bias)) {
        throw std::invalid_argument("GuidanceConfig: count_bias must be finite");
    }
    if (t_lo < 1) throw std::invalid_argument("GuidanceConfig: window lower bound must be >= 1");
    const int hi = t_hi < 0 ? T : t_hi;
    if (hi > T || t_lo > hi) {
        throw std::invalid_argument("GuidanceConfig: window must lie within [1,T]");
    }
}

RefineOutcome refine_eps_with_loss(Tape& tape, const Tensor& eps, const Tensor& z_t,
                                   const Tensor& loss, double scale, const NoiseSchedule& ns,
                                   int t, double grad_cap) {
    if (!std::isfinite(scale) || scale < 0.0) {
        throw std::invalid_argument("refine_eps_with_loss: scale must be finite and >= 0");
    }
    if (!std::isfinite(grad_cap) || grad_cap <= 0.0) {
        throw std::invalid_argument("refine_eps_with_loss: grad_cap must be positive");
    }
    if (eps.shape() != z_t.shape()) {
        throw std::invalid_argument("refine_eps_with_loss: eps " + shape_str(eps.shape()) +
                                    " vs z_t " + shape_str(z_t.shape()));
    }
    RefineOutcome out{eps, 0.0, false, false};
    if (scale == 0.0) return out;

    Gradients g = tape.backward(loss);
    if (!g.has(z_t)) return out;
    Array ga = g.at(z_t);
    if (!ga.isFinite().all()) {
        out.skipped = true;
        return out;
    }
    const double rms = std::sqrt(ga.square().sum() / static_cast<double>(ga.size()));
    out.grad_rms = rms;
    if (rms == 0.0) return out;
    if (rms > grad_cap) ga *= grad_cap / rms;
    Tensor delta = Tensor::from_array(eps.shape(),
                                      Array(scale * std::sqrt(1.0 - ns.a_bar(t)) * ga));
    out.eps = add(eps, delta);
    out.applied = true;
    return out;
}

namespace {

// scalar {1} -> given shape, still on the tape (gradient sums back)
Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
    Tensor ones = Tensor::full({numel(shape), 1}, 1.0);
    return reshape(matmul(ones, reshape(s, {1, 1})), shape);
}

void check_same_maps(const char* who, const std::vector<Tensor>& maps, std::size_t least) {
    if (maps.size() < least) {
        throw std::invalid_argument(std::string(who) + ": need at least " +
                                    std::to_string(least) + " object maps, got " +
                                    std::to_string(maps.size()));
    }
    for (const Tensor& m : maps) {
        if (m.shape() != maps[0].shape()) {
            throw std::invalid_argument(std::string(who) + ": maps must share one shape");
        }
    }
}

}  // namespace

Tensor normalize_map(const Tensor& m) {
    if (!m.values().isFinite().all()) {
        throw std::invalid_argument("normalize_map: map must be finite");
    }
    Tensor flat = reshape(m, {m.size()});
    Tensor lo = reduce_min(flat, 0);
    Tensor hi = reduce_max(flat, 0);
    if (hi.values()[0] - lo.values()[0] < 1e-8) return Tensor::full(m.shape(), 0.5);
    Tensor spread = sub(hi, lo);
    return div(sub(m, broadcast_scalar(lo, m.shape())), broadcast_scalar(spread, m.shape()));
}

AttentionLosses attention_losses(const std::vector<Tensor>& normalized_maps, double s_max) {
    check_same_maps("attention_losses", normalized_maps, 2);
    if (!std::isfinite(s_max) || s_max < 0.0) {
        throw std::invalid_argument("attention_losses: s_max must be finite and >= 0");
    }
    // pointwise extrema folded with 0.5*(a+b -+ |a-b|), differentiable a.e.
    Tensor mn = normalized_maps[0];
    Tensor mx = normalized_maps[0];
    for (std::size_t i = 1; i < normalized_maps.size(); ++i) {
        const Tensor& m = normalized_maps[i];
        mn = mul(sub(add(mn, m), abs(sub(mn, m))), 0.5);
        mx = mul(add(add(mx, m), abs(sub(mx, m))), 0.5);
    }
    AttentionLosses out;
    out.l_min = sum(mn);
    out.l_max = sum(mx);
    out.l_attention = sub(out.l_min, mul(out.l_max, s_max));
    return out;
}

std::vector<Tensor> binarize_masks(const std::vector<Tensor>& maps) {
    check_same_maps("binarize_masks", maps, 2);
    const Eigen::Index n = maps[0].values().size();
    std::vector<Array> bits(maps.size(), Array::Zero(n));
    for (Eigen::Index px = 0; px < n; ++px) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < maps.size(); ++i) {
            if (maps[i].values()[px] > maps[best].values()[px]) best = i;
        }
        bits[best][px] = 1.0;
    }
    std::vector<Tensor> out;
    out.reserve(maps.size());
    for (Array& a : bits) out.push_back(Tensor::from_array(maps[0].shape(), std::move(a)));
    return out;
}

Tensor masked_image(const Tensor& x0, const Tensor& mask) {
    if (x0.rank() != 3 || mask.rank() != 2 || x0.dim(1) != mask.dim(0) ||
        x0.dim(2) != mask.dim(1)) {
        throw std::invalid_argument("masked_image: image " + shape_str(x0.shape()) +
                                    " does not fit mask " + shape_str(mask.shape()));
    }
    const Array& mv = mask.values();
    for (Eigen::Index i = 0; i < mv.size(); ++i) {
        if (mv[i] != 0.0 && mv[i] != 1.0) {
            throw std::invalid_argument("masked_image: mask must be {0,1} valued");
        }
    }
    return mask_mul(x0, mask);
}

double top_fraction_iou(const std::vector<Tensor>& maps, double fraction) {
    check_same_maps("top_fraction_iou", maps, 2);
    if (!(fraction > 0.0) || !(fraction <= 1.0)) {
        throw std::invalid_argument("top_fraction_iou: fraction must lie in (0,1]");
    }
    const Eigen::Index n = maps[0].values().size();
    Eigen::Index k = static_cast<Eigen::Index>(std::llround(fraction * static_cast<double>(n)));
    k = std::max<Eigen::Index>(1, std::min(n, k));

    std::vector<std::vector<char>> top(maps.size(), std::vector<char>(static_cast<std::size_t>(n), 0));
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (std::size_t m = 0; m < maps.size(); ++m) {
        const Array& v = maps[m].values();
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                          [&v](Eigen::Index a, Eigen::Index b) {
                              if (v[a] != v[b]) return v[a] > v[b];
                              return a < b;
                          });
        for (Eigen::Index i = 0; i < k; ++i) top[m][static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
    }

    double total = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        for (std::size_t j = i + 1; j < maps.size(); ++j) {
            int inter = 0, uni = 0;
            for (std::size_t px = 0; px < static_cast<std::size_t>(n); ++px) {
                const bool a = top[i][px], b = top[j][px];
                inter += a && b;
                uni += a || b;
            }
            total += static_cast<double>(inter) / static_cast<double>(uni);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

namespace {

std::string join(const std::vector<double>& v) {
    if (v.empty()) return "-";
    std::string s;
    char buf[48];
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.10g", v[i]);
        if (i) s += ',';
        s += buf;
    }
    return s;
}

}  // namespace

std::string GuidanceStepRecord::line() const {
    char head[96];
    std::snprintf(head, sizeof head, "t=%d t_prev=%d ", t, t_prev);
    std::string s = head;
    s += "counts=" + join(counts);
    s += " losses=" + join(count_losses);
    s += " grad_rms=" + join(grad_rms);
    if (has_attention) {
        char attn[160];
        std::snprintf(attn, sizeof attn, " l_min=%.10g l_max=%.10g l_att=%.10g iou=%.10g",
                      l_min, l_max, l_attention, attention_iou);
        s += attn;
        s += " mask_px=" + join(mask_areas);
    }
    if (has_partition) s += partition_ok ? " partition=1" : " partition=0";
    s += skipped_refinement ? " skipped=1" : " skipped=0";
    return s;
}

namespace {

Tensor initial_latent(const SamplerConfig& sc) {
    Rng rng(sc.rng_seed);
    Array a(3 * kCanvas * kCanvas);
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.normal();
    return Tensor::from_array({3, kCanvas, kCanvas}, std::move(a));
}

void check_sampler(const SamplerConfig& sc) {
    if (sc.kind != SamplerKind::DDIM) {
        throw std::invalid_argument("guided sampling runs on the DDIM subsequence");
    }
}

void check_target(const char* who, const CountTarget& tg) {
    if (tg.n < 1) throw std::invalid_argument(std::string(who) + ": count target must be >= 1");
    if (tg.effective() < 1) {
        throw std::invalid_argument(std::string(who) + ": offset count target must stay >= 1");
    }
}

void note_refinement(const RefineOutcome& oc, GuidanceStepRecord& rec, SampleResult& res) {
    rec.grad_rms.push_back(oc.grad_rms);
    if (oc.skipped) {
        rec.skipped_refinement = true;
        ++res.refinement_skips;
    }
}

}  // namespace

SampleResult unguided_sample(const DenoiserParams& dn, const NoiseSchedule& ns,
                             const CaptionTokens& caption, const SamplerConfig& sc) {
    check_sampler(sc);
    DenoiserParams fdn = frozen(dn);
    const std::vector<int> taus = timestep_subsequence(ns.T, sc.steps);
    Tensor z = initial_latent(sc);
    SampleResult res;
    for (std::size_t k = 0; k < taus.size(); ++k) {
        const int t = taus[k];
        const int t_prev = k + 1 < taus.size() ? taus[k + 1] : 0;
        Tensor eps = denoise_forward(fdn, z, t, caption).first;
        z = ddim_step(ns, z, eps, t, t_prev);
        GuidanceStepRecord rec;
        rec.t = t;
        rec.t_prev = t_prev;
        res.trace.push_back(std::move(rec));
    }
    res.image = z;
    return res;
}

SampleResult counting_guided_sample(const DenoiserParams& dn, const CounterParams& ct,
                                    const NoiseSchedule& ns, const CaptionTokens& caption,
                                    const CountTarget& target, const GuidanceConfig& cfg,
                                    const SamplerConfig& sc) {
    check_sampler(sc);
    cfg.validate(ns.T);
    if (caption.noun_positions.size() != 1) {
        throw std::invalid_argument("counting_guided_sample: caption must have exactly one noun");
    }
    check_target("counting_guided_sample", target);

    DenoiserParams fdn = frozen(dn);
    CounterParams fct = frozen(ct);
    const std::vector<int> taus = timestep_subsequence(ns.T, sc.steps);
    Tensor z = initial_latent(sc);
    SampleResult res;
    for (std::size_t k = 0; k < taus.size(); ++k) {
        const int t = taus[k];
        const int t_prev = k + 1 < taus.size() ? taus[k + 1] : 0;
        GuidanceStepRecord rec;
        rec.t = t;
        rec.t_prev = t_prev;

        Array eps_values;
        {
            Tape tape;
            Tensor z_leaf = Tensor::from_array(z.shape(), z.values(), true);
            Tensor eps = denoise_forward(fdn, z_leaf, t, caption).first;
            Tensor x0 = predict_x0(ns, z_leaf, eps, t);
            Tensor c = count_forward(fct, x0);
            Tensor cb = cfg.count_bias != 0.0 ? add(c, cfg.count_bias) : c;
            Tensor l = relative_count_loss(cb, static_cast<double>(target.effective()));
            rec.counts.push_back(c.item());
            rec.count_losses.push_back(l.item());

            Tensor eps_out = eps;
            if (cfg.s_count > 0.0 && cfg.in_window(t, ns.T)) {
                RefineOutcome oc =
                    refine_eps_with_loss(tape, eps, z_leaf, l, cfg.s_count, ns, t, cfg.grad_cap);
                note_refinement(oc, rec, res);
                eps_out = oc.eps;
            }
            eps_values = eps_out.values();
        }
        z = ddim_step(ns, z, Tensor::from_array(z.shape(), std::move(eps_values)), t, t_prev);
        res.trace.push_back(std::move(rec));
    }
    res.image = z;
    return res;
}

SampleResult multi_object_guided_sample(const DenoiserParams& dn, const CounterParams& ct,
                                        const NoiseSchedule& ns, const CaptionTokens& caption,
                                        const std::vector<CountTarget>& targets,
                                        const GuidanceConfig& cfg, const SamplerConfig& sc) {
    check_sampler(sc);
    cfg.validate(ns.T);
    const std::size_t n_obj = caption.noun_positions.size();
    if (n_obj < 2) {
        throw std::invalid_argument(
            "multi_object_guided_sample: caption must have at least two nouns");
    }
    if (targets.size() != n_obj) {
        throw std::invalid_argument("multi_object_guided_sample: " + std::to_string(n_obj) +
                                    " nouns need " + std::to_string(n_obj) +
                                    " count targets, got " + std::to_string(targets.size()));
    }
    for (const CountTarget& tg : targets) check_target("multi_object_guided_sample", tg);

    std::vector<int> noun_cols;
    noun_cols.reserve(n_obj);
    for (const auto& noun : caption.noun_positions) noun_cols.push_back(noun.index);

    DenoiserParams fdn = frozen(dn);
    CounterParams fct = frozen(ct);
    const std::vector<int> taus = timestep_subsequence(ns.T, sc.steps);
    Tensor z = initial_latent(sc);
    SampleResult res;
    for (std::size_t k = 0; k < taus.size(); ++k) {
        const int t = taus[k];
        const int t_prev = k + 1 < taus.size() ? taus[k + 1] : 0;
        GuidanceStepRecord rec;
        rec.t = t;
        rec.t_prev = t_prev;
        rec.has_attention = true;
        const bool window = cfg.in_window(t, ns.T);

        Array eps_values;
        {
            Tape tape;
            Tensor z_leaf = Tensor::from_array(z.shape(), z.values(), true);
            auto fw = denoise_forward(fdn, z_leaf, t, caption);
            Tensor eps = fw.first;
            const std::vector<Tensor>& maps = aggregate_attention(fw.second, noun_cols);

            std::vector<Tensor> mhat;
            mhat.reserve(maps.size());
            for (const Tensor& m : maps) mhat.push_back(normalize_map(m));
            AttentionLosses al = attention_losses(mhat, cfg.s_max);
            rec.l_min = al.l_min.item();
            rec.l_max = al.l_max.item();
            rec.l_attention = al.l_attention.item();
            rec.attention_iou = top_fraction_iou(maps);

            Tensor eps_ref = eps;
            if (cfg.s_attention > 0.0 && window) {
                RefineOutcome oc = refine_eps_with_loss(tape, eps_ref, z_leaf, al.l_attention,
                                                        cfg.s_attention, ns, t, cfg.grad_cap);
                note_refinement(oc, rec, res);
                eps_ref = oc.eps;
            }

            // one x0-hat from the attention-refined eps; it stays fixed while
            // the per-object counting refinements accumulate into eps
            Tensor x0 = predict_x0(ns, z_leaf, eps_ref, t);
            std::vector<Tensor> masks = binarize_masks(maps);
            rec.has_partition = true;
            rec.partition_ok = true;
            for (std::int64_t p = 0; p < masks[0].size() && rec.partition_ok; ++p) {
                double claims = 0.0;
                for (const Tensor& m : masks) claims += m.data()[p];
                rec.partition_ok = claims == 1.0;
            }
            const int factor = static_cast<int>(kCanvas / masks[0].dim(0));
            for (std::size_t i = 0; i < n_obj; ++i) {
                Tensor mi = masked_image(x0, upsample_nearest(masks[i], factor));
                Tensor ci = count_forward(fct, mi);
                Tensor cbi = cfg.count_bias != 0.0 ? add(ci, cfg.count_bias) : ci;
                Tensor li = relative_count_loss(cbi, static_cast<double>(targets[i].effective()));
                rec.counts.push_back(ci.item());
                rec.count_losses.push_back(li.item());
                rec.mask_areas.push_back(masks[i].values().sum());
                const double si = cfg.object_scale(i);
                if (si > 0.0 && window) {
                    RefineOutcome oc =
                        refine_eps_with_loss(tape, eps_ref, z_leaf, li, si, ns, t, cfg.grad_cap);
                    note_refinement(oc, rec, res);
                    eps_ref = oc.eps;
                }
            }
            eps_values = eps_ref.values();
        }
        z = ddim_step(ns, z, Tensor::from_array(z.shape(), std::move(eps_values)), t, t_prev);
        res.trace.push_back(std::move(rec));
    }
    res.image = z;
    return res;
}

}  // namespace countgen
