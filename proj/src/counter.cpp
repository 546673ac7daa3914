#include "countgen/counter.hpp"

#include "countgen/rng.hpp"
#include "countgen/scenes.hpp"

#include <cmath>
#include <stdexcept>

namespace countgen {

std::vector<std::pair<std::string, Tensor*>> CounterParams::entries() {
    return {
        {"c1_w", &c1_w}, {"c1_b", &c1_b}, {"c2_w", &c2_w}, {"c2_b", &c2_b},
        {"c3_w", &c3_w}, {"c3_b", &c3_b}, {"c4_w", &c4_w}, {"c4_b", &c4_b},
        {"f1_w", &f1_w}, {"f1_b", &f1_b}, {"f2_w", &f2_w}, {"f2_b", &f2_b},
    };
}

std::int64_t CounterParams::param_count() {
    std::int64_t n = 0;
    for (auto& e : entries()) n += e.second->size();
    return n;
}

CounterParams init_counter(std::uint64_t seed) {
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
    auto zeros = [](std::int64_t n) { return Tensor::zeros({n}, true); };

    CounterParams p;
    p.c1_w = conv(16, 3);
    p.c1_b = zeros(16);
    p.c2_w = conv(32, 16);
    p.c2_b = zeros(32);
    p.c3_w = conv(64, 32);
    p.c3_b = zeros(64);
    p.c4_w = conv(64, 64);
    p.c4_b = zeros(64);
    p.f1_w = normal({64, 32}, std::sqrt(2.0 / 64.0));
    p.f1_b = zeros(32);
    p.f2_w = normal({32, 1}, std::sqrt(1.0 / 32.0));
    p.f2_b = zeros(1);
    return p;
}

CounterParams frozen(const CounterParams& p) {
    CounterParams q = p;
    for (auto& e : q.entries()) *e.second = e.second->detached();
    return q;
}

Tensor count_forward(const CounterParams& params, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != kCanvas ||
        image.dim(2) != kCanvas) {
        throw std::invalid_argument("count_forward: image must be [3,32,32], got " +
                                    shape_str(image.shape()));
    }
    Tensor h = relu(conv2d(image, params.c1_w, params.c1_b, 2, 1));  // [16,16,16]
    h = relu(conv2d(h, params.c2_w, params.c2_b, 2, 1));             // [32,8,8]
    h = relu(conv2d(h, params.c3_w, params.c3_b, 2, 1));             // [64,4,4]
    h = relu(conv2d(h, params.c4_w, params.c4_b, 1, 1));             // [64,4,4]
    Tensor pooled = mean(reshape(h, {64, 16}), 1);                   // [64]
    Tensor f = relu(add(matmul(reshape(pooled, {1, 64}), params.f1_w),
                        reshape(params.f1_b, {1, 32})));
    Tensor out = add(matmul(f, params.f2_w), reshape(params.f2_b, {1, 1}));
    return reshape(softplus(out), {1});
}

Tensor relative_count_loss(const Tensor& count, double target) {
    if (count.size() != 1) {
        throw std::invalid_argument("relative_count_loss: count must be scalar, got " +
                                    shape_str(count.shape()));
    }
    if (!(target >= 1.0)) {
        throw std::invalid_argument("relative_count_loss: target must be >= 1, got " +
                                    std::to_string(target));
    }
    return pow(abs(div(sub(count, target), target)), 2.0);
}

Tensor counting_loss(const CounterParams& params, const Tensor& image, const CountTarget& target) {
    if (target.n < 1) {
        throw std::invalid_argument("counting_loss: count target must be >= 1, got " +
                                    std::to_string(target.n));
    }
    if (target.effective() < 1) {
        throw std::invalid_argument("counting_loss: offset target " +
                                    std::to_string(target.effective()) + " must stay >= 1");
    }
    return relative_count_loss(count_forward(params, image), static_cast<double>(target.effective()));
}

}  // namespace countgen
