#include "doctest.h"

#include "countgen/gradcheck.hpp"
#include "countgen/rng.hpp"
#include "countgen/tensor.hpp"

#include <cmath>
#include <thread>
#include <vector>

using namespace countgen;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), rg);
}

// Values bounded away from zero, for kinked ops (relu, abs).
Tensor rand_tensor_off_zero(Shape shape, Rng& rng, double margin, bool rg = true) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& x : v) {
        double u = rng.uniform(margin, 1.0);
        x = rng.uniform() < 0.5 ? -u : u;
    }
    return Tensor::from(std::move(shape), std::move(v), rg);
}

// Pairwise-distinct values (gap >= 0.03), for argmin/argmax stability under
// central-difference probes.
Tensor distinct_tensor(Shape shape, Rng& rng, bool rg = true) {
    const std::int64_t n = numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = 0.05 * static_cast<double>(i) + rng.uniform(0.0, 0.02);
    }
    for (std::int64_t i = n - 1; i > 0; --i) {
        std::swap(v[static_cast<std::size_t>(i)],
                  v[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)))]);
    }
    return Tensor::from(std::move(shape), std::move(v), rg);
}

bool bit_equal(const Array& a, const Array& b) {
    if (a.size() != b.size()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("tensor-core") {

TEST_CASE("construction and accessors") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rank() == 2);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);
    CHECK(t.size() == 6);
    CHECK(t.at(4) == 5.0);
    CHECK_THROWS_AS(Tensor::from({2, 3}, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::from({0}, {}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::from({2, -1}, {1, 2}), std::invalid_argument);
    CHECK(Tensor::scalar(7.0).item() == 7.0);
    CHECK_THROWS_AS(t.item(), std::invalid_argument);
    CHECK(Tensor::zeros({3}).values().abs().sum() == 0.0);
    CHECK(Tensor::full({2, 2}, 3.5).at(3) == 3.5);
}

TEST_CASE("forward values match hand evaluation") {
    SUBCASE("sum of product is 32") {
        Tensor a = Tensor::from({3}, {1, 2, 3});
        Tensor b = Tensor::from({3}, {4, 5, 6});
        CHECK(sum(mul(a, b)).item() == 32.0);
    }
    SUBCASE("softmax of constant lane is uniform") {
        Tensor s = softmax(Tensor::from({3}, {0, 0, 0}), 0);
        for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    SUBCASE("scalar broadcast") {
        Tensor a = Tensor::from({3}, {1, 2, 3});
        Tensor r = a + 10.0;
        CHECK(r.at(0) == 11.0);
        CHECK(r.at(2) == 13.0);
        Tensor s = Tensor::scalar(2.0) * a;
        CHECK(s.at(1) == 4.0);
        CHECK(s.shape() == Shape{3});
    }
    SUBCASE("matmul 2x2") {
        Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
        Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
        Tensor c = matmul(a, b);
        CHECK(c.at(0) == 19.0);
        CHECK(c.at(1) == 22.0);
        CHECK(c.at(2) == 43.0);
        CHECK(c.at(3) == 50.0);
    }
    SUBCASE("transpose") {
        Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor t = transpose(a);
        CHECK(t.shape() == Shape{3, 2});
        CHECK(t.at(0) == 1.0);
        CHECK(t.at(1) == 4.0);
        CHECK(t.at(5) == 6.0);
    }
    SUBCASE("axis reductions") {
        Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor s0 = sum(a, 0);
        CHECK(s0.shape() == Shape{3});
        CHECK(s0.at(0) == 5.0);
        CHECK(s0.at(2) == 9.0);
        Tensor m1 = mean(a, 1);
        CHECK(m1.at(0) == 2.0);
        CHECK(m1.at(1) == 5.0);
        Tensor mn = reduce_min(a, 1);
        CHECK(mn.at(0) == 1.0);
        CHECK(mn.at(1) == 4.0);
        Tensor mx = reduce_max(a, 0);
        CHECK(mx.at(0) == 4.0);
        CHECK(mx.at(2) == 6.0);
    }
    SUBCASE("concat and slice") {
        Tensor a = Tensor::from({2}, {1, 2});
        Tensor b = Tensor::from({1}, {3});
        Tensor c = concat({a, b}, 0);
        CHECK(c.shape() == Shape{3});
        CHECK(c.at(2) == 3.0);
        Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
        Tensor n = Tensor::from({2, 1}, {5, 6});
        Tensor mc = concat({m, n}, 1);
        CHECK(mc.shape() == Shape{2, 3});
        CHECK(mc.at(2) == 5.0);
        CHECK(mc.at(5) == 6.0);
        Tensor sl = slice(Tensor::from({5}, {1, 2, 3, 4, 5}), 0, 1, 3);
        CHECK(sl.shape() == Shape{3});
        CHECK(sl.at(0) == 2.0);
        CHECK(sl.at(2) == 4.0);
    }
    SUBCASE("nearest up/down sampling") {
        Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
        Tensor up = upsample_nearest(a, 2);
        CHECK(up.shape() == Shape{4, 4});
        CHECK(up.at(0) == 1.0);
        CHECK(up.at(1) == 1.0);
        CHECK(up.at(2) == 2.0);
        CHECK(up.at(5) == 1.0);
        CHECK(up.at(15) == 4.0);
        Tensor down = downsample_nearest(up, 2);
        CHECK(bit_equal(down.values(), a.values()));
    }
    SUBCASE("conv2d with centered delta kernel is identity") {
        Rng rng(11);
        Tensor x = rand_tensor({1, 4, 4}, rng);
        Tensor w = Tensor::from({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
        Tensor y = conv2d(x, w, Tensor(), 1, 1);
        CHECK(bit_equal(y.values(), x.values()));
    }
    SUBCASE("add_channel_bias") {
        Tensor x = Tensor::zeros({2, 2, 2});
        Tensor b = Tensor::from({2}, {1.0, -2.0});
        Tensor y = add_channel_bias(x, b);
        CHECK(y.at(0) == 1.0);
        CHECK(y.at(3) == 1.0);
        CHECK(y.at(4) == -2.0);
        CHECK(y.at(7) == -2.0);
    }
    SUBCASE("mask_mul zeroes masked pixels") {
        Tensor x = Tensor::full({2, 2, 2}, 3.0);
        Tensor m = Tensor::from({2, 2}, {1, 0, 0, 1});
        Tensor y = mask_mul(x, m);
        CHECK(y.at(0) == 3.0);
        CHECK(y.at(1) == 0.0);
        CHECK(y.at(4) == 3.0);
        CHECK(y.at(5) == 0.0);
    }
}

TEST_CASE("gaussian blur identity kernel leaves image untouched") {
    Tensor delta = Tensor::zeros({5, 5});
    delta.values_mut()[12] = 1.0;
    // sigma -> 0 limit at radius 1 underflows the off-center taps to exactly 0
    Tensor out = gaussian_blur(delta, 1e-3, 1);
    CHECK(bit_equal(out.values(), delta.values()));
}

TEST_CASE("gaussian blur conserves mass and kernel sums to one") {
    Rng rng(5);
    for (int r = 0; r < 3; ++r) {
        Tensor x = rand_tensor({3, 7, 7}, rng, 0.0, 2.0, false);
        Tensor y = gaussian_blur(x, 1.0);
        CHECK(std::abs(y.values().sum() - x.values().sum()) < 1e-11);
    }
    // constant image is a fixed point iff the kernel sums to 1
    Tensor c = Tensor::full({6, 6}, 0.7);
    Tensor yc = gaussian_blur(c, 1.0);
    for (std::int64_t i = 0; i < yc.size(); ++i) CHECK(yc.at(i) == doctest::Approx(0.7).epsilon(1e-13));
}

TEST_CASE("softmax lanes sum to one") {
    Rng rng(7);
    Tensor x = rand_tensor({3, 4, 5}, rng, -5.0, 5.0, false);
    for (int axis = 0; axis < 3; ++axis) {
        Tensor s = softmax(x, axis);
        Tensor lane_sums = sum(s, axis);
        for (std::int64_t i = 0; i < lane_sums.size(); ++i) {
            CHECK(std::abs(lane_sums.at(i) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("shape errors name the op and both shapes") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({3}, {1, 2, 3});
    CHECK_THROWS_WITH_AS(add(a, b), "shape mismatch in add: [2] vs [3]", std::invalid_argument);
    CHECK_THROWS_WITH_AS(matmul(a, b), "shape mismatch in matmul: [2] vs [3]",
                         std::invalid_argument);
    CHECK_THROWS_AS(mask_mul(Tensor::zeros({2, 3, 3}), Tensor::zeros({2, 2})),
                    std::invalid_argument);
    CHECK_THROWS_AS(reshape(a, {3}), std::invalid_argument);
    CHECK_THROWS_AS(slice(b, 0, 1, 5), std::invalid_argument);
    CHECK_THROWS_AS(sum(a, 1), std::invalid_argument);
}

TEST_CASE("division producing non-finite values is rejected") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor z = Tensor::from({2}, {1, 0});
    CHECK_THROWS_AS(div(a, z), std::invalid_argument);
    CHECK_THROWS_AS(a / 0.0, std::invalid_argument);
    Tensor ok = a / Tensor::from({2}, {2, 4});
    CHECK(ok.at(0) == 0.5);
    CHECK(ok.at(1) == 0.5);
}

TEST_CASE("backward basics") {
    SUBCASE("grad of sum is ones") {
        Tensor x = Tensor::from({4}, {1, 2, 3, 4}, true);
        Tape tape;
        Gradients g = tape.backward(sum(x));
        const Array& gx = g.at(x);
        CHECK(gx.size() == 4);
        for (int i = 0; i < 4; ++i) CHECK(gx[i] == 1.0);
    }
    SUBCASE("grad of sum of squares is 2x") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tape tape;
        Gradients g = tape.backward(sum(mul(x, x)));
        CHECK(g.at(x)[0] == 2.0);
        CHECK(g.at(x)[1] == 4.0);
    }
    SUBCASE("relative-count loss derivative at c=6, N=5 is 0.08") {
        Tensor c = Tensor::scalar(6.0, true);
        const double N = 5.0;
        Tape tape;
        Tensor loss = pow(abs((c - N) / N), 2.0);
        Gradients g = tape.backward(loss);
        CHECK(g.at(c)[0] == doctest::Approx(0.08).epsilon(1e-12));
    }
    SUBCASE("non-scalar loss rejected") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
    }
    SUBCASE("empty tape rejected") {
        Tape tape;
        Tensor x = Tensor::scalar(1.0, true);
        CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    }
    SUBCASE("gradient shape matches value shape") {
        Rng rng(3);
        Tensor x = rand_tensor({2, 3, 4}, rng);
        Tape tape;
        Gradients g = tape.backward(sum(mul(x, x)));
        CHECK(g.at(x).size() == x.size());
    }
}

TEST_CASE("untracked tensors never receive gradients") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    Tensor c = Tensor::from({3}, {4, 5, 6}, false);
    Tape tape;
    Tensor loss = sum(mul(x, c));
    Gradients g = tape.backward(loss);
    CHECK(g.has(x));
    CHECK_FALSE(g.has(c));
    CHECK_THROWS_AS(g.at(c), std::invalid_argument);
}

TEST_CASE("tape tracking rules") {
    SUBCASE("no active tape means no tracking") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tensor y = mul(x, x);
        CHECK_FALSE(y.tracked());
        CHECK(y.node()->inputs.empty());
    }
    SUBCASE("constant-only ops do not grow the tape") {
        Tensor a = Tensor::from({2}, {1, 2});
        Tape tape;
        Tensor y = mul(a, a);
        CHECK(tape.node_count() == 0);
        CHECK_FALSE(y.tracked());
    }
    SUBCASE("values from a dead tape are constants on a new tape") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tensor y;
        {
            Tape t1;
            y = mul(x, x);
            CHECK(y.tracked());
        }
        Tape t2;
        Tensor z = sum(mul(y, y));
        CHECK_FALSE(z.tracked());
        CHECK_THROWS_AS(t2.backward(z), std::invalid_argument);
        // x itself still tracks on the new tape
        Gradients g = t2.backward(sum(mul(x, y)));
        CHECK(g.at(x)[0] == 1.0);
        CHECK(g.at(x)[1] == 4.0);
        CHECK_FALSE(g.has(y));
    }
    SUBCASE("detached copies never track") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tape tape;
        Tensor d = x.detached();
        Tensor loss = sum(mul(x, d));
        Gradients g = tape.backward(loss);
        CHECK(g.at(x)[1] == 2.0);
        CHECK_FALSE(g.has(d));
    }
    SUBCASE("recorded nodes are immutable") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(y.values_mut(), std::invalid_argument);
        CHECK_NOTHROW(x.values_mut());
    }
}

TEST_CASE("repeated backward calls on one tape are independent") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor y = mul(x, x);
    Tensor l1 = sum(y);
    Tensor l2 = sum(mul(y, y));
    Gradients g1 = tape.backward(l1);
    Gradients g2 = tape.backward(l2);
    Gradients g1b = tape.backward(l1);
    CHECK(g1.at(x)[0] == 2.0);
    CHECK(g1.at(x)[1] == 4.0);
    CHECK(g2.at(x)[0] == 4.0);
    CHECK(g2.at(x)[1] == 32.0);
    CHECK(bit_equal(g1.at(x), g1b.at(x)));
}

TEST_CASE("forward evaluation and tape replay are bit-identical") {
    Rng rng(21);
    Tensor x = rand_tensor({2, 6, 6}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng);
    Tensor b = rand_tensor({3}, rng);
    Tensor y1 = conv2d(x, w, b, 1, 1);
    Tensor y2 = conv2d(x, w, b, 1, 1);
    CHECK(bit_equal(y1.values(), y2.values()));

    auto run = [&]() {
        Tape tape;
        Tensor loss = sum(sigmoid(conv2d(x, w, b, 2, 1)));
        Gradients g = tape.backward(loss);
        return std::make_pair(Array(g.at(x)), Array(g.at(w)));
    };
    auto [gx1, gw1] = run();
    auto [gx2, gw2] = run();
    CHECK(bit_equal(gx1, gx2));
    CHECK(bit_equal(gw1, gw2));
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    Rng rng(31);
    // kernel sizes chosen so (H + 2*pad - k) divides the stride exactly;
    // otherwise conv discards trailing rows the transpose cannot restore
    struct Geom { int stride, pad; std::int64_t k; };
    for (auto [stride, pad, k] : std::vector<Geom>{{1, 1, 3}, {2, 1, 4}, {1, 0, 3}, {2, 0, 2}}) {
        Tensor x = rand_tensor({2, 6, 6}, rng, -1.0, 1.0, false);
        Tensor w = rand_tensor({3, 2, k, k}, rng, -1.0, 1.0, false);
        Tensor cx = conv2d(x, w, Tensor(), stride, pad);
        Tensor y = rand_tensor(cx.shape(), rng, -1.0, 1.0, false);
        double lhs = sum(mul(cx, y)).item();
        double rhs = sum(mul(x, conv_transpose2d(y, w, Tensor(), stride, pad))).item();
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    }
}

TEST_CASE("reduction ties route gradient to the lowest index") {
    Tensor x = Tensor::from({2, 2}, {3, 1, 1, 5}, true);
    {
        Tape tape;
        Gradients g = tape.backward(sum(reduce_min(x, 1)));
        CHECK(g.at(x)[0] == 0.0);
        CHECK(g.at(x)[1] == 1.0);
        CHECK(g.at(x)[2] == 1.0);
        CHECK(g.at(x)[3] == 0.0);
    }
    Tensor t = Tensor::from({2}, {2, 2}, true);
    {
        Tape tape;
        Gradients g = tape.backward(sum(reduce_max(t, 0)));
        CHECK(g.at(t)[0] == 1.0);
        CHECK(g.at(t)[1] == 0.0);
    }
}

TEST_CASE("grad_check on linear sum is exactly zero") {
    Tensor x = Tensor::from({4}, {1, 2, 3, 4}, true);
    auto fn = [](const std::vector<Tensor>& in) { return sum(in[0]); };
    GradCheckResult r = grad_check(fn, {x}, 0x1.0p-16);
    CHECK(r.max_rel_err == 0.0);
    CHECK(r.probes == 4);
}

TEST_CASE("grad_check on sum of sigmoids is below 1e-6") {
    Rng rng(41);
    Tensor x = rand_tensor({8}, rng, -1.0, 1.0, true);
    auto fn = [](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); };
    GradCheckResult r = grad_check(fn, {x}, 1e-5);
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("grad_check on conv-relu-sum composition is below 1e-4") {
    Tensor x, w, b;
    bool found = false;
    for (std::uint64_t seed = 1; seed <= 100 && !found; ++seed) {
        Rng rng(seed);
        x = rand_tensor({1, 8, 8}, rng, -1.0, 1.0, true);
        w = rand_tensor({4, 1, 3, 3}, rng, -1.0, 1.0, true);
        b = rand_tensor({4}, rng, -0.2, 0.2, true);
        Tensor pre = conv2d(x, w, b, 1, 1);
        found = pre.values().abs().minCoeff() > 1e-3;
    }
    REQUIRE(found);
    auto fn = [](const std::vector<Tensor>& in) {
        return sum(relu(conv2d(in[0], in[1], in[2], 1, 1)));
    };
    GradCheckResult r = grad_check(fn, {x, w, b}, 1e-5);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("grad_check rejects non-finite probes") {
    Tensor x = Tensor::from({2}, {1e-6, 1.0}, true);
    auto fn = [](const std::vector<Tensor>& in) { return sum(log(in[0])); };
    CHECK_THROWS_AS(grad_check(fn, {x}, 1e-5), std::runtime_error);
}

TEST_CASE("per-primitive gradient checks stay below 1e-4") {
    const double h = 1e-5;
    const double tol = 1e-4;
    Rng rng(97);

    auto check1 = [&](const char* name, const std::function<Tensor(const Tensor&)>& f, Tensor x) {
        std::string nm(name);
        CAPTURE(nm);
        auto fn = [&f](const std::vector<Tensor>& in) { return sum(f(in[0])); };
        GradCheckResult r = grad_check(fn, {x}, h);
        CAPTURE(r.worst_analytic);
        CAPTURE(r.worst_numeric);
        CHECK(r.max_rel_err < tol);
        CHECK(r.probes >= 100);
    };
    auto check2 = [&](const char* name,
                      const std::function<Tensor(const Tensor&, const Tensor&)>& f, Tensor a,
                      Tensor b) {
        std::string nm(name);
        CAPTURE(nm);
        auto fn = [&f](const std::vector<Tensor>& in) { return sum(f(in[0], in[1])); };
        GradCheckResult r = grad_check(fn, {a, b}, h);
        CAPTURE(r.worst_analytic);
        CAPTURE(r.worst_numeric);
        CHECK(r.max_rel_err < tol);
    };

    Shape big{100};
    check2("add", [](const Tensor& a, const Tensor& b) { return add(a, b); },
           rand_tensor(big, rng), rand_tensor(big, rng));
    check2("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); },
           rand_tensor(big, rng), rand_tensor(big, rng));
    check2("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); },
           rand_tensor(big, rng), rand_tensor(big, rng));
    check2("div", [](const Tensor& a, const Tensor& b) { return div(a, b); },
           rand_tensor(big, rng), rand_tensor_off_zero(big, rng, 0.5));
    check2("add scalar bcast", [](const Tensor& a, const Tensor& b) { return add(a, b); },
           rand_tensor(big, rng), rand_tensor({1}, rng));
    check2("mul scalar bcast", [](const Tensor& a, const Tensor& b) { return mul(b, a); },
           rand_tensor(big, rng), rand_tensor({1}, rng));

    check1("pow", [](const Tensor& a) { return pow(a, 3.0); }, rand_tensor(big, rng, 0.2, 1.5));
    check1("exp", [](const Tensor& a) { return exp(a); }, rand_tensor(big, rng));
    check1("log", [](const Tensor& a) { return log(a); }, rand_tensor(big, rng, 0.5, 2.0));
    check1("abs", [](const Tensor& a) { return abs(a); }, rand_tensor_off_zero(big, rng, 1e-3));
    check1("relu", [](const Tensor& a) { return relu(a); }, rand_tensor_off_zero(big, rng, 1e-3));
    check1("sigmoid", [](const Tensor& a) { return sigmoid(a); }, rand_tensor(big, rng, -3, 3));
    check1("softplus", [](const Tensor& a) { return softplus(a); }, rand_tensor(big, rng, -3, 3));
    check1("mean", [](const Tensor& a) { return mean(a); }, rand_tensor(big, rng));
    check1("sum axis", [](const Tensor& a) { return sum(a, 1); }, rand_tensor({5, 4, 5}, rng));
    check1("mean axis", [](const Tensor& a) { return mean(a, 0); }, rand_tensor({5, 4, 5}, rng));
    check1("reduce_min", [](const Tensor& a) { return reduce_min(a, 1); },
           distinct_tensor({10, 10}, rng));
    check1("reduce_max", [](const Tensor& a) { return reduce_max(a, 0); },
           distinct_tensor({10, 10}, rng));
    {
        Tensor wgt = rand_tensor({10, 10}, rng, 0.0, 1.0, false);
        check1("softmax", [wgt](const Tensor& a) { return mul(softmax(a, 1), wgt); },
               rand_tensor({10, 10}, rng));
    }
    check1("transpose", [](const Tensor& a) { return mul(transpose(a), transpose(a)); },
           rand_tensor({10, 10}, rng));
    check1("reshape", [](const Tensor& a) { return mul(reshape(a, {10, 10}), reshape(a, {10, 10})); },
           rand_tensor({100}, rng));
    check1("slice", [](const Tensor& a) { return mul(slice(a, 1, 2, 5), slice(a, 1, 0, 5)); },
           rand_tensor({10, 10}, rng));
    check1("upsample", [](const Tensor& a) { return mul(upsample_nearest(a, 2), upsample_nearest(a, 2)); },
           rand_tensor({4, 5, 5}, rng));
    check1("downsample", [](const Tensor& a) { return mul(downsample_nearest(a, 2), downsample_nearest(a, 2)); },
           rand_tensor({2, 10, 10}, rng));
    {
        Tensor wgt = rand_tensor({3, 7, 7}, rng, 0.0, 1.0, false);
        check1("gaussian_blur", [wgt](const Tensor& a) { return mul(gaussian_blur(a, 1.0), wgt); },
               rand_tensor({3, 7, 7}, rng));
    }

    check2("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); },
           rand_tensor({8, 7}, rng), rand_tensor({7, 8}, rng));

    {
        Tensor m = rand_tensor({7, 7}, rng, 0.0, 1.0, false);
        check1("mask_mul", [m](const Tensor& a) { return mask_mul(a, m); },
               rand_tensor({3, 7, 7}, rng));
    }
    check2("add_channel_bias", [](const Tensor& a, const Tensor& b) { return mul(add_channel_bias(a, b), add_channel_bias(a, b)); },
           rand_tensor({4, 5, 5}, rng), rand_tensor({4}, rng));
    check2("concat", [](const Tensor& a, const Tensor& b) { return mul(concat({a, b}, 1), concat({b, a}, 1)); },
           rand_tensor({5, 10}, rng), rand_tensor({5, 10}, rng));

    {
        Rng crng(55);
        Tensor x = rand_tensor({2, 6, 6}, crng);
        Tensor w = rand_tensor({3, 2, 3, 3}, crng);
        Tensor b = rand_tensor({3}, crng);
        auto fn = [](const std::vector<Tensor>& in) {
            Tensor y = conv2d(in[0], in[1], in[2], 1, 1);
            return sum(mul(y, y));
        };
        GradCheckResult r = grad_check(fn, {x, w, b}, h);
        CHECK(r.max_rel_err < tol);
        auto fn2 = [](const std::vector<Tensor>& in) {
            Tensor y = conv2d(in[0], in[1], in[2], 2, 1);
            return sum(mul(y, y));
        };
        GradCheckResult r2 = grad_check(fn2, {x, w, b}, h);
        CHECK(r2.max_rel_err < tol);
        Tensor xt = rand_tensor({3, 3, 3}, crng);
        Tensor wt = rand_tensor({3, 2, 4, 4}, crng);
        Tensor bt = rand_tensor({2}, crng);
        auto fn3 = [](const std::vector<Tensor>& in) {
            Tensor y = conv_transpose2d(in[0], in[1], in[2], 2, 1);
            return sum(mul(y, y));
        };
        GradCheckResult r3 = grad_check(fn3, {xt, wt, bt}, h);
        CHECK(r3.max_rel_err < tol);
    }
}

TEST_CASE("distinct tapes run in parallel threads") {
    std::vector<std::thread> threads;
    std::vector<double> results(4, 0.0);
    for (int k = 0; k < 4; ++k) {
        threads.emplace_back([k, &results]() {
            Tensor x = Tensor::full({64}, static_cast<double>(k + 1), true);
            for (int rep = 0; rep < 50; ++rep) {
                Tape tape;
                Tensor loss = sum(mul(x, x));
                Gradients g = tape.backward(loss);
                results[static_cast<std::size_t>(k)] = g.at(x)[0];
            }
        });
    }
    for (auto& t : threads) t.join();
    for (int k = 0; k < 4; ++k) CHECK(results[static_cast<std::size_t>(k)] == 2.0 * (k + 1));
}

TEST_CASE("rng streams are deterministic and splittable") {
    Rng a(derive_seed(123, "noise", 7, 0, 0));
    Rng b(derive_seed(123, "noise", 7, 0, 0));
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(123, "noise", 7) != derive_seed(123, "noise", 8));
    CHECK(derive_seed(123, "noise") != derive_seed(123, "init"));
    CHECK(derive_seed(123, "ab") != derive_seed(123, "ba"));

    Rng c(99);
    int in_range = 0;
    for (int i = 0; i < 1000; ++i) {
        double u = c.uniform();
        if (u >= 0.0 && u < 1.0) ++in_range;
        std::uint64_t k = c.uniform_int(7);
        CHECK(k < 7);
    }
    CHECK(in_range == 1000);
    double m = 0.0, s2 = 0.0;
    const int n = 20000;
    Rng d(7);
    std::vector<double> zs(n);
    for (int i = 0; i < n; ++i) {
        zs[static_cast<std::size_t>(i)] = d.normal();
        m += zs[static_cast<std::size_t>(i)];
    }
    m /= n;
    for (int i = 0; i < n; ++i) s2 += (zs[static_cast<std::size_t>(i)] - m) * (zs[static_cast<std::size_t>(i)] - m);
    s2 /= n - 1;
    CHECK(std::abs(m) < 0.03);
    CHECK(std::abs(s2 - 1.0) < 0.05);
}

}  // TEST_SUITE
