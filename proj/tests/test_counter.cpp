#include "countgen/counter.hpp"
#include "countgen/gradcheck.hpp"
#include "countgen/rng.hpp"
#include "countgen/scenes.hpp"

#include <doctest.h>

#include <cmath>
#include <vector>

using namespace countgen;

namespace {

Tensor rand_image(Rng& rng, double lo, double hi, bool requires_grad = false) {
    Array a(3 * kCanvas * kCanvas);
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return Tensor::from_array({3, kCanvas, kCanvas}, std::move(a), requires_grad);
}

}  // namespace

TEST_SUITE("counter-net") {

TEST_CASE("forward is deterministic, nonnegative, and tolerant of overshoot") {
    CounterParams p1 = init_counter(9);
    CounterParams p2 = init_counter(9);
    CHECK(p1.param_count() == 62625);
    CHECK((p1.c3_w.values() == p2.c3_w.values()).all());

    Rng rng(40);
    Tensor img = rand_image(rng, 0.0, 1.0);
    Tensor out1 = count_forward(p1, img);
    Tensor out2 = count_forward(p2, img);
    REQUIRE(out1.shape() == Shape{1});
    CHECK(out1.item() >= 0.0);
    CHECK(std::isfinite(out1.item()));
    CHECK(out1.item() == out2.item());

    // early-step predicted images overshoot [0,1]; forward must stay defined
    Tensor wild = rand_image(rng, -2.5, 3.5);
    Tensor out3 = count_forward(p1, wild);
    CHECK(std::isfinite(out3.item()));
    CHECK(out3.item() >= 0.0);
}

TEST_CASE("forward rejects wrong shapes") {
    CounterParams p = init_counter(1);
    CHECK_THROWS_WITH_AS(count_forward(p, Tensor::zeros({3, 16, 16})), doctest::Contains("[3,32,32]"),
                         std::invalid_argument);
    CHECK_THROWS_AS(count_forward(p, Tensor::zeros({1, 32, 32})), std::invalid_argument);
    CHECK_THROWS_AS(count_forward(p, Tensor::zeros({3 * 32 * 32})), std::invalid_argument);
}

TEST_CASE("count gradient matches central differences in the image") {
    CounterParams fp = frozen(init_counter(17));
    Rng rng(41);
    Tensor img = rand_image(rng, 0.0, 1.0, true);
    auto fn = [&](const std::vector<Tensor>& in) { return count_forward(fp, in[0]); };
    GradCheckResult r = grad_check(fn, {img}, 1e-5, 17);
    CAPTURE(r.max_rel_err);
    CHECK(r.probes >= 150);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("count gradient matches central differences in sampled parameters") {
    CounterParams base = init_counter(23);
    CounterParams fp = frozen(base);
    Rng rng(42);
    Tensor img = rand_image(rng, 0.0, 1.0);
    auto probe = [&](Tensor CounterParams::*field, std::int64_t stride) {
        Tensor leaf = Tensor::from_array((fp.*field).shape(), (fp.*field).values(), true);
        auto fn = [&](const std::vector<Tensor>& in) {
            CounterParams q = fp;
            q.*field = in[0];
            return count_forward(q, img);
        };
        GradCheckResult r = grad_check(fn, {leaf}, 1e-5, stride);
        CAPTURE(r.max_rel_err);
        CHECK(r.probes >= 20);
        CHECK(r.max_rel_err < 1e-4);
    };
    probe(&CounterParams::c1_w, 19);
    probe(&CounterParams::c4_w, 1733);
    probe(&CounterParams::f1_w, 89);
}

TEST_CASE("counting loss evaluates the relative-error form") {
    SUBCASE("exact count gives zero loss") {
        CHECK(relative_count_loss(Tensor::scalar(5.0), 5.0).item() == 0.0);
    }
    SUBCASE("count 6 against target 5 gives (1/5)^2") {
        CHECK(relative_count_loss(Tensor::scalar(6.0), 5.0).item() ==
              doctest::Approx(0.04).epsilon(1e-12));
    }
    SUBCASE("offset absorbs the error") {
        CounterParams p = init_counter(4);
        Rng rng(43);
        Tensor img = rand_image(rng, 0.0, 1.0);
        double c = count_forward(p, img).item();
        // pick the target so the effective value equals a nearby integer case
        Tensor direct = relative_count_loss(Tensor::scalar(c), 6.0);
        Tensor through = counting_loss(p, img, CountTarget{5, 1});
        CHECK(through.item() == direct.item());
        CHECK(relative_count_loss(Tensor::scalar(6.0), 6.0).item() == 0.0);
    }
    SUBCASE("loss goes through the network consistently") {
        CounterParams p = init_counter(5);
        Rng rng(44);
        Tensor img = rand_image(rng, 0.0, 1.0);
        CHECK(counting_loss(p, img, CountTarget{3, 0}).item() ==
              relative_count_loss(count_forward(p, img), 3.0).item());
    }
}

TEST_CASE("relative loss is invariant to joint scaling of count and target") {
    const double cases[][2] = {{3.7, 5.0}, {6.2, 2.0}, {0.4, 1.0}, {9.9, 8.0}, {1.0, 1.0}};
    for (auto& cn : cases) {
        const double c = cn[0], n = cn[1];
        const double base = relative_count_loss(Tensor::scalar(c), n).item();
        CHECK(relative_count_loss(Tensor::scalar(2.0 * c), 2.0 * n).item() == base);
        const double ten = relative_count_loss(Tensor::scalar(10.0 * c), 10.0 * n).item();
        CHECK(std::abs(ten - base) <= 1e-12 * std::max(1.0, base));
    }
}

TEST_CASE("loss gradient pushes the count toward the target") {
    auto grad_at = [](double c, double n) {
        Tensor count = Tensor::scalar(c, true);
        Tape tape;
        Gradients g = tape.backward(relative_count_loss(count, n));
        return g.at(count)[0];
    };
    CHECK(grad_at(7.0, 4.0) > 0.0);
    CHECK(grad_at(2.0, 4.0) < 0.0);
    CHECK(grad_at(4.0, 4.0) == 0.0);
    CHECK(grad_at(6.0, 5.0) == doctest::Approx(0.08).epsilon(1e-12));
}

TEST_CASE("targets below one are rejected") {
    CounterParams p = init_counter(6);
    Tensor img = Tensor::full({3, kCanvas, kCanvas}, kBackground);
    CHECK_THROWS_WITH_AS(counting_loss(p, img, CountTarget{0, 0}), doctest::Contains(">= 1"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(counting_loss(p, img, CountTarget{1, -1}), doctest::Contains("stay >= 1"),
                         std::invalid_argument);
    CHECK_THROWS_AS(relative_count_loss(Tensor::scalar(2.0), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(relative_count_loss(Tensor::from({2}, {1.0, 2.0}), 2.0), std::invalid_argument);
    CHECK(counting_loss(p, img, CountTarget{2, -1}).item() >= 0.0);
    CHECK(CountTarget{5, 1}.effective() == 6);
}

}  // TEST_SUITE
