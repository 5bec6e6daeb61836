#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pdc/errors.hpp"
#include "pdc/objectives.hpp"
#include "pdc/rng.hpp"
#include "pdc/volnet.hpp"

using namespace pdc;

namespace {

// binary (2, d, h, w) probability map with constant foreground probability
Tensor const_probs(double fg, std::vector<int64_t> spatial) {
    std::vector<int64_t> s{2};
    s.insert(s.end(), spatial.begin(), spatial.end());
    Tensor t(s);
    const int64_t n = t.numel() / 2;
    for (int64_t i = 0; i < n; ++i) {
        t.data[static_cast<size_t>(i)] = 1.0 - fg;      // class 0
        t.data[static_cast<size_t>(n + i)] = fg;        // class 1
    }
    return t;
}

Tensor one_hot_from(const std::vector<int>& fg, std::vector<int64_t> spatial) {
    std::vector<int64_t> s{2};
    s.insert(s.end(), spatial.begin(), spatial.end());
    Tensor t(s);
    const int64_t n = t.numel() / 2;
    for (int64_t i = 0; i < n; ++i) {
        const int f = fg[static_cast<size_t>(i)];
        t.data[static_cast<size_t>(i)] = f ? 0.0 : 1.0;
        t.data[static_cast<size_t>(n + i)] = f ? 1.0 : 0.0;
    }
    return t;
}

Tensor random_probs(Rng& rng, std::vector<int64_t> spatial) {
    std::vector<int64_t> s{2};
    s.insert(s.end(), spatial.begin(), spatial.end());
    Tensor t(s);
    const int64_t n = t.numel() / 2;
    for (int64_t i = 0; i < n; ++i) {
        const double p = rng.uniform(0.05, 0.95);
        t.data[static_cast<size_t>(i)] = 1.0 - p;
        t.data[static_cast<size_t>(n + i)] = p;
    }
    return t;
}

Tensor random_one_hot(Rng& rng, std::vector<int64_t> spatial) {
    const int64_t n = shape_numel(spatial);
    std::vector<int> fg(static_cast<size_t>(n));
    for (auto& f : fg) f = rng.bernoulli(0.5) ? 1 : 0;
    return one_hot_from(fg, spatial);
}

double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

// central finite difference of a scalar function of one tensor entry
template <typename F>
double fd(Tensor& x, int64_t i, F&& f, double h = 1e-5) {
    const double saved = x.data[static_cast<size_t>(i)];
    x.data[static_cast<size_t>(i)] = saved + h;
    const double up = f();
    x.data[static_cast<size_t>(i)] = saved - h;
    const double dn = f();
    x.data[static_cast<size_t>(i)] = saved;
    return (up - dn) / (2.0 * h);
}

}  // namespace

TEST_CASE("soft dice loss hand values") {
    // 8 voxels, foreground probs all 0.5, target foreground on half of them
    Tensor probs = const_probs(0.5, {2, 2, 2});
    Tensor target = one_hot_from({1, 1, 1, 1, 0, 0, 0, 0}, {2, 2, 2});
    CHECK(soft_dice_loss(probs, target) == doctest::Approx(0.5).epsilon(1e-4));

    // perfect prediction
    CHECK(soft_dice_loss(target, target) <= 1e-5);

    // both empty: smoothing convention gives exactly 0
    Tensor empty = one_hot_from(std::vector<int>(8, 0), {2, 2, 2});
    Tensor probs_bg = const_probs(0.0, {2, 2, 2});
    CHECK(soft_dice_loss(probs_bg, empty) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("soft dice loss rejects shape mismatch") {
    Tensor a = const_probs(0.5, {2, 2, 2});
    Tensor b = const_probs(0.5, {2, 2, 1});
    CHECK_THROWS_AS(soft_dice_loss(a, b), ShapeError);
}

TEST_CASE("cross entropy hand values") {
    Tensor target = one_hot_from({1, 0, 1, 0}, {1, 2, 2});
    CHECK(cross_entropy_loss(target, target) == doctest::Approx(0.0).epsilon(1e-9));

    Tensor uniform = const_probs(0.5, {1, 2, 2});
    CHECK(cross_entropy_loss(uniform, target) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // true class at 0.25 everywhere
    Tensor q = const_probs(0.25, {1, 2, 2});
    Tensor all_fg = one_hot_from({1, 1, 1, 1}, {1, 2, 2});
    CHECK(cross_entropy_loss(q, all_fg) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
}

TEST_CASE("supervised loss combines both heads symmetrically") {
    Tensor target = one_hot_from({1, 1, 1, 1, 0, 0, 0, 0}, {2, 2, 2});
    DualPrediction pred;
    pred.probs1 = target;                     // perfect head
    pred.probs2 = const_probs(0.5, {2, 2, 2});  // uniform head

    const double v = supervised_loss(pred, target);
    CHECK(v == doctest::Approx(0.5 * (0.5 + std::log(2.0))).epsilon(1e-4));

    DualPrediction swapped;
    swapped.probs1 = pred.probs2;
    swapped.probs2 = pred.probs1;
    CHECK(supervised_loss(swapped, target) == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("consistency loss hand values and symmetry") {
    Tensor a = const_probs(0.6, {2, 2, 2});
    Tensor b = const_probs(0.4, {2, 2, 2});
    CHECK(consistency_loss(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(consistency_loss(a, b) == doctest::Approx(0.04).epsilon(1e-9));
    CHECK(consistency_loss(b, a) == doctest::Approx(consistency_loss(a, b)).epsilon(1e-12));
    CHECK(consistency_loss(a, b) >= 0.0);
}

TEST_CASE("decoupling loss hand values") {
    Tensor p1({2});
    Tensor p2({2});

    p1.data = {1.0, 0.0};
    p2.data = {0.0, 1.0};
    CHECK(decoupling_loss({&p1}, {&p2}) == doctest::Approx(0.0).epsilon(1e-9));

    p1.data = {1.0, 1.0};
    p2.data = {1.0, 0.0};
    CHECK(decoupling_loss({&p1}, {&p2}) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("decoupling loss identities over random heads") {
    Rng rng(404);
    for (int it = 0; it < 10; ++it) {
        Tensor a({3, 4});
        Tensor b({3, 4});
        Tensor c({5});
        Tensor d({5});
        for (auto* t : {&a, &b, &c, &d})
            for (auto& x : t->data) x = rng.normal(0.0, 1.0);

        // identical heads couple completely
        CHECK(decoupling_loss({&a, &c}, {&a, &c}) == doctest::Approx(1.0).epsilon(1e-6));

        // sign flip is invisible to the square
        Tensor na = a;
        Tensor nc = c;
        for (auto& x : na.data) x = -x;
        for (auto& x : nc.data) x = -x;
        CHECK(decoupling_loss({&a, &c}, {&na, &nc}) == doctest::Approx(1.0).epsilon(1e-6));

        // positive rescaling of one side changes nothing
        const double base = decoupling_loss({&a, &c}, {&b, &d});
        Tensor sb = b;
        Tensor sd = d;
        for (auto& x : sb.data) x *= 7.25;
        for (auto& x : sd.data) x *= 0.033;
        CHECK(decoupling_loss({&a, &c}, {&sb, &sd}) == doctest::Approx(base).epsilon(1e-6));
        CHECK(base >= 0.0);
        CHECK(base <= 1.0);
    }
}

TEST_CASE("decoupling loss guards zero tensors and rejects incongruence") {
    Tensor z({4});
    Tensor p({4});
    p.data = {1.0, 2.0, 3.0, 4.0};
    CHECK(decoupling_loss({&z}, {&p}) == doctest::Approx(0.0).epsilon(1e-6));

    Tensor q({3});
    CHECK_THROWS_AS(decoupling_loss({&p}, {&q}), PairingError);
    CHECK_THROWS_AS(decoupling_loss({&p, &q}, {&p}), PairingError);
}

TEST_CASE("paired cosines match per-layer cosines") {
    Tensor a({3});
    Tensor b({3});
    a.data = {1.0, 0.0, 0.0};
    b.data = {1.0, 1.0, 0.0};
    const auto cs = paired_cosines({&a}, {&b});
    REQUIRE(cs.size() == 1);
    CHECK(cs[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("ramp weight schedule") {
    CHECK(ramp_weight(1000, 1000) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(ramp_weight(0, 1000) == doctest::Approx(0.1 * std::exp(-5.0)).epsilon(1e-12));
    CHECK(ramp_weight(500, 1000) == doctest::Approx(0.1 * std::exp(-1.25)).epsilon(1e-12));
    CHECK(ramp_weight(2000, 1000) == doctest::Approx(0.1).epsilon(1e-15));  // clamped
    CHECK(ramp_weight(500, 1000, 0.05) == doctest::Approx(0.05 * std::exp(-1.25)).epsilon(1e-12));

    double prev = -1.0;
    for (int64_t t = 0; t <= 1000; t += 25) {
        const double w = ramp_weight(t, 1000);
        CHECK(w >= prev);
        prev = w;
    }
    CHECK_THROWS_AS(ramp_weight(5, 0), ConfigError);
}

TEST_CASE("soft dice gradient matches finite differences") {
    Rng rng(1001);
    for (int it = 0; it < 20; ++it) {
        Tensor probs = random_probs(rng, {2, 2, 3});
        Tensor target = random_one_hot(rng, {2, 2, 3});
        Tensor grad;
        soft_dice_loss(probs, target, 1e-5, &grad);
        REQUIRE(grad.same_shape(probs));
        for (int64_t i = 0; i < probs.numel(); ++i) {
            const double g = fd(probs, i, [&] { return soft_dice_loss(probs, target); });
            CHECK(rel_err(grad.data[static_cast<size_t>(i)], g) < 1e-4);
        }
    }
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(1002);
    for (int it = 0; it < 20; ++it) {
        Tensor probs = random_probs(rng, {2, 2, 3});
        Tensor target = random_one_hot(rng, {2, 2, 3});
        Tensor grad;
        cross_entropy_loss(probs, target, 1e-7, &grad);
        for (int64_t i = 0; i < probs.numel(); ++i) {
            const double g = fd(probs, i, [&] { return cross_entropy_loss(probs, target); });
            CHECK(rel_err(grad.data[static_cast<size_t>(i)], g) < 1e-4);
        }
    }
}

TEST_CASE("consistency gradient matches finite differences") {
    Rng rng(1003);
    for (int it = 0; it < 20; ++it) {
        Tensor p1 = random_probs(rng, {2, 2, 2});
        Tensor p2 = random_probs(rng, {2, 2, 2});
        Tensor g1, g2;
        consistency_loss(p1, p2, &g1, &g2);
        for (int64_t i = 0; i < p1.numel(); ++i) {
            CHECK(rel_err(g1.data[static_cast<size_t>(i)],
                          fd(p1, i, [&] { return consistency_loss(p1, p2); })) < 1e-4);
            CHECK(rel_err(g2.data[static_cast<size_t>(i)],
                          fd(p2, i, [&] { return consistency_loss(p1, p2); })) < 1e-4);
        }
    }
}

TEST_CASE("decoupling gradient matches finite differences") {
    Rng rng(1004);
    for (int it = 0; it < 20; ++it) {
        Tensor a({3, 3});
        Tensor b({7});
        Tensor c({3, 3});
        Tensor d({7});
        for (auto* t : {&a, &b, &c, &d})
            for (auto& x : t->data) x = rng.normal(0.0, 1.0);
        std::vector<Tensor> g1, g2;
        decoupling_loss({&a, &b}, {&c, &d}, &g1, &g2);
        REQUIRE(g1.size() == 2);
        REQUIRE(g2.size() == 2);

        auto loss = [&] { return decoupling_loss({&a, &b}, {&c, &d}); };
        for (int64_t i = 0; i < a.numel(); ++i)
            CHECK(rel_err(g1[0].data[static_cast<size_t>(i)], fd(a, i, loss)) < 1e-4);
        for (int64_t i = 0; i < b.numel(); ++i)
            CHECK(rel_err(g1[1].data[static_cast<size_t>(i)], fd(b, i, loss)) < 1e-4);
        for (int64_t i = 0; i < c.numel(); ++i)
            CHECK(rel_err(g2[0].data[static_cast<size_t>(i)], fd(c, i, loss)) < 1e-4);
        for (int64_t i = 0; i < d.numel(); ++i)
            CHECK(rel_err(g2[1].data[static_cast<size_t>(i)], fd(d, i, loss)) < 1e-4);
    }
}

TEST_CASE("supervised loss gradients match finite differences") {
    Rng rng(1005);
    for (int it = 0; it < 10; ++it) {
        DualPrediction pred;
        pred.probs1 = random_probs(rng, {2, 2, 2});
        pred.probs2 = random_probs(rng, {2, 2, 2});
        Tensor target = random_one_hot(rng, {2, 2, 2});
        Tensor g1, g2;
        supervised_loss(pred, target, &g1, &g2);
        for (int64_t i = 0; i < pred.probs1.numel(); ++i) {
            CHECK(rel_err(g1.data[static_cast<size_t>(i)], fd(pred.probs1, i, [&] {
                              return supervised_loss(pred, target);
                          })) < 1e-4);
            CHECK(rel_err(g2.data[static_cast<size_t>(i)], fd(pred.probs2, i, [&] {
                              return supervised_loss(pred, target);
                          })) < 1e-4);
        }
    }
}
