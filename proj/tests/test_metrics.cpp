#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "pdc/errors.hpp"
#include "pdc/metrics.hpp"
#include "pdc/objectives.hpp"
#include "pdc/rng.hpp"
#include "pdc/volnet.hpp"

using namespace pdc;

namespace {

Mask mask_of(Dims3 shape, const std::vector<Dims3>& fg) {
    Mask m(shape);
    for (const auto& p : fg) m.set(p[0], p[1], p[2], 1);
    return m;
}

Mask random_mask(Rng& rng, Dims3 shape, double density) {
    Mask m(shape);
    for (auto& v : m.v) v = rng.bernoulli(density) ? 1 : 0;
    return m;
}

// O(n^2) reference: pooled bidirectional nearest-surface distances
std::pair<double, double> oracle_distances(const Mask& pred, const Mask& gt,
                                           const Spacing& spacing, PercentileMethod method) {
    const auto sp = extract_surface(pred);
    const auto sg = extract_surface(gt);
    std::vector<double> pool;
    auto push_directed = [&](const std::vector<Dims3>& from, const std::vector<Dims3>& to) {
        for (const auto& a : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& b : to) {
                const double dd = (a[0] - b[0]) * spacing[0];
                const double dh = (a[1] - b[1]) * spacing[1];
                const double dw = (a[2] - b[2]) * spacing[2];
                best = std::min(best, dd * dd + dh * dh + dw * dw);
            }
            pool.push_back(std::sqrt(best));
        }
    };
    push_directed(sp, sg);
    push_directed(sg, sp);
    double mean = 0.0;
    for (double d : pool) mean += d;
    mean /= static_cast<double>(pool.size());
    return {mean, percentile(pool, 95.0, method)};
}

}  // namespace

TEST_CASE("dice and jaccard hand values") {
    const Dims3 s{2, 2, 2};
    const Mask a = mask_of(s, {{0, 0, 0}, {0, 0, 1}});
    const Mask b = mask_of(s, {{0, 0, 1}, {0, 1, 0}});
    CHECK(dice_score(a, a) == doctest::Approx(1.0));
    CHECK(jaccard_score(a, a) == doctest::Approx(1.0));
    CHECK(dice_score(a, b) == doctest::Approx(0.5));
    CHECK(jaccard_score(a, b) == doctest::Approx(1.0 / 3.0));

    const Mask c = mask_of(s, {{1, 1, 1}});
    CHECK(dice_score(a, c) == doctest::Approx(0.0));

    const Mask empty(s);
    CHECK(dice_score(empty, empty) == doctest::Approx(1.0));
    CHECK(jaccard_score(empty, empty) == doctest::Approx(1.0));
    CHECK(dice_score(a, empty) == doctest::Approx(0.0));
}

TEST_CASE("dice and jaccard reject shape mismatches") {
    const Mask a(Dims3{2, 2, 2});
    const Mask b(Dims3{2, 2, 3});
    CHECK_THROWS_AS(dice_score(a, b), ShapeError);
    CHECK_THROWS_AS(jaccard_score(a, b), ShapeError);
}

TEST_CASE("dice-jaccard identity and symmetry on random pairs") {
    Rng rng(271828);
    for (int it = 0; it < 100; ++it) {
        const Dims3 s{1 + rng.uniform_int(8), 1 + rng.uniform_int(8), 1 + rng.uniform_int(8)};
        const Mask a = random_mask(rng, s, 0.4);
        const Mask b = random_mask(rng, s, 0.4);
        const double d = dice_score(a, b);
        const double j = jaccard_score(a, b);
        CHECK(std::fabs(d - 2.0 * j / (1.0 + j)) < 1e-12);
        CHECK(std::fabs(j - d / (2.0 - d)) < 1e-12);
        CHECK(dice_score(b, a) == doctest::Approx(d).epsilon(1e-15));
        CHECK(jaccard_score(b, a) == doctest::Approx(j).epsilon(1e-15));
        CHECK(j <= d + 1e-15);
    }
}

TEST_CASE("surface extraction enumerations") {
    // single voxel
    const Mask single = mask_of({3, 3, 3}, {{1, 1, 1}});
    CHECK(extract_surface(single) == std::vector<Dims3>{{1, 1, 1}});

    // solid 3^3 cube inside 5^3: everything but the center voxel
    Mask cube(Dims3{5, 5, 5});
    for (int64_t d = 1; d <= 3; ++d)
        for (int64_t h = 1; h <= 3; ++h)
            for (int64_t w = 1; w <= 3; ++w) cube.set(d, h, w, 1);
    CHECK(extract_surface(cube).size() == 26);

    // 1x1x5 rod: every voxel touches background
    Mask rod(Dims3{1, 1, 5});
    for (int64_t w = 0; w < 5; ++w) rod.set(0, 0, w, 1);
    CHECK(extract_surface(rod).size() == 5);

    // mask filling the whole volume: every voxel borders out-of-bounds? no -
    // interior voxels of a full 3x3x3 volume have all six neighbors inside,
    // so only the center is excluded
    Mask full(Dims3{3, 3, 3});
    for (auto& v : full.v) v = 1;
    CHECK(extract_surface(full).size() == 26);

    CHECK_THROWS_AS(extract_surface(Mask(Dims3{2, 2, 2})), EmptyMaskError);
}

TEST_CASE("surface distance hand values") {
    const Dims3 s{4, 1, 1};
    const Mask a = mask_of(s, {{0, 0, 0}});
    const Mask b = mask_of(s, {{3, 0, 0}});
    const auto [asd, hd95] = surface_distances(a, b);
    CHECK(asd == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(hd95 == doctest::Approx(3.0).epsilon(1e-15));

    const auto [asd0, hd0] = surface_distances(a, a);
    CHECK(asd0 == doctest::Approx(0.0));
    CHECK(hd0 == doctest::Approx(0.0));

    CHECK_THROWS_AS(surface_distances(a, Mask(s)), EmptyMaskError);
}

TEST_CASE("surface distances match the brute-force oracle exactly") {
    Rng rng(5150);
    int done = 0;
    while (done < 200) {
        const Dims3 s{1 + rng.uniform_int(6), 1 + rng.uniform_int(6), 1 + rng.uniform_int(6)};
        const Mask a = random_mask(rng, s, 0.35);
        const Mask b = random_mask(rng, s, 0.35);
        if (a.count() == 0 || b.count() == 0) continue;
        ++done;
        for (const auto method : {PercentileMethod::linear, PercentileMethod::nearest_rank}) {
            const auto got = surface_distances(a, b, {1.0, 1.0, 1.0}, method);
            const auto want = oracle_distances(a, b, {1.0, 1.0, 1.0}, method);
            CHECK(got.first == want.first);    // exact, both 64-bit sums
            CHECK(got.second == want.second);
        }
    }
}

TEST_CASE("surface distances are symmetric and scale with spacing") {
    Rng rng(867);
    for (int it = 0; it < 25; ++it) {
        const Dims3 s{5, 5, 5};
        const Mask a = random_mask(rng, s, 0.3);
        const Mask b = random_mask(rng, s, 0.3);
        if (a.count() == 0 || b.count() == 0) continue;
        const auto ab = surface_distances(a, b);
        const auto ba = surface_distances(b, a);
        CHECK(ab.first == doctest::Approx(ba.first).epsilon(1e-15));
        CHECK(ab.second == doctest::Approx(ba.second).epsilon(1e-15));

        const double c = 2.5;
        const auto scaled = surface_distances(a, b, {c, c, c});
        CHECK(scaled.first == doctest::Approx(c * ab.first).epsilon(1e-12));
        CHECK(scaled.second == doctest::Approx(c * ab.second).epsilon(1e-12));
    }
}

TEST_CASE("percentile estimators") {
    std::vector<double> v{4.0, 1.0, 3.0, 2.0};
    // linear: position 0.95*(n-1) = 2.85 -> 3 + 0.85*(4-3)
    CHECK(percentile(v, 95.0, PercentileMethod::linear) == doctest::Approx(3.85).epsilon(1e-15));
    // nearest rank: ceil(0.95*4) = 4th value
    CHECK(percentile(v, 95.0, PercentileMethod::nearest_rank) == doctest::Approx(4.0));
    CHECK(percentile(v, 0.0, PercentileMethod::linear) == doctest::Approx(1.0));
    CHECK(percentile(v, 100.0, PercentileMethod::linear) == doctest::Approx(4.0));
    CHECK(percentile({7.5}, 95.0, PercentileMethod::linear) == doctest::Approx(7.5));
}

TEST_CASE("coupling metrics hand values") {
    Tensor a({2});
    a.data = {1.0, 0.0};
    Tensor b = a;

    auto [cd, qcd] = coupling_metrics({&a}, {&b});
    CHECK(cd == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(qcd == doctest::Approx(1.0).epsilon(1e-9));

    Tensor neg({2});
    neg.data = {-1.0, 0.0};
    std::tie(cd, qcd) = coupling_metrics({&a}, {&neg});
    CHECK(cd == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(qcd == doctest::Approx(1.0).epsilon(1e-9));

    // layers with cosines {1, 0}
    Tensor u({2});
    u.data = {0.0, 1.0};
    std::tie(cd, qcd) = coupling_metrics({&a, &a}, {&a, &u});
    CHECK(cd == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(qcd == doctest::Approx(0.5).epsilon(1e-9));

    Tensor wrong({3});
    CHECK_THROWS_AS(coupling_metrics({&a}, {&wrong}), PairingError);
}

TEST_CASE("per-layer qcd equals cd squared exactly") {
    Rng rng(31337);
    for (int it = 0; it < 20; ++it) {
        Tensor a({6});
        Tensor b({6});
        for (auto& x : a.data) x = rng.normal(0.0, 1.0);
        for (auto& x : b.data) x = rng.normal(0.0, 1.0);
        const auto cs = paired_cosines({&a}, {&b});
        const auto [cd, qcd] = coupling_metrics({&a}, {&b});
        REQUIRE(cs.size() == 1);
        CHECK(cd == cs[0]);
        CHECK(qcd == cs[0] * cs[0]);  // single layer: exact square
    }
}

TEST_CASE("evaluate_masks averages per-case metrics and flags empties") {
    const Dims3 s{3, 3, 3};
    const Mask a = mask_of(s, {{1, 1, 1}});
    const Mask b = mask_of(s, {{1, 1, 1}, {1, 1, 2}});
    const Mask empty(s);

    // perfect predictions
    const MetricsReport perfect = evaluate_masks({{a, a}, {b, b}});
    CHECK(perfect.dice == doctest::Approx(1.0));
    CHECK(perfect.jaccard == doctest::Approx(1.0));
    CHECK(perfect.asd == doctest::Approx(0.0));
    CHECK(perfect.hd95 == doctest::Approx(0.0));
    CHECK(perfect.n_cases == 2);
    CHECK(perfect.n_surface_cases == 2);

    // empty prediction: overlap still counted, surface metrics skipped
    const MetricsReport mixed = evaluate_masks({{empty, a}, {b, b}});
    CHECK(mixed.n_cases == 2);
    CHECK(mixed.n_surface_cases == 1);
    CHECK(mixed.dice == doctest::Approx(0.5));

    // all surface cases missing -> NaN markers
    const MetricsReport none = evaluate_masks({{empty, a}});
    CHECK(none.n_surface_cases == 0);
    CHECK(std::isnan(none.asd));
    CHECK(std::isnan(none.hd95));
}

TEST_CASE("evaluate attaches the checkpoint coupling and mirrors decoupling_loss") {
    NetworkConfig cfg;
    cfg.encoder_channels = {4, 8};
    cfg.seed = 5;
    const ParameterStore ps = build_network(cfg);

    Rng rng(99);
    std::vector<EvalCase> cases;
    for (int i = 0; i < 2; ++i) {
        EvalCase c;
        c.volume = Tensor::zeros({1, 8, 8, 8});
        for (auto& v : c.volume.data) v = rng.normal(0.0, 1.0);
        c.gt = random_mask(rng, {8, 8, 8}, 0.3);
        cases.push_back(std::move(c));
    }
    const MetricsReport rep = evaluate(ps, cases, {8, 8, 8}, {8, 8, 8});
    CHECK(rep.n_cases == 2);

    // the coupling diagnostic pairs layer-flattened head parameters, the
    // same vectors the decoupling loss sees
    const auto f1 = flatten_layers(ps, layer_groups(ps, ParamGroup::head1));
    const auto f2 = flatten_layers(ps, layer_groups(ps, ParamGroup::head2));
    std::vector<const Tensor*> p1, p2;
    for (const auto& t : f1) p1.push_back(&t);
    for (const auto& t : f2) p2.push_back(&t);
    const double qcd_direct = decoupling_loss(p1, p2);
    CHECK(std::fabs(rep.qcd - qcd_direct) < 1e-6);
    CHECK(rep.cd >= -1.0);
    CHECK(rep.cd <= 1.0);
    CHECK(rep.qcd >= 0.0);
    CHECK(rep.qcd <= 1.0);
}
