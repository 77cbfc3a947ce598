// test_metrics.cpp — MRE/SDR oracles.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cabld/errors.hpp"
#include "cabld/metrics.hpp"
#include "cabld/rng.hpp"

using namespace cabld;

namespace {
LandmarkSet set_of(std::initializer_list<Vec3> pts) {
    LandmarkSet s;
    for (const auto& p : pts) s.points.push_back(p);
    return s;
}
}  // namespace

TEST_CASE("perfect predictions give zero MRE and full SDR") {
    const auto gt = set_of({{1, 2, 3}, {4, 5, 6}});
    const auto [mean, sd] = mre({gt}, {gt});
    CHECK(mean == 0.0);
    CHECK(sd == 0.0);
    CHECK(sdr({gt}, {gt}, 3.0) == 100.0);
}

TEST_CASE("3-4-5 offset gives MRE 5 +- 0") {
    const auto gt = set_of({{0, 0, 0}});
    const auto pred = set_of({{3, 4, 0}});
    const auto [mean, sd] = mre({pred}, {gt});
    CHECK(mean == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(sd == doctest::Approx(0.0));
}

TEST_CASE("MRE matches a naive double loop on random sets") {
    Rng rng(1);
    std::vector<LandmarkSet> pred, gt;
    for (int s = 0; s < 7; ++s) {
        LandmarkSet a, b;
        for (int i = 0; i < 5; ++i) {
            a.points.push_back({rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0, 40)});
            b.points.push_back({rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0, 40)});
        }
        pred.push_back(a);
        gt.push_back(b);
    }
    double sum = 0.0;
    std::vector<double> all;
    for (int s = 0; s < 7; ++s)
        for (int i = 0; i < 5; ++i) {
            double d2 = 0;
            for (int a = 0; a < 3; ++a) {
                const double d = pred[static_cast<std::size_t>(s)].points[static_cast<std::size_t>(i)][a] -
                                 gt[static_cast<std::size_t>(s)].points[static_cast<std::size_t>(i)][a];
                d2 += d * d;
            }
            all.push_back(std::sqrt(d2));
            sum += all.back();
        }
    const double naive_mean = sum / 35.0;
    double ss = 0;
    for (double e : all) ss += (e - naive_mean) * (e - naive_mean);
    const double naive_std = std::sqrt(ss / 35.0);
    const auto [mean, sd] = mre(pred, gt);
    CHECK(std::abs(mean - naive_mean) < 1e-12);
    CHECK(std::abs(sd - naive_std) < 1e-12);
}

TEST_CASE("SDR uses a strict threshold") {
    const auto gt = set_of({{0, 0, 0}, {0, 0, 0}});
    const auto pred = set_of({{2, 0, 0}, {4, 0, 0}});
    CHECK(sdr({pred}, {gt}, 3.0) == 50.0);
    // error exactly at tau is excluded
    const auto pred2 = set_of({{3, 0, 0}, {0, 0, 0}});
    CHECK(sdr({pred2}, {gt}, 3.0) == 50.0);
}

TEST_CASE("SDR is nondecreasing in tau") {
    Rng rng(2);
    std::vector<LandmarkSet> pred, gt;
    LandmarkSet a, b;
    for (int i = 0; i < 20; ++i) {
        a.points.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10)});
        b.points.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10)});
    }
    pred.push_back(a);
    gt.push_back(b);
    double prev = 0.0;
    for (double tau : {1.0, 2.0, 3.0, 5.0, 8.0, 13.0, 21.0}) {
        const double v = sdr(pred, gt, tau);
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("shifting predictions moves no error by more than the shift") {
    Rng rng(3);
    LandmarkSet pred, gt;
    for (int i = 0; i < 12; ++i) {
        pred.points.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10)});
        gt.points.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10)});
    }
    const Vec3 d{1.5, -2.0, 0.7};
    const double dn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    LandmarkSet shifted = pred;
    for (auto& p : shifted.points)
        for (int a = 0; a < 3; ++a) p[a] += d[a];
    const auto base = report({pred}, {gt}, {});
    const auto moved = report({shifted}, {gt}, {});
    for (std::size_t i = 0; i < 12; ++i)
        CHECK(std::abs(moved.radial_errors[0][i] - base.radial_errors[0][i]) <= dn + 1e-12);
}

TEST_CASE("report aggregates the standalone metrics") {
    Rng rng(4);
    std::vector<LandmarkSet> pred, gt;
    for (int s = 0; s < 3; ++s) {
        LandmarkSet a, b;
        for (int i = 0; i < 4; ++i) {
            a.points.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10)});
            b.points.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10)});
        }
        pred.push_back(a);
        gt.push_back(b);
    }
    const EvalReport r = report(pred, gt, {3.0, 6.0, 9.0});
    const auto [mean, sd] = mre(pred, gt);
    CHECK(r.mre_mean == mean);
    CHECK(r.mre_std == sd);
    REQUIRE(r.sdr.size() == 3);
    CHECK(r.sdr[0] == sdr(pred, gt, 3.0));
    CHECK(r.sdr[1] == sdr(pred, gt, 6.0));
    CHECK(r.sdr[2] == sdr(pred, gt, 9.0));
}

TEST_CASE("empty threshold list gives an MRE-only report") {
    const auto gt = set_of({{1, 1, 1}});
    const EvalReport r = report({gt}, {gt}, {});
    CHECK(r.sdr.empty());
    CHECK(r.mre_mean == 0.0);
}

TEST_CASE("count mismatches are rejected") {
    const auto a = set_of({{0, 0, 0}});
    const auto b = set_of({{0, 0, 0}, {1, 1, 1}});
    CHECK_THROWS_AS(mre({a}, {b}), ConfigError);
    CHECK_THROWS_AS(mre({a}, {a, a}), ConfigError);
    CHECK_THROWS_AS(sdr({a}, {a}, 0.0), ConfigError);
}
