// test_tps.cpp — TPS fit/eval oracles: interpolation, affine limit,
// constraints, bending energy, equivariance.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "cabld/errors.hpp"
#include "cabld/rng.hpp"
#include "cabld/tps.hpp"
#include "cabld/volume.hpp"

using namespace cabld;

namespace {

LandmarkSet random_set(Rng& rng, int n, double lo = 0.0, double hi = 32.0) {
    LandmarkSet s;
    for (int i = 0; i < n; ++i)
        s.points.push_back({rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)});
    return s;
}

double point_dist(const Vec3& a, const Vec3& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                     (a[2] - b[2]) * (a[2] - b[2]));
}

// closed-form affine least squares oracle
Eigen::Matrix<double, 4, 3> affine_ls(const LandmarkSet& src, const LandmarkSet& tgt) {
    const int n = src.count();
    Eigen::MatrixXd r(n, 4), y(n, 3);
    for (int i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            r(i, a) = src.points[static_cast<std::size_t>(i)][a];
            y(i, a) = tgt.points[static_cast<std::size_t>(i)][a];
        }
        r(i, 3) = 1.0;
    }
    return (r.transpose() * r).ldlt().solve(r.transpose() * y);
}

}  // namespace

TEST_CASE("kernel_phi values") {
    CHECK(kernel_phi(1.0) == 0.0);
    CHECK(kernel_phi(0.0) == 0.0);
    CHECK(kernel_phi(M_E) == doctest::Approx(M_E * M_E).epsilon(1e-12));
    CHECK_THROWS_AS(kernel_phi(-0.5), NumericalError);
}

TEST_CASE("identity correspondence fixes control points") {
    Rng rng(1);
    const LandmarkSet s = random_set(rng, 8);
    const TpsTransform t = fit_tps(s, s, 0.0);
    for (const auto& p : s.points) CHECK(point_dist(eval_tps(t, p), p) < 1e-8);
    CHECK(bending_energy(t) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("lambda=0 interpolates random configurations") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const LandmarkSet s = random_set(rng, 8);
        const LandmarkSet y = random_set(rng, 8);
        const TpsTransform t = fit_tps(s, y, 0.0);
        for (int j = 0; j < 8; ++j)
            CHECK(point_dist(eval_tps(t, s.points[static_cast<std::size_t>(j)]),
                             y.points[static_cast<std::size_t>(j)]) < 1e-6);
    }
}

TEST_CASE("lambda -> inf approaches the affine least-squares map") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const LandmarkSet s = random_set(rng, 8);
        const LandmarkSet y = random_set(rng, 8);
        const TpsTransform t = fit_tps(s, y, 1e6);
        const auto w = affine_ls(s, y);
        for (int j = 0; j < 8; ++j) {
            const auto& p = s.points[static_cast<std::size_t>(j)];
            const Vec3 got = eval_tps(t, p);
            for (int a = 0; a < 3; ++a) {
                const double want = w(0, a) * p[0] + w(1, a) * p[1] + w(2, a) * p[2] + w(3, a);
                CHECK(std::abs(got[a] - want) / 32.0 < 1e-3);
            }
        }
    }
}

TEST_CASE("constraint residuals stay below 1e-8 relative") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const LandmarkSet s = random_set(rng, 10);
        const LandmarkSet y = random_set(rng, 10);
        const TpsTransform t = fit_tps(s, y, rng.log_uniform(1e-3, 10.0));
        const double vnorm = std::max(t.V.norm(), 1e-300);
        const Eigen::RowVector3d sums = t.V.colwise().sum();
        CHECK(sums.norm() / vnorm < 1e-8);
        // second moment in normalized coordinates (the fitting space)
        Eigen::Matrix3d mom = Eigen::Matrix3d::Zero();
        for (int j = 0; j < 10; ++j) {
            Eigen::Vector3d xn;
            for (int a = 0; a < 3; ++a)
                xn[a] = (t.source_points(j, a) - t.norm_center[a]) / t.norm_scale;
            mom += t.V.row(j).transpose() * xn.transpose();
        }
        CHECK(mom.norm() / vnorm < 1e-8);
    }
}

TEST_CASE("eval matches term-by-term brute force") {
    Rng rng(5);
    const LandmarkSet s = random_set(rng, 9);
    const LandmarkSet y = random_set(rng, 9);
    const TpsTransform t = fit_tps(s, y, 0.3);
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 p{rng.uniform(-5, 37), rng.uniform(-5, 37), rng.uniform(-5, 37)};
        // brute force in normalized space
        Vec3 pn;
        for (int a = 0; a < 3; ++a) pn[a] = (p[a] - t.norm_center[a]) / t.norm_scale;
        Vec3 acc{};
        for (int a = 0; a < 3; ++a)
            acc[a] = t.W(0, a) * pn[0] + t.W(1, a) * pn[1] + t.W(2, a) * pn[2] + t.W(3, a);
        for (int j = 0; j < 9; ++j) {
            Vec3 xn;
            for (int a = 0; a < 3; ++a)
                xn[a] = (t.source_points(j, a) - t.norm_center[a]) / t.norm_scale;
            const double d = point_dist(xn, pn);
            const double k = kernel_phi(d);
            for (int a = 0; a < 3; ++a) acc[a] += t.V(j, a) * k;
        }
        for (int a = 0; a < 3; ++a) acc[a] = acc[a] * t.norm_scale + t.norm_center[a];
        const Vec3 got = eval_tps(t, p);
        for (int a = 0; a < 3; ++a) CHECK(got[a] == doctest::Approx(acc[a]).epsilon(1e-12));
    }
}

TEST_CASE("pure affine transform has zero bending energy and affine eval") {
    Rng rng(6);
    TpsTransform t;
    t.V = Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(5, 3);
    t.source_points = Eigen::Matrix<double, Eigen::Dynamic, 3>::Random(5, 3);
    t.W.setZero();
    t.W(0, 0) = t.W(1, 1) = t.W(2, 2) = 1.0;  // identity affine in normalized space
    t.norm_center = {0, 0, 0};
    t.norm_scale = 1.0;
    CHECK(bending_energy(t) == 0.0);
    for (int trial = 0; trial < 10; ++trial) {
        const Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const Vec3 got = eval_tps(t, p);
        for (int a = 0; a < 3; ++a) CHECK(got[a] == doctest::Approx(p[a]).epsilon(1e-12));
    }
}

TEST_CASE("bending energy is nonnegative and nonincreasing in lambda") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const LandmarkSet s = random_set(rng, 8);
        const LandmarkSet y = random_set(rng, 8);
        double prev = std::numeric_limits<double>::infinity();
        for (double lam : {1e-3, 1e-1, 1.0, 10.0}) {
            const double e = bending_energy(fit_tps(s, y, lam));
            CHECK(e >= -1e-12);
            CHECK(e <= prev * (1.0 + 1e-9) + 1e-12);
            prev = e;
        }
    }
}

TEST_CASE("fit is equivariant under simultaneous rigid motion") {
    Rng rng(8);
    const LandmarkSet s = random_set(rng, 8);
    const LandmarkSet y = random_set(rng, 8);
    const TpsTransform t = fit_tps(s, y, 0.5);
    // rigid motion: rotate 40 deg about z then translate
    const double th = 40.0 * M_PI / 180.0;
    const double c = std::cos(th), sn = std::sin(th);
    const Vec3 d{5.0, -3.0, 2.0};
    auto rigid = [&](const Vec3& p) {
        return Vec3{c * p[0] - sn * p[1] + d[0], sn * p[0] + c * p[1] + d[1], p[2] + d[2]};
    };
    LandmarkSet s2, y2;
    for (const auto& p : s.points) s2.points.push_back(rigid(p));
    for (const auto& p : y.points) y2.points.push_back(rigid(p));
    const TpsTransform t2 = fit_tps(s2, y2, 0.5);
    for (int j = 0; j < 8; ++j) {
        const Vec3 want = rigid(eval_tps(t, s.points[static_cast<std::size_t>(j)]));
        const Vec3 got = eval_tps(t2, s2.points[static_cast<std::size_t>(j)]);
        CHECK(point_dist(want, got) < 1e-6);
    }
}

TEST_CASE("degenerate configurations are rejected") {
    LandmarkSet flat;  // coplanar (z = 0)
    Rng rng(9);
    for (int i = 0; i < 8; ++i) flat.points.push_back({rng.uniform(0, 32), rng.uniform(0, 32), 0.0});
    const LandmarkSet y = random_set(rng, 8);
    CHECK_THROWS_AS(fit_tps(flat, y, 0.0), SingularSystem);

    LandmarkSet a = random_set(rng, 8), b = random_set(rng, 7);
    CHECK_THROWS_AS(fit_tps(a, b, 0.0), ConfigError);
    CHECK_THROWS_AS(fit_tps(b, b, -1.0), ConfigError);

    LandmarkSet tiny;
    for (int i = 0; i < 3; ++i) tiny.points.push_back({double(i), 0, 0});
    CHECK_THROWS_AS(fit_tps(tiny, tiny, 0.0), ConfigError);
}

TEST_CASE("dense field equals per-voxel eval and drives resampling") {
    Rng rng(10);
    const LandmarkSet s = random_set(rng, 8, 2, 14);
    LandmarkSet y;
    for (const auto& p : s.points)
        y.points.push_back({p[0] + rng.normal(0, 1.0), p[1] + rng.normal(0, 1.0),
                            p[2] + rng.normal(0, 1.0)});
    const TpsTransform t = fit_tps(s, y, 0.01);
    const std::array<int, 3> shape{16, 16, 16};
    const DeformationField f = dense_field(t, shape, {1, 1, 1}, {0, 0, 0});
    Volume3D vol = make_volume(shape);
    for (auto& x : vol.data) x = static_cast<float>(rng.uniform01());
    const Volume3D direct = resample_by_field(vol, f, shape, {1, 1, 1}, {0, 0, 0});
    for (int k = 0; k < 16; ++k)
        for (int j = 0; j < 16; ++j)
            for (int i = 0; i < 16; ++i) {
                const auto u = vol.flat(i, j, k);
                const Vec3 q = eval_tps(t, {double(i), double(j), double(k)});
                CHECK(f.xyz[3 * u] == doctest::Approx(q[0]).epsilon(1e-12));
                CHECK(f.xyz[3 * u + 1] == doctest::Approx(q[1]).epsilon(1e-12));
                CHECK(f.xyz[3 * u + 2] == doctest::Approx(q[2]).epsilon(1e-12));
                CHECK(direct.at(i, j, k) == static_cast<float>(sample_trilinear(vol, q)));
            }
}

TEST_CASE("identity transform dense field equals the coordinate grid") {
    TpsTransform t;
    t.V = Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(4, 3);
    t.source_points = Eigen::Matrix<double, Eigen::Dynamic, 3>::Random(4, 3);
    t.W.setZero();
    t.W(0, 0) = t.W(1, 1) = t.W(2, 2) = 1.0;
    t.norm_center = {0, 0, 0};
    t.norm_scale = 1.0;
    const DeformationField f = dense_field(t, {4, 4, 4}, {2, 1, 1}, {1, 0, -3});
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i) {
                const std::int64_t u = i + 4 * (j + 4 * k);
                CHECK(f.xyz[3 * u] == doctest::Approx(1.0 + 2.0 * i).epsilon(1e-12));
                CHECK(f.xyz[3 * u + 1] == doctest::Approx(double(j)).epsilon(1e-12));
                CHECK(f.xyz[3 * u + 2] == doctest::Approx(-3.0 + k).epsilon(1e-12));
            }
}

TEST_CASE("TPS JSON round trip") {
    Rng rng(11);
    const LandmarkSet s = random_set(rng, 8);
    const LandmarkSet y = random_set(rng, 8);
    const TpsTransform t = fit_tps(s, y, 2.5);
    const std::string path = "/tmp/cabld_test_tps.json";
    save_tps(t, path);
    const TpsTransform u = load_tps(path);
    CHECK(u.lambda == t.lambda);
    CHECK(u.norm_scale == t.norm_scale);
    CHECK((u.V - t.V).norm() == 0.0);
    CHECK((u.W - t.W).norm() == 0.0);
    for (int trial = 0; trial < 5; ++trial) {
        const Vec3 p{rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 32)};
        CHECK(point_dist(eval_tps(t, p), eval_tps(u, p)) < 1e-12);
    }
}
