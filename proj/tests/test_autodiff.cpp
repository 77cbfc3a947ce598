// test_autodiff.cpp — per-op gradient oracles (central finite differences),
// accumulation semantics, solve implicit differentiation, TPS graph paths.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cabld/ad/grad_check.hpp"
#include "cabld/ad/graph.hpp"
#include "cabld/ad/tps_graph.hpp"
#include "cabld/errors.hpp"
#include "cabld/rng.hpp"
#include "cabld/tps.hpp"

using namespace cabld;
using namespace cabld::ad;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace

TEST_CASE("relu forward values") {
    Graph g;
    Tensor x = g.constant({3}, {-1.0, 0.0, 2.0});
    Tensor y = relu(x);
    CHECK(y.val() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("leaky relu with slope 0.2") {
    Graph g;
    Tensor y = leaky_relu(g.constant({1}, {-1.0}), 0.2);
    CHECK(y.val()[0] == doctest::Approx(-0.2).epsilon(1e-15));
}

TEST_CASE("identity solve returns the right-hand side") {
    Graph g;
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i) * 4 + i] = 1.0;
    Tensor a = g.constant({4, 4}, eye);
    Tensor b = g.constant({4, 1}, {1, 2, 3, 4});
    Tensor x = linear_solve(a, b);
    for (int i = 0; i < 4; ++i) CHECK(x.val()[static_cast<std::size_t>(i)] == doctest::Approx(i + 1.0));
}

TEST_CASE("quadratic gradient: d sum(w*w)/dw = 2w") {
    Graph g;
    Tensor w = g.param({2}, {1.0, 2.0});
    Tensor loss = reduce_sum(mul(w, w));
    g.backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(2.0));
    CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("diagonal solve gradient: grad b of sum(solve(2I, b)) is 0.5") {
    Graph g;
    Tensor a = g.constant({2, 2}, {2, 0, 0, 2});
    Tensor b = g.param({2, 1}, {1.0, 1.0});
    Tensor loss = reduce_sum(linear_solve(a, b));
    g.backward(loss);
    CHECK(b.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b.grad()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("gradient accumulates over multiple uses") {
    Graph g;
    Tensor x = g.param({2}, {3.0, -1.0});
    Tensor y = add(mul(x, x), scale(x, 2.0));  // x^2 + 2x, two uses of x
    g.backward(reduce_sum(y));
    CHECK(x.grad()[0] == doctest::Approx(2.0 * 3.0 + 2.0));
    CHECK(x.grad()[1] == doctest::Approx(2.0 * -1.0 + 2.0));
}

TEST_CASE("backward requires a scalar and rejects NaN") {
    Graph g;
    Tensor x = g.param({2}, {1.0, 2.0});
    CHECK_THROWS_AS(g.backward(x), NumericalError);
    CHECK_THROWS((void)g.constant({1}, {std::nan("")}));
}

TEST_CASE("grad_check is exact for linear programs") {
    const double err = grad_check(
        [](Graph& g, Tensor x) { return reduce_sum(scale(x, 3.0)); }, {4},
        {0.5, -0.25, 1.5, 2.0});
    CHECK(err < 1e-10);
}

TEST_CASE("elementwise and shape op gradients match finite differences") {
    Rng rng(1);
    const auto x0 = random_vec(12, rng);

    CHECK(grad_check([](Graph& g, Tensor x) { return reduce_sum(mul(x, x)); }, {12}, x0) < 1e-8);
    CHECK(grad_check([](Graph& g, Tensor x) { return reduce_mean(mul(x, add_scalar(x, 0.7))); },
                     {12}, x0) < 1e-8);
    CHECK(grad_check(
              [](Graph& g, Tensor x) {
                  Tensor t = transpose(reshape(x, {3, 4}));
                  return reduce_sum(mul(t, t));
              },
              {12}, x0) < 1e-8);
    CHECK(grad_check(
              [](Graph& g, Tensor x) {
                  Tensor a = slice_rows(reshape(x, {4, 3}), 0, 2);
                  Tensor b = slice_rows(reshape(x, {4, 3}), 2, 4);
                  Tensor c = concat_cols(a, b);
                  Tensor d = concat_rows(c, c);
                  return reduce_mean(mul(d, d));
              },
              {12}, x0) < 1e-8);

    // relu/leaky away from the kink (|x| > 10*eps)
    auto far = x0;
    for (double& v : far)
        if (std::abs(v) < 1e-3) v = 0.1;
    CHECK(grad_check([](Graph& g, Tensor x) { return reduce_sum(mul(relu(x), x)); }, {12}, far) <
          1e-6);
    CHECK(grad_check([](Graph& g, Tensor x) { return reduce_sum(leaky_relu(x, 0.2)); }, {12},
                     far) < 1e-6);
}

TEST_CASE("matmul / rownorm / softmax gradients match finite differences") {
    Rng rng(2);
    const auto x0 = random_vec(12, rng, 0.2, 1.5);
    CHECK(grad_check(
              [](Graph& g, Tensor x) {
                  Tensor a = reshape(x, {3, 4});
                  Tensor b = g.constant({4, 2}, {0.3, -1, 0.5, 2, 1, 1, -0.7, 0.1});
                  return reduce_sum(mul(matmul(a, b), matmul(a, b)));
              },
              {12}, x0) < 1e-7);
    CHECK(grad_check([](Graph& g, Tensor x) { return reduce_sum(row_norm(reshape(x, {4, 3}))); },
                     {12}, x0) < 1e-7);
    CHECK(grad_check(
              [](Graph& g, Tensor x) {
                  Tensor p = spatial_softmax(reshape(x, {2, 6}));
                  Tensor c = g.constant({6, 1}, {1, 2, 3, 4, 5, 6});
                  return reduce_sum(mul(matmul(p, c), matmul(p, c)));
              },
              {12}, x0) < 1e-6);
    CHECK(grad_check(
              [](Graph& g, Tensor x) {
                  Tensor s = sqrt_elem(add_scalar(mul(x, x), 0.5));
                  return reduce_sum(mul(s, recip(add_scalar(s, 1.0))));
              },
              {12}, x0) < 1e-7);
}

TEST_CASE("conv3d forward against a hand-rolled loop and FD gradients") {
    Rng rng(3);
    // forward oracle on a tiny asymmetric case
    const int nx = 3, ny = 4, nz = 3;
    const auto xv = random_vec(static_cast<std::size_t>(2 * nx * ny * nz), rng);
    const auto wv = random_vec(2 * 2 * 27, rng);
    Graph g;
    Tensor x = g.constant({2, nx, ny, nz}, xv);
    Tensor w = g.constant({2, 2, 3, 3, 3}, wv);
    Tensor y = conv3d(x, w, 1);
    auto xat = [&](int c, int i, int j, int k) -> double {
        if (i < 0 || i >= nx || j < 0 || j >= ny || k < 0 || k >= nz) return 0.0;
        return xv[static_cast<std::size_t>(((c * nz + k) * ny + j) * nx + i)];
    };
    // layout is [c][z][y][x] with x fastest: flat = c*(nx*ny*nz) + x + nx*(y + ny*z)
    auto xat2 = [&](int c, int i, int j, int k) -> double {
        if (i < 0 || i >= nx || j < 0 || j >= ny || k < 0 || k >= nz) return 0.0;
        return xv[static_cast<std::size_t>(c * nx * ny * nz + i + nx * (j + ny * k))];
    };
    (void)xat;
    for (int co = 0; co < 2; ++co)
        for (int k = 0; k < nz; ++k)
            for (int j = 0; j < ny; ++j)
                for (int i = 0; i < nx; ++i) {
                    double acc = 0;
                    for (int ci = 0; ci < 2; ++ci)
                        for (int dz = 0; dz < 3; ++dz)
                            for (int dy = 0; dy < 3; ++dy)
                                for (int dx = 0; dx < 3; ++dx)
                                    acc += wv[static_cast<std::size_t>(
                                               (((co * 2 + ci) * 3 + dz) * 3 + dy) * 3 + dx)] *
                                           xat2(ci, i + dx - 1, j + dy - 1, k + dz - 1);
                    const double got =
                        y.val()[static_cast<std::size_t>(co * nx * ny * nz + i + nx * (j + ny * k))];
                    CHECK(got == doctest::Approx(acc).epsilon(1e-10));
                }

    // FD on weights for a 1x1x8^3-ish input
    const auto big = random_vec(8 * 8 * 8, rng);
    Graph g2;
    const auto w0 = random_vec(27, rng);
    const double err = grad_check(
        [&big](Graph& gg, Tensor wt) {
            Tensor xx = gg.constant({1, 8, 8, 8}, big);
            Tensor yy = conv3d(xx, reshape(wt, {1, 1, 3, 3, 3}), 1);
            return reduce_sum(mul(yy, yy));
        },
        {27}, w0);
    CHECK(err < 1e-4);

    // FD on the input
    const auto small_in = random_vec(6 * 6 * 6, rng);
    const double err2 = grad_check(
        [&w0](Graph& gg, Tensor xt) {
            Tensor ww = gg.constant({1, 1, 3, 3, 3}, w0);
            Tensor yy = conv3d(reshape(xt, {1, 6, 6, 6}), ww, 1);
            return reduce_sum(mul(yy, yy));
        },
        {6 * 6 * 6}, small_in);
    CHECK(err2 < 1e-4);
}

TEST_CASE("instance norm handles constant input and matches FD") {
    Graph g;
    Tensor x = g.constant({2, 2, 2, 2}, std::vector<double>(16, 0.0));
    Tensor sc = g.constant({2}, {1.0, 1.0});
    Tensor sh = g.constant({2}, {0.25, -0.5});
    Tensor y = instance_norm(x, sc, sh);
    for (int i = 0; i < 8; ++i) CHECK(y.val()[static_cast<std::size_t>(i)] == 0.25);
    for (int i = 8; i < 16; ++i) CHECK(y.val()[static_cast<std::size_t>(i)] == -0.5);

    Rng rng(4);
    const auto xv = random_vec(2 * 27, rng);
    CHECK(grad_check(
              [](Graph& gg, Tensor xt) {
                  Tensor scale_t = gg.constant({2}, {1.3, 0.8});
                  Tensor shift_t = gg.constant({2}, {0.1, -0.2});
                  Tensor n = instance_norm(reshape(xt, {2, 3, 3, 3}), scale_t, shift_t);
                  return reduce_sum(mul(n, n));
              },
              {54}, xv) < 1e-5);
    // scale/shift gradients
    const auto xfix = random_vec(2 * 27, rng);
    CHECK(grad_check(
              [&xfix](Graph& gg, Tensor p) {
                  Tensor scale_t = slice_rows(reshape(p, {4, 1}), 0, 2);
                  Tensor shift_t = slice_rows(reshape(p, {4, 1}), 2, 4);
                  Tensor n = instance_norm(gg.constant({2, 3, 3, 3}, xfix),
                                           reshape(scale_t, {2}), reshape(shift_t, {2}));
                  return reduce_sum(mul(n, n));
              },
              {4}, {1.1, 0.9, 0.2, -0.3}) < 1e-6);
}

TEST_CASE("max pool forward, tie-breaking and FD gradient") {
    Graph g;
    std::vector<double> xv(8, 1.0);  // 1x2x2x2, all equal: first element wins
    Tensor y = max_pool3d(g.param({1, 2, 2, 2}, xv));
    CHECK(y.numel() == 1);
    CHECK(y.val()[0] == 1.0);
    g.backward(reduce_sum(y));
    CHECK(g.node(0).grad[0] == 1.0);
    for (int i = 1; i < 8; ++i) CHECK(g.node(0).grad[static_cast<std::size_t>(i)] == 0.0);

    Rng rng(5);
    auto xr = random_vec(4 * 4 * 4, rng);
    CHECK(grad_check(
              [](Graph& gg, Tensor xt) {
                  Tensor p = max_pool3d(reshape(xt, {1, 4, 4, 4}));
                  return reduce_sum(mul(p, p));
              },
              {64}, xr) < 1e-6);
}

TEST_CASE("sqdist and tps_kernel gradients match FD away from coincidence") {
    Rng rng(6);
    const auto pts = random_vec(12, rng, 0.0, 4.0);
    CHECK(grad_check(
              [](Graph& gg, Tensor x) {
                  Tensor a = reshape(x, {4, 3});
                  Tensor b = gg.constant({2, 3}, {9.0, 8.5, 7.0, -3.0, -4.0, -5.5});
                  return reduce_sum(sqdist(a, b));
              },
              {12}, pts) < 1e-7);
    CHECK(grad_check(
              [](Graph& gg, Tensor x) {
                  Tensor a = reshape(x, {4, 3});
                  Tensor b = gg.constant({2, 3}, {9.0, 8.5, 7.0, -3.0, -4.0, -5.5});
                  return reduce_sum(tps_kernel(sqdist(a, b)));
              },
              {12}, pts) < 1e-6);
    // self-distance: the diagonal is exactly zero and its gradient is defined 0
    Graph g;
    Tensor a = g.param({3, 3}, random_vec(9, rng));
    Tensor k = tps_kernel(sqdist(a, a));
    g.backward(reduce_sum(k));
    for (double gv : a.grad()) CHECK(std::isfinite(gv));
}

TEST_CASE("linear solve gradients match FD on well-conditioned 6x6 systems") {
    Rng rng(7);
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<double> a0(36);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j)
                a0[static_cast<std::size_t>(i) * 6 + j] = rng.uniform(-1, 1) + (i == j ? 4.0 : 0.0);
        const auto b0 = random_vec(12, rng);
        // grad wrt A
        CHECK(grad_check(
                  [&b0](Graph& gg, Tensor at) {
                      Tensor b = gg.constant({6, 2}, b0);
                      Tensor x = linear_solve(reshape(at, {6, 6}), b);
                      return reduce_sum(mul(x, x));
                  },
                  {36}, a0) < 1e-6);
        // grad wrt B
        CHECK(grad_check(
                  [&a0](Graph& gg, Tensor bt) {
                      Tensor a = gg.constant({6, 6}, a0);
                      Tensor x = linear_solve(a, reshape(bt, {6, 2}));
                      return reduce_sum(mul(x, x));
                  },
                  {12}, b0) < 1e-6);
    }
}

TEST_CASE("singular solve is rejected") {
    Graph g;
    std::vector<double> a(16, 1.0);  // rank-1
    Tensor at = g.constant({4, 4}, a);
    Tensor bt = g.constant({4, 1}, {1, 2, 3, 4});
    CHECK_THROWS_AS(linear_solve(at, bt), SingularSystem);
}

TEST_CASE("warp_trilinear matches sample_trilinear and FD in the field") {
    Rng rng(8);
    auto vol = std::make_shared<Volume3D>(make_volume({6, 6, 6}, {1.5, 1, 1}, {0, -1, 2}));
    for (auto& f : vol->data) f = static_cast<float>(rng.uniform01());
    std::vector<double> f0;
    for (int i = 0; i < 5; ++i) {
        // keep away from voxel-boundary kinks for the FD check
        const Vec3 p = vol->world(1.0 + 0.31 * i + 0.17, 0.5 + 0.41 * i + 0.13, 0.7 * i + 0.29);
        f0.insert(f0.end(), {p[0], p[1], p[2]});
    }
    {
        Graph g;
        Tensor field = g.constant({5, 3}, f0);
        Tensor out = warp_trilinear(field, vol);
        for (int i = 0; i < 5; ++i) {
            const Vec3 p{f0[static_cast<std::size_t>(3 * i)], f0[static_cast<std::size_t>(3 * i + 1)],
                         f0[static_cast<std::size_t>(3 * i + 2)]};
            CHECK(out.val()[static_cast<std::size_t>(i)] ==
                  doctest::Approx(sample_trilinear(*vol, p)).epsilon(1e-12));
        }
    }
    CHECK(grad_check(
              [&vol](Graph& gg, Tensor field) {
                  Tensor out = warp_trilinear(reshape(field, {5, 3}), vol);
                  return reduce_sum(mul(out, out));
              },
              {15}, f0, 1e-6) < 1e-4);
}

TEST_CASE("graph TPS fit matches the plain fit and interpolates") {
    Rng rng(9);
    LandmarkSet src, tgt;
    for (int i = 0; i < 8; ++i) {
        src.points.push_back({rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 32)});
        tgt.points.push_back({rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 32)});
    }
    const double lam = 0.7;
    const TpsTransform plain = fit_tps(src, tgt, lam);

    Graph g;
    std::vector<double> sv, tv;
    for (const auto& p : src.points) sv.insert(sv.end(), p.begin(), p.end());
    for (const auto& p : tgt.points) tv.insert(tv.end(), p.begin(), p.end());
    const TpsFitNodes fit = tps_fit_graph(g, g.constant({8, 3}, sv), g.constant({8, 3}, tv), lam);
    for (int i = 0; i < 8; ++i)
        for (int a = 0; a < 3; ++a) {
            CHECK(fit.V.val()[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(a)] ==
                  doctest::Approx(plain.V(i, a)).epsilon(1e-9));
        }
    // eval agreement on random points
    std::vector<double> qv;
    for (int i = 0; i < 4; ++i)
        qv.insert(qv.end(), {rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 32)});
    Tensor out = tps_eval_graph(g, fit, g.constant({4, 3}, qv));
    for (int i = 0; i < 4; ++i) {
        const Vec3 want = eval_tps(plain, {qv[static_cast<std::size_t>(3 * i)],
                                           qv[static_cast<std::size_t>(3 * i + 1)],
                                           qv[static_cast<std::size_t>(3 * i + 2)]});
        for (int a = 0; a < 3; ++a)
            CHECK(out.val()[static_cast<std::size_t>(3 * i + a)] ==
                  doctest::Approx(want[a]).epsilon(1e-9));
    }
}

TEST_CASE("gradient flows through the TPS fit into the source points") {
    Rng rng(10);
    std::vector<double> src0, tgt0;
    for (int i = 0; i < 6; ++i) {
        src0.insert(src0.end(),
                    {rng.uniform(4, 28), rng.uniform(4, 28), rng.uniform(4, 28)});
        tgt0.insert(tgt0.end(),
                    {rng.uniform(4, 28), rng.uniform(4, 28), rng.uniform(4, 28)});
    }
    // residual loss of the regularized fit evaluated at the (variable) source
    const double err = grad_check(
        [&tgt0](Graph& gg, Tensor src) {
            Tensor pts = reshape(src, {6, 3});
            Tensor tgt = gg.constant({6, 3}, tgt0);
            const TpsFitNodes fit = tps_fit_graph(gg, pts, tgt, 0.8);
            Tensor at_src = tps_eval_graph(gg, fit, pts);
            Tensor d = sub(at_src, tgt);
            return reduce_mean(row_norm(d));
        },
        {18}, src0, 1e-5);
    CHECK(err < 1e-5);
}

TEST_CASE("dense field graph equals the plain dense field") {
    Rng rng(11);
    LandmarkSet ctrl;
    for (int i = 0; i < 6; ++i)
        ctrl.points.push_back({rng.uniform(4, 12), rng.uniform(4, 12), rng.uniform(4, 12)});
    std::vector<double> tgt0;
    for (int i = 0; i < 6; ++i)
        tgt0.insert(tgt0.end(), {rng.uniform(4, 12), rng.uniform(4, 12), rng.uniform(4, 12)});

    const std::array<int, 3> shape{8, 8, 8};
    const GridKernel gk = make_grid_kernel(ctrl, shape, {1, 1, 1}, {0, 0, 0});

    Graph g;
    std::vector<double> cv;
    for (const auto& p : ctrl.points) cv.insert(cv.end(), p.begin(), p.end());
    const TpsFitNodes fit =
        tps_fit_graph(g, g.constant({6, 3}, cv), g.constant({6, 3}, tgt0), 0.05);
    Tensor field = tps_dense_field_graph(g, fit, gk);

    LandmarkSet tgt_lm;
    for (int i = 0; i < 6; ++i)
        tgt_lm.points.push_back({tgt0[static_cast<std::size_t>(3 * i)],
                                 tgt0[static_cast<std::size_t>(3 * i + 1)],
                                 tgt0[static_cast<std::size_t>(3 * i + 2)]});
    const TpsTransform plain = fit_tps(ctrl, tgt_lm, 0.05);
    const DeformationField pf = dense_field(plain, shape, {1, 1, 1}, {0, 0, 0});
    for (std::size_t i = 0; i < pf.xyz.size(); ++i)
        CHECK(field.val()[i] == doctest::Approx(pf.xyz[i]).epsilon(1e-9));
}

TEST_CASE("backward is deterministic") {
    Rng rng(12);
    const auto xv = random_vec(4 * 4 * 4, rng);
    auto run = [&xv]() {
        Graph g;
        Tensor x = g.param({1, 4, 4, 4}, xv);
        Tensor w = g.constant({2, 1, 3, 3, 3}, std::vector<double>(54, 0.123));
        Tensor y = conv3d(x, w, 1);
        Tensor sc = g.constant({2}, {1.0, 0.5});
        Tensor sh = g.constant({2}, {0.0, 0.1});
        g.backward(reduce_mean(mul(y, instance_norm(y, sc, sh))));
        return x.grad();
    };
    const auto g1 = run();
    const auto g2 = run();
    CHECK(g1 == g2);
}
