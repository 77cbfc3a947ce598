// tps_graph.cpp — in-graph TPS fit/eval/rasterize.

#include "cabld/ad/tps_graph.hpp"

#include <cmath>

#include "cabld/errors.hpp"

namespace cabld::ad {

namespace {

Tensor ones_col(Graph& g, int n) {
    return g.constant({n, 1}, std::vector<double>(static_cast<std::size_t>(n), 1.0));
}

inline double kernel_from_sqdist(double s) {
    return s > 0.0 ? 0.5 * s * std::log(s) : 0.0;
}

}  // namespace

TpsFitNodes tps_fit_graph(Graph& g, Tensor src, Tensor tgt, double lambda) {
    if (src.shape().size() != 2 || src.shape()[1] != 3 || src.shape() != tgt.shape())
        throw NumericalError("tps_fit_graph: expects matching [n x 3] point sets");
    const int n = src.shape()[0];
    if (n <= 3) throw ConfigError("tps_fit_graph: needs more than 3 point pairs");
    if (lambda < 0.0) throw ConfigError("tps_fit_graph: lambda must be >= 0");

    Tensor ones = ones_col(g, n);
    Tensor c = scale(matmul(transpose(ones), src), 1.0 / n);  // [1 x 3]
    Tensor cb = matmul(ones, c);                              // broadcast rows
    Tensor xc = sub(src, cb);
    Tensor s2 = scale(reduce_sum(mul(xc, xc)), 1.0 / n);      // mean squared radius
    if (!(s2.val()[0] > 0.0)) throw SingularSystem("tps_fit_graph: coincident source points");
    Tensor s = sqrt_elem(s2);
    Tensor inv = recip(s);
    Tensor sn = scale_by(xc, inv);
    Tensor tn = scale_by(sub(tgt, cb), inv);

    Tensor m = tps_kernel(sqdist(sn, sn));
    std::vector<double> eye(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) eye[static_cast<std::size_t>(i) * n + i] = lambda;
    Tensor mlam = add(m, g.constant({n, n}, std::move(eye)));

    Tensor r = concat_cols(sn, ones);  // [n x 4]
    Tensor a = concat_rows(concat_cols(mlam, r),
                           concat_cols(transpose(r), g.constant({4, 4}, std::vector<double>(16, 0.0))));
    Tensor b = concat_rows(tn, g.constant({4, 3}, std::vector<double>(12, 0.0)));
    Tensor x = linear_solve(a, b);

    TpsFitNodes out;
    out.V = slice_rows(x, 0, n);
    out.W = slice_rows(x, n, n + 4);
    out.src_n = sn;
    out.center = c;
    out.scale = s;
    out.inv_scale = inv;
    out.n = n;
    return out;
}

Tensor tps_eval_graph(Graph& g, const TpsFitNodes& t, Tensor pts) {
    if (pts.shape().size() != 2 || pts.shape()[1] != 3)
        throw NumericalError("tps_eval_graph: expects [m x 3] points");
    const int m = pts.shape()[0];
    Tensor ones = ones_col(g, m);
    Tensor pn = scale_by(sub(pts, matmul(ones, t.center)), t.inv_scale);
    Tensor k = tps_kernel(sqdist(pn, t.src_n));
    Tensor ptilde = concat_cols(pn, ones);
    Tensor out_n = add(matmul(k, t.V), matmul(ptilde, t.W));
    return add(scale_by(out_n, t.scale), matmul(ones, t.center));
}

GridKernel make_grid_kernel(const LandmarkSet& control_points, const std::array<int, 3>& shape,
                            const Vec3& spacing, const Vec3& origin) {
    control_points.validate();
    const int n = control_points.count();
    GridKernel gk;
    gk.n = n;
    gk.vcount = static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];

    double cx = 0, cy = 0, cz = 0;
    for (const auto& p : control_points.points) {
        cx += p[0];
        cy += p[1];
        cz += p[2];
    }
    cx /= n;
    cy /= n;
    cz /= n;
    double s2 = 0;
    for (const auto& p : control_points.points)
        s2 += (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy) + (p[2] - cz) * (p[2] - cz);
    s2 /= n;
    if (!(s2 > 0.0)) throw SingularSystem("make_grid_kernel: coincident control points");
    const double s = std::sqrt(s2);
    gk.center = {cx, cy, cz};
    gk.scale = s;

    std::vector<std::array<double, 3>> cn(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        const auto& p = control_points.points[static_cast<std::size_t>(j)];
        cn[static_cast<std::size_t>(j)] = {(p[0] - cx) / s, (p[1] - cy) / s, (p[2] - cz) / s};
    }

    gk.phi.resize(static_cast<std::size_t>(gk.vcount) * n);
    gk.gtilde.resize(static_cast<std::size_t>(gk.vcount) * 4);
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < gk.vcount; ++u) {
        const int i = static_cast<int>(u % shape[0]);
        const int j = static_cast<int>((u / shape[0]) % shape[1]);
        const int k = static_cast<int>(u / (static_cast<std::int64_t>(shape[0]) * shape[1]));
        const double gx = (origin[0] + i * spacing[0] - cx) / s;
        const double gy = (origin[1] + j * spacing[1] - cy) / s;
        const double gz = (origin[2] + k * spacing[2] - cz) / s;
        gk.gtilde[static_cast<std::size_t>(u) * 4 + 0] = gx;
        gk.gtilde[static_cast<std::size_t>(u) * 4 + 1] = gy;
        gk.gtilde[static_cast<std::size_t>(u) * 4 + 2] = gz;
        gk.gtilde[static_cast<std::size_t>(u) * 4 + 3] = 1.0;
        for (int q = 0; q < n; ++q) {
            const auto& pq = cn[static_cast<std::size_t>(q)];
            const double dx = pq[0] - gx, dy = pq[1] - gy, dz = pq[2] - gz;
            gk.phi[static_cast<std::size_t>(u) * n + q] =
                kernel_from_sqdist(dx * dx + dy * dy + dz * dz);
        }
    }
    return gk;
}

Tensor tps_dense_field_graph(Graph& g, const TpsFitNodes& t, const GridKernel& gk) {
    if (t.n != gk.n) throw NumericalError("tps_dense_field_graph: control point count mismatch");
    const int v = static_cast<int>(gk.vcount);
    Tensor phi = g.constant({v, gk.n}, gk.phi);
    Tensor gt = g.constant({v, 4}, gk.gtilde);
    Tensor field_n = add(matmul(phi, t.V), matmul(gt, t.W));
    // denormalize: mm = n * s + c
    Tensor ones = g.constant({v, 1}, std::vector<double>(static_cast<std::size_t>(v), 1.0));
    Tensor cb = matmul(ones, g.constant({1, 3}, {gk.center[0], gk.center[1], gk.center[2]}));
    return add(scale(field_n, gk.scale), cb);
}

}  // namespace cabld::ad
