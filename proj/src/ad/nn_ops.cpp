// nn_ops.cpp — convolution, normalization, pooling, spatial softmax.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include <Eigen/Dense>

#include "cabld/ad/graph.hpp"
#include "cabld/errors.hpp"

namespace cabld::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

namespace {

void require(bool ok, const char* msg) {
    if (!ok) throw NumericalError(msg);
}

// deterministic row-chunked product C = A * B (see graph.cpp gemm; duplicated
// here with accumulate support for the conv backward passes)
void gemm_rows(const double* a, const double* b, double* c, int m, int k, int n) {
    CMap am(a, m, k);
    CMap bm(b, k, n);
    MMap cm(c, m, n);
    const int chunk = 8;
    const int nchunks = (m + chunk - 1) / chunk;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < nchunks; ++ci) {
        const int r0 = ci * chunk;
        const int len = std::min(chunk, m - r0);
        cm.middleRows(r0, len).noalias() = am.middleRows(r0, len) * bm;
    }
}

}  // namespace

Tensor conv3d(Tensor x, Tensor w, int pad) {
    Graph& g = *x.graph;
    require(x.shape().size() == 4, "conv3d: input must be [C, nx, ny, nz]");
    require(w.shape().size() == 5, "conv3d: weight must be [Cout, Cin, k, k, k]");
    const int cin = x.shape()[0], nx = x.shape()[1], ny = x.shape()[2], nz = x.shape()[3];
    const int cout = w.shape()[0], k = w.shape()[2];
    require(w.shape()[1] == cin, "conv3d: channel mismatch");
    require(w.shape()[3] == k && w.shape()[4] == k, "conv3d: kernel must be cubic");
    require(pad >= 0, "conv3d: bad padding");
    const int ox = nx + 2 * pad - k + 1, oy = ny + 2 * pad - k + 1, oz = nz + 2 * pad - k + 1;
    require(ox >= 1 && oy >= 1 && oz >= 1, "conv3d: kernel larger than padded input");

    const int k3 = k * k * k;
    const int kcols = cin * k3;                               // im2col rows
    const std::int64_t vout = static_cast<std::int64_t>(ox) * oy * oz;
    auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(kcols) * vout);

    const auto& xv = x.val();
    const std::int64_t plane = static_cast<std::int64_t>(nx) * ny * nz;
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < vout; ++s) {
        const int ix = static_cast<int>(s % ox);
        const int iy = static_cast<int>((s / ox) % oy);
        const int iz = static_cast<int>(s / (static_cast<std::int64_t>(ox) * oy));
        for (int ci = 0; ci < cin; ++ci)
            for (int dz = 0; dz < k; ++dz) {
                const int z = iz + dz - pad;
                for (int dy = 0; dy < k; ++dy) {
                    const int y = iy + dy - pad;
                    for (int dx = 0; dx < k; ++dx) {
                        const int xx = ix + dx - pad;
                        const std::int64_t r = ci * k3 + (dz * k + dy) * k + dx;
                        double v = 0.0;
                        if (xx >= 0 && xx < nx && y >= 0 && y < ny && z >= 0 && z < nz)
                            v = xv[static_cast<std::size_t>(ci * plane + xx +
                                                            static_cast<std::int64_t>(nx) *
                                                                (y + static_cast<std::int64_t>(ny) * z))];
                        (*col)[static_cast<std::size_t>(r * vout + s)] = v;
                    }
                }
            }
    }

    std::vector<double> out(static_cast<std::size_t>(cout) * vout);
    gemm_rows(w.val().data(), col->data(), out.data(), cout, kcols, static_cast<int>(vout));

    const bool rgx = g.node(x.id).requires_grad, rgw = g.node(w.id).requires_grad;
    Tensor t = g.emit({cout, ox, oy, oz}, std::move(out), rgx || rgw, {}, "conv3d");
    if (rgx || rgw) {
        const int self = t.id, px = x.id, pw = w.id;
        g.node(self).back = [self, px, pw, rgx, rgw, col, cin, cout, k, pad, nx, ny, nz, ox, oy,
                             oz, kcols, vout, plane, k3](Graph& gr) {
            CMap gy(gr.node(self).grad.data(), cout, static_cast<int>(vout));
            if (rgw) {
                // gW[:, c0:c0+len] = gY * col[c0:c0+len, :]^T, chunked over kernel columns
                MMap gw(gr.grad_buf(pw).data(), cout, kcols);
                CMap cm(col->data(), kcols, static_cast<int>(vout));
                const int chunk = 32;
                const int nchunks = (kcols + chunk - 1) / chunk;
#pragma omp parallel for schedule(static)
                for (int ci = 0; ci < nchunks; ++ci) {
                    const int c0 = ci * chunk;
                    const int len = std::min(chunk, kcols - c0);
                    gw.middleCols(c0, len).noalias() += gy * cm.middleRows(c0, len).transpose();
                }
            }
            if (rgx) {
                // gcol = W^T gY, then scatter back (col2im); for a fixed kernel
                // offset the voxel map is injective, so the inner loop is parallel
                std::vector<double> gcol(static_cast<std::size_t>(kcols) * vout);
                const auto& wv = gr.node(pw).val;
                CMap wm(wv.data(), cout, kcols);
                MMap gc(gcol.data(), kcols, static_cast<int>(vout));
                {
                    const int chunk = 8;
                    const int nchunks = (kcols + chunk - 1) / chunk;
#pragma omp parallel for schedule(static)
                    for (int ci2 = 0; ci2 < nchunks; ++ci2) {
                        const int r0 = ci2 * chunk;
                        const int len = std::min(chunk, kcols - r0);
                        gc.middleRows(r0, len).noalias() = wm.middleCols(r0, len).transpose() * gy;
                    }
                }
                auto& gx = gr.grad_buf(px);
                for (int off = 0; off < k3; ++off) {
                    const int dx = off % k, dy = (off / k) % k, dz = off / (k * k);
#pragma omp parallel for schedule(static)
                    for (std::int64_t s = 0; s < vout; ++s) {
                        const int ix = static_cast<int>(s % ox) + dx - pad;
                        const int iy = static_cast<int>((s / ox) % oy) + dy - pad;
                        const int iz =
                            static_cast<int>(s / (static_cast<std::int64_t>(ox) * oy)) + dz - pad;
                        if (ix < 0 || ix >= nx || iy < 0 || iy >= ny || iz < 0 || iz >= nz)
                            continue;
                        const std::int64_t voxel =
                            ix + static_cast<std::int64_t>(nx) * (iy + static_cast<std::int64_t>(ny) * iz);
                        for (int ci2 = 0; ci2 < cin; ++ci2)
                            gx[static_cast<std::size_t>(ci2 * plane + voxel)] +=
                                gcol[static_cast<std::size_t>((ci2 * k3 + off) * vout + s)];
                    }
                }
            }
        };
    }
    return t;
}

Tensor instance_norm(Tensor x, Tensor sc, Tensor sh, double eps) {
    Graph& g = *x.graph;
    require(x.shape().size() >= 2, "instance_norm: input must be [C, spatial...]");
    const int c = x.shape()[0];
    const std::int64_t v = x.numel() / c;
    require(sc.numel() == c && sh.numel() == c, "instance_norm: scale/shift must have C entries");

    auto mu = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    std::vector<double> out(x.val().size());
    const auto& xv = x.val();
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        const double* xs = &xv[static_cast<std::size_t>(ch) * v];
        double m = 0.0;
        for (std::int64_t i = 0; i < v; ++i) m += xs[i];
        m /= static_cast<double>(v);
        double var = 0.0;
        for (std::int64_t i = 0; i < v; ++i) var += (xs[i] - m) * (xs[i] - m);
        var /= static_cast<double>(v);
        const double iv = 1.0 / std::sqrt(var + eps);
        (*mu)[static_cast<std::size_t>(ch)] = m;
        (*inv)[static_cast<std::size_t>(ch)] = iv;
        const double a = sc.val()[static_cast<std::size_t>(ch)];
        const double b = sh.val()[static_cast<std::size_t>(ch)];
        double* os = &out[static_cast<std::size_t>(ch) * v];
        for (std::int64_t i = 0; i < v; ++i) os[i] = a * (xs[i] - m) * iv + b;
    }

    const bool rgx = g.node(x.id).requires_grad;
    const bool rgs = g.node(sc.id).requires_grad || g.node(sh.id).requires_grad;
    Tensor t = g.emit(x.shape(), std::move(out), rgx || rgs, {}, "instance_norm");
    if (rgx || rgs) {
        const int self = t.id, px = x.id, psc = sc.id, psh = sh.id;
        g.node(self).back = [self, px, psc, psh, c, v, mu, inv, rgx](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& xv2 = gr.node(px).val;
            const auto& scv = gr.node(psc).val;
            const bool rsc = gr.node(psc).requires_grad;
            const bool rsh = gr.node(psh).requires_grad;
            double* gsc = rsc ? gr.grad_buf(psc).data() : nullptr;
            double* gsh = rsh ? gr.grad_buf(psh).data() : nullptr;
            double* gx = rgx ? gr.grad_buf(px).data() : nullptr;
#pragma omp parallel for schedule(static)
            for (int ch = 0; ch < c; ++ch) {
                const double* xs = &xv2[static_cast<std::size_t>(ch) * v];
                const double* gs = &gv[static_cast<std::size_t>(ch) * v];
                const double m = (*mu)[static_cast<std::size_t>(ch)];
                const double iv = (*inv)[static_cast<std::size_t>(ch)];
                const double a = scv[static_cast<std::size_t>(ch)];
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t i = 0; i < v; ++i) {
                    const double xh = (xs[i] - m) * iv;
                    sum_g += gs[i];
                    sum_gx += gs[i] * xh;
                }
                if (gsc) gsc[ch] += sum_gx;
                if (gsh) gsh[ch] += sum_g;
                if (gx) {
                    const double mg = a * sum_g / static_cast<double>(v);
                    const double mgx = a * sum_gx / static_cast<double>(v);
                    double* gxs = &gx[static_cast<std::size_t>(ch) * v];
                    for (std::int64_t i = 0; i < v; ++i) {
                        const double xh = (xs[i] - m) * iv;
                        gxs[i] += iv * (a * gs[i] - mg - xh * mgx);
                    }
                }
            }
        };
    }
    return t;
}

Tensor max_pool3d(Tensor x) {
    Graph& g = *x.graph;
    require(x.shape().size() == 4, "max_pool3d: input must be [C, nx, ny, nz]");
    const int c = x.shape()[0], nx = x.shape()[1], ny = x.shape()[2], nz = x.shape()[3];
    require(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0,
            "max_pool3d: spatial dims must be even");
    const int ox = nx / 2, oy = ny / 2, oz = nz / 2;
    const std::int64_t vin = static_cast<std::int64_t>(nx) * ny * nz;
    const std::int64_t vout = static_cast<std::int64_t>(ox) * oy * oz;
    std::vector<double> out(static_cast<std::size_t>(c) * vout);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c) * vout);
    const auto& xv = x.val();
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < static_cast<std::int64_t>(c) * vout; ++u) {
        const int ch = static_cast<int>(u / vout);
        const std::int64_t s = u % vout;
        const int ix = static_cast<int>(s % ox) * 2;
        const int iy = static_cast<int>((s / ox) % oy) * 2;
        const int iz = static_cast<int>(s / (static_cast<std::int64_t>(ox) * oy)) * 2;
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_idx = -1;
        // fixed scan order, strict > : ties go to the first maximal element
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const std::int64_t idx =
                        ch * vin + (ix + dx) +
                        static_cast<std::int64_t>(nx) * ((iy + dy) + static_cast<std::int64_t>(ny) * (iz + dz));
                    const double val = xv[static_cast<std::size_t>(idx)];
                    if (val > best) {
                        best = val;
                        best_idx = idx;
                    }
                }
        out[static_cast<std::size_t>(u)] = best;
        (*argmax)[static_cast<std::size_t>(u)] = best_idx;
    }
    const bool rg = g.node(x.id).requires_grad;
    Tensor t = g.emit({c, ox, oy, oz}, std::move(out), rg, {}, "max_pool3d");
    if (rg) {
        const int self = t.id, px = x.id;
        g.node(self).back = [self, px, argmax](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            auto& gx = gr.grad_buf(px);
            for (std::size_t u = 0; u < gv.size(); ++u)
                gx[static_cast<std::size_t>((*argmax)[u])] += gv[u];
        };
    }
    return t;
}

Tensor spatial_softmax(Tensor x) {
    Graph& g = *x.graph;
    require(x.shape().size() == 2, "spatial_softmax: input must be [C, V]");
    const int c = x.shape()[0];
    const std::int64_t v = x.shape()[1];
    std::vector<double> out(x.val().size());
    const auto& xv = x.val();
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        const double* xs = &xv[static_cast<std::size_t>(ch) * v];
        double* os = &out[static_cast<std::size_t>(ch) * v];
        double mx = xs[0];
        for (std::int64_t i = 1; i < v; ++i) mx = std::max(mx, xs[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i < v; ++i) {
            os[i] = std::exp(xs[i] - mx);
            sum += os[i];
        }
        const double inv = 1.0 / sum;
        for (std::int64_t i = 0; i < v; ++i) os[i] *= inv;
    }
    const bool rg = g.node(x.id).requires_grad;
    Tensor t = g.emit(x.shape(), std::move(out), rg, {}, "spatial_softmax");
    if (rg) {
        const int self = t.id, px = x.id;
        g.node(self).back = [self, px, c, v](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& pv = gr.node(self).val;
            auto& gx = gr.grad_buf(px);
#pragma omp parallel for schedule(static)
            for (int ch = 0; ch < c; ++ch) {
                const double* ps = &pv[static_cast<std::size_t>(ch) * v];
                const double* gs = &gv[static_cast<std::size_t>(ch) * v];
                double dot = 0.0;
                for (std::int64_t i = 0; i < v; ++i) dot += ps[i] * gs[i];
                double* gxs = &gx[static_cast<std::size_t>(ch) * v];
                for (std::int64_t i = 0; i < v; ++i) gxs[i] += ps[i] * (gs[i] - dot);
            }
        };
    }
    return t;
}

}  // namespace cabld::ad
