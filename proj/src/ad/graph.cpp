// graph.cpp — autodiff core: tape, elementwise/shape/reduction ops, TPS ops,
// linear solve with implicit differentiation, trilinear warp.

#include "cabld/ad/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <Eigen/Dense>

#include "cabld/errors.hpp"
#include "cabld/linalg.hpp"

namespace cabld::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

namespace {

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite value");
}

void require(bool ok, const char* msg) {
    if (!ok) throw NumericalError(msg);
}

void same_graph(const Tensor& a, const Tensor& b) {
    require(a.graph == b.graph && a.graph != nullptr, "op: tensors from different graphs");
}

// deterministic parallel GEMM: fixed chunking over rows (or columns when the
// row count is small), single-threaded Eigen inside each chunk
void gemm(const double* a, const double* b, double* c, int m, int k, int n) {
    CMap am(a, m, k);
    CMap bm(b, k, n);
    MMap cm(c, m, n);
    if (m >= 16) {
        const int chunk = 8;
        const int nchunks = (m + chunk - 1) / chunk;
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < nchunks; ++ci) {
            const int r0 = ci * chunk;
            const int len = std::min(chunk, m - r0);
            cm.middleRows(r0, len).noalias() = am.middleRows(r0, len) * bm;
        }
    } else if (n >= 4096) {
        const int chunk = 2048;
        const int nchunks = (n + chunk - 1) / chunk;
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < nchunks; ++ci) {
            const int c0 = ci * chunk;
            const int len = std::min(chunk, n - c0);
            cm.middleCols(c0, len).noalias() = am * bm.middleCols(c0, len);
        }
    } else {
        cm.noalias() = am * bm;
    }
}

}  // namespace

const std::vector<int>& Tensor::shape() const { return graph->node(id).shape; }
const std::vector<double>& Tensor::val() const { return graph->node(id).val; }
const std::vector<double>& Tensor::grad() const { return graph->node(id).grad; }
std::int64_t Tensor::numel() const { return numel_of(shape()); }
double Tensor::scalar() const {
    require(numel() == 1, "scalar(): tensor is not a scalar");
    return val()[0];
}

Tensor Graph::emit(std::vector<int> shape, std::vector<double> val, bool requires_grad,
                   BackwardFn back, const char* what) {
    require(numel_of(shape) == static_cast<std::int64_t>(val.size()),
            "emit: shape/value size mismatch");
    check_finite(val, what);
    nodes_.push_back(Node{std::move(shape), std::move(val), {}, requires_grad, std::move(back)});
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor Graph::constant(std::vector<int> shape, std::vector<double> val) {
    return emit(std::move(shape), std::move(val), false, {}, "constant");
}

Tensor Graph::param(std::vector<int> shape, std::vector<double> val) {
    return emit(std::move(shape), std::move(val), true, {}, "param");
}

std::vector<double>& Graph::grad_buf(int id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(numel_of(n.shape)), 0.0);
    return n.grad;
}

void Graph::backward(const Tensor& loss) {
    require(loss.graph == this, "backward: loss from another graph");
    require(loss.numel() == 1, "backward: loss must be scalar");
    for (auto& n : nodes_) n.grad.clear();
    grad_buf(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = node(id);
        if (!n.requires_grad || !n.back || n.grad.empty()) continue;
        n.back(*this);
    }
    for (const auto& n : nodes_)
        if (!n.grad.empty()) check_finite(n.grad, "backward: gradient");
}

// ---------------------------------------------------------------- elementwise

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(Tensor a, const char* what, Fwd fwd, Bwd bwd_factory) {
    Graph& g = *a.graph;
    std::vector<double> out(a.val().size());
    const auto& av = a.val();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    const bool rg = g.node(a.id).requires_grad;
    Graph::BackwardFn back;
    if (rg) back = bwd_factory(a.id);
    return g.emit(a.shape(), std::move(out), rg, std::move(back), what);
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
    same_graph(a, b);
    require(a.shape() == b.shape(), "add: shape mismatch");
    Graph& g = *a.graph;
    std::vector<double> out(a.val().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] + b.val()[i];
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit(a.shape(), std::move(out), rga || rgb, {}, "add");
    if (rga || rgb) {
        const int self = t.id, pa = a.id, pb = b.id;
        g.node(self).back = [self, pa, pb, rga, rgb](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            if (rga) {
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
            }
            if (rgb) {
                auto& gb = gr.grad_buf(pb);
                for (std::size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i];
            }
        };
    }
    return t;
}

Tensor sub(Tensor a, Tensor b) {
    same_graph(a, b);
    require(a.shape() == b.shape(), "sub: shape mismatch");
    Graph& g = *a.graph;
    std::vector<double> out(a.val().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] - b.val()[i];
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit(a.shape(), std::move(out), rga || rgb, {}, "sub");
    if (rga || rgb) {
        const int self = t.id, pa = a.id, pb = b.id;
        g.node(self).back = [self, pa, pb, rga, rgb](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            if (rga) {
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
            }
            if (rgb) {
                auto& gb = gr.grad_buf(pb);
                for (std::size_t i = 0; i < gv.size(); ++i) gb[i] -= gv[i];
            }
        };
    }
    return t;
}

Tensor mul(Tensor a, Tensor b) {
    same_graph(a, b);
    require(a.shape() == b.shape(), "mul: shape mismatch");
    Graph& g = *a.graph;
    std::vector<double> out(a.val().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * b.val()[i];
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit(a.shape(), std::move(out), rga || rgb, {}, "mul");
    if (rga || rgb) {
        const int self = t.id, pa = a.id, pb = b.id;
        g.node(self).back = [self, pa, pb, rga, rgb](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& av = gr.node(pa).val;
            const auto& bv = gr.node(pb).val;
            if (rga) {
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * bv[i];
            }
            if (rgb) {
                auto& gb = gr.grad_buf(pb);
                for (std::size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i] * av[i];
            }
        };
    }
    return t;
}

Tensor scale(Tensor a, double s) {
    return unary_op(
        a, "scale", [s](double x) { return s * x; },
        [&a, s](int pa) {
            const int self = static_cast<int>(a.graph->size());
            return [self, pa, s](Graph& gr) {
                const auto& gv = gr.node(self).grad;
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += s * gv[i];
            };
        });
}

Tensor add_scalar(Tensor a, double c) {
    return unary_op(
        a, "add_scalar", [c](double x) { return x + c; },
        [&a](int pa) {
            const int self = static_cast<int>(a.graph->size());
            return [self, pa](Graph& gr) {
                const auto& gv = gr.node(self).grad;
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
            };
        });
}

Tensor relu(Tensor a) { return leaky_relu(a, 0.0); }

Tensor leaky_relu(Tensor a, double slope) {
    return unary_op(
        a, "leaky_relu", [slope](double x) { return x >= 0.0 ? x : slope * x; },
        [&a, slope](int pa) {
            const int self = static_cast<int>(a.graph->size());
            return [self, pa, slope](Graph& gr) {
                const auto& gv = gr.node(self).grad;
                const auto& av = gr.node(pa).val;
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i)
                    ga[i] += gv[i] * (av[i] >= 0.0 ? 1.0 : slope);
            };
        });
}

Tensor sqrt_elem(Tensor a) {
    for (double x : a.val())
        if (!(x > 0.0)) throw NumericalError("sqrt_elem: input must be strictly positive");
    return unary_op(
        a, "sqrt_elem", [](double x) { return std::sqrt(x); },
        [&a](int pa) {
            const int self = static_cast<int>(a.graph->size());
            return [self, pa](Graph& gr) {
                const auto& gv = gr.node(self).grad;
                const auto& ov = gr.node(self).val;
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * 0.5 / ov[i];
            };
        });
}

Tensor recip(Tensor a) {
    for (double x : a.val())
        if (x == 0.0) throw NumericalError("recip: zero input");
    return unary_op(
        a, "recip", [](double x) { return 1.0 / x; },
        [&a](int pa) {
            const int self = static_cast<int>(a.graph->size());
            return [self, pa](Graph& gr) {
                const auto& gv = gr.node(self).grad;
                const auto& ov = gr.node(self).val;
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] -= gv[i] * ov[i] * ov[i];
            };
        });
}

Tensor scale_by(Tensor a, Tensor s) {
    same_graph(a, s);
    require(s.numel() == 1, "scale_by: scaler must be a scalar tensor");
    Graph& g = *a.graph;
    const double sv = s.val()[0];
    std::vector<double> out(a.val().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * sv;
    const bool rga = g.node(a.id).requires_grad, rgs = g.node(s.id).requires_grad;
    Tensor t = g.emit(a.shape(), std::move(out), rga || rgs, {}, "scale_by");
    if (rga || rgs) {
        const int self = t.id, pa = a.id, ps = s.id;
        g.node(self).back = [self, pa, ps, rga, rgs](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& av = gr.node(pa).val;
            const double sval = gr.node(ps).val[0];
            if (rga) {
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * sval;
            }
            if (rgs) {
                double acc = 0.0;
                for (std::size_t i = 0; i < gv.size(); ++i) acc += gv[i] * av[i];
                gr.grad_buf(ps)[0] += acc;
            }
        };
    }
    return t;
}

// ---------------------------------------------------------------- shape ops

namespace {

void require_2d(const Tensor& a, const char* what) {
    require(a.shape().size() == 2, (std::string(what) + ": expects a 2-D tensor").c_str());
}

}  // namespace

Tensor matmul(Tensor a, Tensor b) {
    same_graph(a, b);
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    require(k == k2, "matmul: inner dimension mismatch");
    Graph& g = *a.graph;
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    gemm(a.val().data(), b.val().data(), out.data(), m, k, n);
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit({m, n}, std::move(out), rga || rgb, {}, "matmul");
    if (rga || rgb) {
        const int self = t.id, pa = a.id, pb = b.id;
        g.node(self).back = [self, pa, pb, rga, rgb, m, k, n](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            CMap gc(gv.data(), m, n);
            if (rga) {
                // gA += gC * B^T
                CMap bm(gr.node(pb).val.data(), k, n);
                MMap ga(gr.grad_buf(pa).data(), m, k);
                ga.noalias() += gc * bm.transpose();
            }
            if (rgb) {
                // gB += A^T * gC
                CMap am(gr.node(pa).val.data(), m, k);
                MMap gb(gr.grad_buf(pb).data(), k, n);
                gb.noalias() += am.transpose() * gc;
            }
        };
    }
    return t;
}

Tensor transpose(Tensor a) {
    require_2d(a, "transpose");
    const int m = a.shape()[0], n = a.shape()[1];
    Graph& g = *a.graph;
    std::vector<double> out(a.val().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = a.val()[static_cast<std::size_t>(i) * n + j];
    const bool rg = g.node(a.id).requires_grad;
    Tensor t = g.emit({n, m}, std::move(out), rg, {}, "transpose");
    if (rg) {
        const int self = t.id, pa = a.id;
        g.node(self).back = [self, pa, m, n](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            auto& ga = gr.grad_buf(pa);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ga[static_cast<std::size_t>(i) * n + j] +=
                        gv[static_cast<std::size_t>(j) * m + i];
        };
    }
    return t;
}

Tensor concat_rows(Tensor a, Tensor b) {
    same_graph(a, b);
    require_2d(a, "concat_rows");
    require_2d(b, "concat_rows");
    require(a.shape()[1] == b.shape()[1], "concat_rows: column mismatch");
    const int ma = a.shape()[0], mb = b.shape()[0], n = a.shape()[1];
    Graph& g = *a.graph;
    std::vector<double> out;
    out.reserve(a.val().size() + b.val().size());
    out.insert(out.end(), a.val().begin(), a.val().end());
    out.insert(out.end(), b.val().begin(), b.val().end());
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit({ma + mb, n}, std::move(out), rga || rgb, {}, "concat_rows");
    if (rga || rgb) {
        const int self = t.id, pa = a.id, pb = b.id;
        const std::size_t na = a.val().size();
        g.node(self).back = [self, pa, pb, rga, rgb, na](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            if (rga) {
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < na; ++i) ga[i] += gv[i];
            }
            if (rgb) {
                auto& gb = gr.grad_buf(pb);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gv[na + i];
            }
        };
    }
    return t;
}

Tensor concat_cols(Tensor a, Tensor b) {
    same_graph(a, b);
    require_2d(a, "concat_cols");
    require_2d(b, "concat_cols");
    require(a.shape()[0] == b.shape()[0], "concat_cols: row mismatch");
    const int m = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
    Graph& g = *a.graph;
    std::vector<double> out(static_cast<std::size_t>(m) * (na + nb));
    for (int i = 0; i < m; ++i) {
        std::memcpy(&out[static_cast<std::size_t>(i) * (na + nb)],
                    &a.val()[static_cast<std::size_t>(i) * na], sizeof(double) * na);
        std::memcpy(&out[static_cast<std::size_t>(i) * (na + nb) + na],
                    &b.val()[static_cast<std::size_t>(i) * nb], sizeof(double) * nb);
    }
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit({m, na + nb}, std::move(out), rga || rgb, {}, "concat_cols");
    if (rga || rgb) {
        const int self = t.id, pa = a.id, pb = b.id;
        g.node(self).back = [self, pa, pb, rga, rgb, m, na, nb](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            if (rga) {
                auto& ga = gr.grad_buf(pa);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < na; ++j)
                        ga[static_cast<std::size_t>(i) * na + j] +=
                            gv[static_cast<std::size_t>(i) * (na + nb) + j];
            }
            if (rgb) {
                auto& gb = gr.grad_buf(pb);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < nb; ++j)
                        gb[static_cast<std::size_t>(i) * nb + j] +=
                            gv[static_cast<std::size_t>(i) * (na + nb) + na + j];
            }
        };
    }
    return t;
}

Tensor slice_rows(Tensor a, int r0, int r1) {
    require_2d(a, "slice_rows");
    const int m = a.shape()[0], n = a.shape()[1];
    require(0 <= r0 && r0 < r1 && r1 <= m, "slice_rows: bad range");
    Graph& g = *a.graph;
    std::vector<double> out(a.val().begin() + static_cast<std::ptrdiff_t>(r0) * n,
                            a.val().begin() + static_cast<std::ptrdiff_t>(r1) * n);
    const bool rg = g.node(a.id).requires_grad;
    Tensor t = g.emit({r1 - r0, n}, std::move(out), rg, {}, "slice_rows");
    if (rg) {
        const int self = t.id, pa = a.id;
        g.node(self).back = [self, pa, r0, n](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            auto& ga = gr.grad_buf(pa);
            for (std::size_t i = 0; i < gv.size(); ++i)
                ga[static_cast<std::size_t>(r0) * n + i] += gv[i];
        };
    }
    return t;
}

Tensor reshape(Tensor a, std::vector<int> shape) {
    require(numel_of(shape) == a.numel(), "reshape: element count mismatch");
    Graph& g = *a.graph;
    std::vector<double> out = a.val();
    const bool rg = g.node(a.id).requires_grad;
    Tensor t = g.emit(std::move(shape), std::move(out), rg, {}, "reshape");
    if (rg) {
        const int self = t.id, pa = a.id;
        g.node(self).back = [self, pa](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            auto& ga = gr.grad_buf(pa);
            for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
        };
    }
    return t;
}

// ---------------------------------------------------------------- reductions

Tensor reduce_sum(Tensor a) {
    Graph& g = *a.graph;
    double acc = 0.0;
    for (double x : a.val()) acc += x;
    const bool rg = g.node(a.id).requires_grad;
    Tensor t = g.emit({1}, {acc}, rg, {}, "reduce_sum");
    if (rg) {
        const int self = t.id, pa = a.id;
        g.node(self).back = [self, pa](Graph& gr) {
            const double gv = gr.node(self).grad[0];
            auto& ga = gr.grad_buf(pa);
            for (double& x : ga) x += gv;
        };
    }
    return t;
}

Tensor reduce_mean(Tensor a) {
    Graph& g = *a.graph;
    double acc = 0.0;
    for (double x : a.val()) acc += x;
    const double inv = 1.0 / static_cast<double>(a.val().size());
    const bool rg = g.node(a.id).requires_grad;
    Tensor t = g.emit({1}, {acc * inv}, rg, {}, "reduce_mean");
    if (rg) {
        const int self = t.id, pa = a.id;
        g.node(self).back = [self, pa, inv](Graph& gr) {
            const double gv = gr.node(self).grad[0] * inv;
            auto& ga = gr.grad_buf(pa);
            for (double& x : ga) x += gv;
        };
    }
    return t;
}

Tensor row_norm(Tensor a) {
    require_2d(a, "row_norm");
    require(a.shape()[1] == 3, "row_norm: expects [n x 3]");
    const int n = a.shape()[0];
    Graph& g = *a.graph;
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* r = &a.val()[static_cast<std::size_t>(i) * 3];
        out[static_cast<std::size_t>(i)] = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    }
    const bool rg = g.node(a.id).requires_grad;
    Tensor t = g.emit({n}, std::move(out), rg, {}, "row_norm");
    if (rg) {
        const int self = t.id, pa = a.id;
        g.node(self).back = [self, pa, n](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& ov = gr.node(self).val;
            const auto& av = gr.node(pa).val;
            auto& ga = gr.grad_buf(pa);
            for (int i = 0; i < n; ++i) {
                // subgradient 0 at exactly-zero rows
                if (ov[static_cast<std::size_t>(i)] == 0.0) continue;
                const double s = gv[static_cast<std::size_t>(i)] / ov[static_cast<std::size_t>(i)];
                for (int c = 0; c < 3; ++c)
                    ga[static_cast<std::size_t>(i) * 3 + c] +=
                        s * av[static_cast<std::size_t>(i) * 3 + c];
            }
        };
    }
    return t;
}

// ------------------------------------------------------------- TPS op family

Tensor sqdist(Tensor a, Tensor b) {
    same_graph(a, b);
    require_2d(a, "sqdist");
    require_2d(b, "sqdist");
    require(a.shape()[1] == 3 && b.shape()[1] == 3, "sqdist: expects [n x 3] point sets");
    const int n = a.shape()[0], m = b.shape()[0];
    Graph& g = *a.graph;
    std::vector<double> out(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i) {
        const double* pa = &a.val()[static_cast<std::size_t>(i) * 3];
        for (int j = 0; j < m; ++j) {
            const double* pb = &b.val()[static_cast<std::size_t>(j) * 3];
            const double dx = pa[0] - pb[0], dy = pa[1] - pb[1], dz = pa[2] - pb[2];
            out[static_cast<std::size_t>(i) * m + j] = dx * dx + dy * dy + dz * dz;
        }
    }
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit({n, m}, std::move(out), rga || rgb, {}, "sqdist");
    if (rga || rgb) {
        const int self = t.id, ia = a.id, ib = b.id;
        g.node(self).back = [self, ia, ib, rga, rgb, n, m](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& av = gr.node(ia).val;
            const auto& bv = gr.node(ib).val;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                    const double gij = gv[static_cast<std::size_t>(i) * m + j];
                    if (gij == 0.0) continue;
                    for (int c = 0; c < 3; ++c) {
                        const double d = 2.0 * (av[static_cast<std::size_t>(i) * 3 + c] -
                                                bv[static_cast<std::size_t>(j) * 3 + c]);
                        if (rga) gr.grad_buf(ia)[static_cast<std::size_t>(i) * 3 + c] += gij * d;
                        if (rgb) gr.grad_buf(ib)[static_cast<std::size_t>(j) * 3 + c] -= gij * d;
                    }
                }
        };
    }
    return t;
}

Tensor tps_kernel(Tensor s) {
    for (double x : s.val())
        if (x < 0.0) throw NumericalError("tps_kernel: negative squared distance");
    return unary_op(
        s, "tps_kernel", [](double x) { return x > 0.0 ? 0.5 * x * std::log(x) : 0.0; },
        [&s](int pa) {
            const int self = static_cast<int>(s.graph->size());
            return [self, pa](Graph& gr) {
                const auto& gv = gr.node(self).grad;
                const auto& sv = gr.node(pa).val;
                auto& ga = gr.grad_buf(pa);
                for (std::size_t i = 0; i < gv.size(); ++i)
                    if (sv[i] > 0.0) ga[i] += gv[i] * 0.5 * (std::log(sv[i]) + 1.0);
            };
        });
}

Tensor linear_solve(Tensor a, Tensor b) {
    same_graph(a, b);
    require_2d(a, "linear_solve");
    require_2d(b, "linear_solve");
    const int n = a.shape()[0], d = b.shape()[1];
    require(a.shape()[1] == n, "linear_solve: A must be square");
    require(b.shape()[0] == n, "linear_solve: B row mismatch");
    Graph& g = *a.graph;

    auto lu = std::make_shared<EquilibratedLu>(
        EquilibratedLu::factor(CMap(a.val().data(), n, n), "linear_solve"));
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    MMap(out.data(), n, d) = lu->solve(CMap(b.val().data(), n, d));
    const bool rga = g.node(a.id).requires_grad, rgb = g.node(b.id).requires_grad;
    Tensor t = g.emit({n, d}, std::move(out), rga || rgb, {}, "linear_solve");
    if (rga || rgb) {
        const int self = t.id, ia = a.id, ib = b.id;
        g.node(self).back = [self, ia, ib, rga, rgb, n, d, lu](Graph& gr) {
            CMap gx(gr.node(self).grad.data(), n, d);
            // gB = A^-T gX
            RowMat gb = lu->solve_transposed(gx);
            if (rgb) MMap(gr.grad_buf(ib).data(), n, d).noalias() += gb;
            if (rga) {
                CMap x(gr.node(self).val.data(), n, d);
                MMap(gr.grad_buf(ia).data(), n, n).noalias() -= gb * x.transpose();
            }
        };
    }
    return t;
}

Tensor warp_trilinear(Tensor field, std::shared_ptr<const Volume3D> vol) {
    require_2d(field, "warp_trilinear");
    require(field.shape()[1] == 3, "warp_trilinear: field must be [V x 3]");
    const int nv = field.shape()[0];
    Graph& g = *field.graph;
    std::vector<double> out(static_cast<std::size_t>(nv));
    const Volume3D& v = *vol;
#pragma omp parallel for schedule(static)
    for (int u = 0; u < nv; ++u) {
        const double* p = &field.val()[static_cast<std::size_t>(u) * 3];
        out[static_cast<std::size_t>(u)] = sample_trilinear(v, {p[0], p[1], p[2]});
    }
    const bool rg = g.node(field.id).requires_grad;
    Tensor t = g.emit({nv}, std::move(out), rg, {}, "warp_trilinear");
    if (rg) {
        const int self = t.id, pf = field.id;
        g.node(self).back = [self, pf, nv, vol](Graph& gr) {
            const auto& gv = gr.node(self).grad;
            const auto& fv = gr.node(pf).val;
            auto& gf = gr.grad_buf(pf);
            const Volume3D& vv = *vol;
#pragma omp parallel for schedule(static)
            for (int u = 0; u < nv; ++u) {
                const double go = gv[static_cast<std::size_t>(u)];
                if (go == 0.0) continue;
                const double* p = &fv[static_cast<std::size_t>(u) * 3];
                const double cx = (p[0] - vv.origin[0]) / vv.spacing[0];
                const double cy = (p[1] - vv.origin[1]) / vv.spacing[1];
                const double cz = (p[2] - vv.origin[2]) / vv.spacing[2];
                const double fx = std::floor(cx), fy = std::floor(cy), fz = std::floor(cz);
                const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy),
                          z0 = static_cast<int>(fz);
                const double tx = cx - fx, ty = cy - fy, tz = cz - fz;
                double dx_acc = 0.0, dy_acc = 0.0, dz_acc = 0.0;
                for (int dz = 0; dz < 2; ++dz) {
                    const int z = z0 + dz;
                    if (z < 0 || z >= vv.shape[2]) continue;
                    const double wz = dz ? tz : 1.0 - tz;
                    const double dwz = dz ? 1.0 : -1.0;
                    for (int dy = 0; dy < 2; ++dy) {
                        const int y = y0 + dy;
                        if (y < 0 || y >= vv.shape[1]) continue;
                        const double wy = dy ? ty : 1.0 - ty;
                        const double dwy = dy ? 1.0 : -1.0;
                        for (int dx = 0; dx < 2; ++dx) {
                            const int x = x0 + dx;
                            if (x < 0 || x >= vv.shape[0]) continue;
                            const double wx = dx ? tx : 1.0 - tx;
                            const double dwx = dx ? 1.0 : -1.0;
                            const double val = static_cast<double>(vv.data[vv.flat(x, y, z)]);
                            dx_acc += dwx * wy * wz * val;
                            dy_acc += wx * dwy * wz * val;
                            dz_acc += wx * wy * dwz * val;
                        }
                    }
                }
                gf[static_cast<std::size_t>(u) * 3 + 0] += go * dx_acc / vv.spacing[0];
                gf[static_cast<std::size_t>(u) * 3 + 1] += go * dy_acc / vv.spacing[1];
                gf[static_cast<std::size_t>(u) * 3 + 2] += go * dz_acc / vv.spacing[2];
            }
        };
    }
    return t;
}

Tensor coord_expectation(Tensor probs, Tensor coords) {
    // normalized spatial expectation is a plain product with the coordinate table
    return matmul(probs, coords);
}

}  // namespace cabld::ad
