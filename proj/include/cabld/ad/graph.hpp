// graph.hpp — reverse-mode autodiff over dense double tensors.
//
// Define-by-run tape: every op appends a node holding its forward value and a
// backward closure; backward() walks the tape in reverse creation order and
// accumulates gradients additively. Graphs are rebuilt per training step and
// are single-owner; kernels parallelize internally over disjoint output
// ranges only, so results are bitwise independent of thread count.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cabld/volume.hpp"

namespace cabld::ad {

class Graph;

// Lightweight handle into a Graph. Copyable; valid as long as the graph lives.
struct Tensor {
    Graph* graph = nullptr;
    int id = -1;

    const std::vector<int>& shape() const;
    const std::vector<double>& val() const;
    const std::vector<double>& grad() const;
    std::int64_t numel() const;
    double scalar() const;  // requires numel() == 1
};

class Graph {
  public:
    using BackwardFn = std::function<void(Graph&)>;

    Tensor constant(std::vector<int> shape, std::vector<double> val);
    Tensor constant_scalar(double v) { return constant({1}, {v}); }
    // leaf that participates in gradient computation
    Tensor param(std::vector<int> shape, std::vector<double> val);

    // computes d(loss)/d(node) for every grad-requiring node; loss must be
    // scalar. Throws NumericalError on NaN/Inf gradients.
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }

    struct Node {
        std::vector<int> shape;
        std::vector<double> val;
        std::vector<double> grad;  // allocated lazily (zero-filled) when needed
        bool requires_grad = false;
        BackwardFn back;  // empty for leaves/constants
    };

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::vector<double>& grad_buf(int id);

    // used by op implementations
    Tensor emit(std::vector<int> shape, std::vector<double> val, bool requires_grad,
                BackwardFn back, const char* what);

  private:
    std::vector<Node> nodes_;
};

// ---- elementwise / scalar ----
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor scale(Tensor a, double s);
Tensor add_scalar(Tensor a, double c);
Tensor relu(Tensor a);
Tensor leaky_relu(Tensor a, double slope);
Tensor sqrt_elem(Tensor a);     // requires strictly positive input
Tensor recip(Tensor a);         // 1/x, requires nonzero input
Tensor scale_by(Tensor a, Tensor s);  // a * s, s scalar tensor

// ---- shape / linear algebra (2-D, row-major) ----
Tensor matmul(Tensor a, Tensor b);
Tensor transpose(Tensor a);
Tensor concat_rows(Tensor a, Tensor b);
Tensor concat_cols(Tensor a, Tensor b);
Tensor slice_rows(Tensor a, int r0, int r1);
Tensor reshape(Tensor a, std::vector<int> shape);

// ---- reductions ----
Tensor reduce_sum(Tensor a);
Tensor reduce_mean(Tensor a);
Tensor row_norm(Tensor a);  // [n x 3] -> [n] Euclidean row norms

// ---- neural-net ops ----
// x: [Cin, nx, ny, nz], w: [Cout, Cin, k, k, k], stride 1
Tensor conv3d(Tensor x, Tensor w, int pad);
// per-channel normalization with learned scale/shift ([C] each)
Tensor instance_norm(Tensor x, Tensor scale, Tensor shift, double eps = 1e-5);
Tensor max_pool3d(Tensor x);  // 2x2x2, stride 2; spatial dims must be even
Tensor spatial_softmax(Tensor x);  // [C, V] softmax over V per channel

// ---- TPS / registration ops ----
Tensor sqdist(Tensor a, Tensor b);  // [n x 3],[m x 3] -> [n x m] squared distances
// elementwise Phi(sqrt(s)) = 0.5 * s * ln s on squared distances; the
// derivative at s = 0 is taken as the (correct) composite limit 0
Tensor tps_kernel(Tensor s);
// A x = B with A [n x n], B [n x d]; dense partial-pivot LU, pivot-ratio
// condition estimate (> 1e12 throws SingularSystem). Backward by implicit
// differentiation: gB = A^-T gX, gA = -gB X^T.
Tensor linear_solve(Tensor a, Tensor b);
// sample `vol` (constant) at per-row world positions [V x 3]; zero padding
// outside; differentiable in the positions
Tensor warp_trilinear(Tensor field, std::shared_ptr<const Volume3D> vol);
// probs [C x V] (rows summing to 1) x constant coords [V x 3] -> [C x 3]
Tensor coord_expectation(Tensor probs, Tensor coords);

}  // namespace cabld::ad
