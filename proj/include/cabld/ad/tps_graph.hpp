// tps_graph.hpp — differentiable TPS fitting/evaluation inside the autodiff
// graph (same math as cabld::fit_tps; gradients flow through the kernel
// matrix, the constraint rows, the normalization stats, and the solve).
#pragma once

#include <memory>

#include "cabld/ad/graph.hpp"
#include "cabld/landmarks.hpp"
#include "cabld/tps.hpp"

namespace cabld::ad {

struct TpsFitNodes {
    Tensor V;          // [n x 3], normalized space
    Tensor W;          // [4 x 3], normalized space
    Tensor src_n;      // [n x 3] normalized source points
    Tensor center;     // [1 x 3]
    Tensor scale;      // [1]
    Tensor inv_scale;  // [1]
    int n = 0;
};

// src/tgt: [n x 3] tensors in mm. Throws SingularSystem on degenerate input.
TpsFitNodes tps_fit_graph(Graph& g, Tensor src, Tensor tgt, double lambda);

// evaluate the fitted map at [m x 3] mm points -> [m x 3] mm
Tensor tps_eval_graph(Graph& g, const TpsFitNodes& t, Tensor pts);

// Precomputed constants for rasterizing a fit whose source points are fixed
// (the reverse template->subject fit): kernel of the normalized grid against
// the normalized control points, and normalized homogeneous grid coordinates.
struct GridKernel {
    std::vector<double> phi;     // [V x n]
    std::vector<double> gtilde;  // [V x 4]
    std::vector<double> center;  // [3]
    double scale = 1.0;
    std::int64_t vcount = 0;
    int n = 0;
};

GridKernel make_grid_kernel(const LandmarkSet& control_points, const std::array<int, 3>& shape,
                            const Vec3& spacing, const Vec3& origin);

// dense field [V x 3] in mm for a fit produced by tps_fit_graph whose source
// was exactly make_grid_kernel's control points (same normalization stats)
Tensor tps_dense_field_graph(Graph& g, const TpsFitNodes& t, const GridKernel& gk);

}  // namespace cabld::ad
