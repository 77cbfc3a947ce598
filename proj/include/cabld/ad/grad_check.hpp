// grad_check.hpp — central-finite-difference verification of analytic
// gradients. The program is re-run forward-only for each perturbed
// coordinate, so it must be deterministic given its input tensor.
#pragma once

#include <functional>
#include <vector>

#include "cabld/ad/graph.hpp"

namespace cabld::ad {

// builds a scalar tensor from the input tensor inside the supplied graph
using Program = std::function<Tensor(Graph&, Tensor)>;

// max over coordinates of |analytic - central difference| / max(1, |analytic|)
double grad_check(const Program& f, const std::vector<int>& shape,
                  const std::vector<double>& x0, double eps = 1e-5);

}  // namespace cabld::ad
