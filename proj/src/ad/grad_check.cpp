// grad_check.cpp — finite-difference gradient verification.

#include "cabld/ad/grad_check.hpp"

#include <cmath>

#include "cabld/errors.hpp"

namespace cabld::ad {

double grad_check(const Program& f, const std::vector<int>& shape,
                  const std::vector<double>& x0, double eps) {
    if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be > 0");

    Graph g;
    Tensor x = g.param(shape, x0);
    Tensor loss = f(g, x);
    if (loss.numel() != 1) throw ConfigError("grad_check: program must be scalar-valued");
    g.backward(loss);
    const std::vector<double> analytic = x.grad();

    auto value_at = [&](const std::vector<double>& xv) {
        Graph g2;
        Tensor x2 = g2.param(shape, xv);
        return f(g2, x2).scalar();
    };

    double worst = 0.0;
    std::vector<double> xv = x0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double keep = xv[i];
        xv[i] = keep + eps;
        const double fp = value_at(xv);
        xv[i] = keep - eps;
        const double fm = value_at(xv);
        xv[i] = keep;
        const double fd = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace cabld::ad
