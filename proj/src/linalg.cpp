// linalg.cpp — equilibrated LU solve.

#include "cabld/linalg.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cabld/errors.hpp"

namespace cabld {

EquilibratedLu EquilibratedLu::factor(const Eigen::Ref<const RowMat>& a, const char* what,
                                      double cond_limit) {
    const Eigen::Index n = a.rows();
    EquilibratedLu out;
    out.d.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = a.row(i).cwiseAbs().maxCoeff();
        out.d[i] = (m > 0.0 && std::isfinite(m)) ? 1.0 / std::sqrt(m) : 1.0;
    }
    RowMat scaled = out.d.asDiagonal() * a * out.d.asDiagonal();
    out.lu.compute(scaled);
    const auto diag = out.lu.matrixLU().diagonal();
    double mx = 0.0, mn = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double p = std::abs(diag[i]);
        mx = std::max(mx, p);
        mn = std::min(mn, p);
    }
    out.cond_estimate = (mn > 0.0) ? mx / mn : std::numeric_limits<double>::infinity();
    if (!(mn > 0.0) || !std::isfinite(mx) || out.cond_estimate > cond_limit)
        throw SingularSystem(std::string(what) + ": singular or ill-conditioned system (cond est " +
                             std::to_string(out.cond_estimate) + ")");
    return out;
}

EquilibratedLu::RowMat EquilibratedLu::solve(const Eigen::Ref<const RowMat>& b) const {
    // A x = b  <=>  (DAD) (D^-1 x) = D b
    return d.asDiagonal() * lu.solve(d.asDiagonal() * b).eval();
}

EquilibratedLu::RowMat EquilibratedLu::solve_transposed(const Eigen::Ref<const RowMat>& b) const {
    return d.asDiagonal() * lu.transpose().solve((d.asDiagonal() * b).eval()).eval();
}

}  // namespace cabld
