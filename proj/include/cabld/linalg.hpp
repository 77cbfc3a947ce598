// linalg.hpp — dense LU solve with symmetric equilibration and a pivot-ratio
// condition gate.
//
// Saddle-point TPS systems mix O(lambda) kernel rows with O(1) constraint
// rows; raw pivot magnitudes then overstate the conditioning by the scale
// imbalance. Symmetric diagonal scaling D A D (D from row infinity norms)
// leaves the solution map identical while making the pivot-ratio estimate
// track the true conditioning.
#pragma once

#include <Eigen/Dense>
#include <memory>

namespace cabld {

struct EquilibratedLu {
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::PartialPivLU<RowMat> lu;  // factor of D*A*D
    Eigen::VectorXd d;               // scaling diagonal
    double cond_estimate = 0.0;

    // throws SingularSystem when the pivot-ratio estimate exceeds cond_limit
    static EquilibratedLu factor(const Eigen::Ref<const RowMat>& a, const char* what,
                                 double cond_limit = 1e12);

    // x = A^-1 b
    RowMat solve(const Eigen::Ref<const RowMat>& b) const;
    // x = A^-T b
    RowMat solve_transposed(const Eigen::Ref<const RowMat>& b) const;
};

}  // namespace cabld
