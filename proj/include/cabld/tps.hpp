// tps.hpp — regularized thin-plate-spline fitting and evaluation.
//
// T(x) = W^T x~ + sum_j v_j Phi(||x_j - x||), Phi(r) = r^2 ln r, fitted from
// the block system [[M + lambda*I, R],[R^T, 0]] [V;W] = [Y;0] with
// M_ij = Phi(dist_ij), R rows = [x_j, 1]. lambda = 0 interpolates; as
// lambda -> inf the map tends to the affine least-squares fit.
//
// The system is assembled in normalized coordinates (source centroid /
// source RMS radius) so that kernel magnitudes are O(1) and lambda has the
// same meaning at any point scale; the stored transform maps mm to mm.
#pragma once

#include <Eigen/Dense>

#include "cabld/landmarks.hpp"
#include "cabld/volume.hpp"

namespace cabld {

struct TpsTransform {
    Eigen::Matrix<double, Eigen::Dynamic, 3> V;              // N x 3, normalized space
    Eigen::Matrix<double, 4, 3> W;                           // affine block, normalized space
    Eigen::Matrix<double, Eigen::Dynamic, 3> source_points;  // N x 3, mm
    double lambda = 0.0;
    Vec3 norm_center{0, 0, 0};
    double norm_scale = 1.0;

    int count() const { return static_cast<int>(source_points.rows()); }
};

// Phi(r) = r^2 ln(r); 0 at r = 0 (limit value). Throws NumericalError on r < 0.
double kernel_phi(double r);

// fit control parameters from matched landmark pairs; lambda >= 0.
// Throws ConfigError on count mismatch / too few points, SingularSystem on
// degenerate configurations (coplanar-or-worse source points).
TpsTransform fit_tps(const LandmarkSet& source, const LandmarkSet& target, double lambda);

Vec3 eval_tps(const TpsTransform& t, const Vec3& p);

// rasterize T over a voxel grid: field(u) = T(world_coord(u)), interleaved xyz
DeformationField dense_field(const TpsTransform& t, const std::array<int, 3>& shape,
                             const Vec3& spacing, const Vec3& origin);

// quadratic form trace(V^T M V) over the fitted kernel matrix; >= 0 for this
// kernel on the constraint subspace, 0 for a pure affine map
double bending_energy(const TpsTransform& t);

// JSON round-trip ({W, V, source_points, lambda, norm_center, norm_scale})
void save_tps(const TpsTransform& t, const std::string& path);
TpsTransform load_tps(const std::string& path);

}  // namespace cabld
