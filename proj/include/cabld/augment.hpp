// augment.hpp — random-convolution contrast augmentation and random affine
// geometric augmentation, both deterministic per seed.
#pragma once

#include <array>
#include <cstdint>

#include <Eigen/Dense>

#include "cabld/landmarks.hpp"
#include "cabld/rng.hpp"
#include "cabld/volume.hpp"

namespace cabld {

// Cascade of `layers` random pointwise convolutions with LeakyReLU between
// them. kernel = 1 keeps the map strictly pointwise (voxel i depends only on
// voxel i); 3/5 exist for the blur demonstration only and are never used in
// training. Hidden layers carry `channels` feature maps so that layer-wide
// zero-centering of the sampled weights leaves a usable operator.
struct RcConfig {
    int layers = 5;
    double weight_lo = 0.0;
    double weight_hi = 2.0;
    double slope = 0.2;  // LeakyReLU negative slope
    int kernel = 1;      // spatial extent, odd
    int channels = 4;    // hidden width

    void validate() const;  // throws ConfigError
};

// output min-max rescaled to [0, 1]; constant inputs come back unchanged
Volume3D rc_augment(const Volume3D& v, const RcConfig& cfg, std::uint64_t seed);

struct AffineRanges {
    double rot_deg = 180.0;    // per-axis Euler angle bound
    double trans_vox = 15.0;   // per-axis translation bound, voxels
    double scale_lo = 0.8;
    double scale_hi = 1.2;
    double shear = 0.1;
};

struct AffineAug {
    std::array<double, 3> rotation_deg{};
    std::array<double, 3> translation_vox{};
    std::array<double, 3> scale{1, 1, 1};
    std::array<double, 3> shear{};
    Eigen::Matrix4d forward = Eigen::Matrix4d::Identity();  // world mm -> world mm
    Eigen::Matrix4d inverse = Eigen::Matrix4d::Identity();
};

// parameters uniform in the ranges; the map rotates/shears/scales about the
// volume center and then translates: p' = C + R*Sh*S*(p - C) + t
AffineAug sample_affine(const AffineRanges& ranges, const Volume3D& geometry, Rng& rng);

// volume resampled by backward warping with the inverse matrix
Volume3D apply_affine(const Volume3D& v, const AffineAug& aug);
// points mapped by the forward matrix (consistent with apply_affine)
LandmarkSet apply_affine_points(const LandmarkSet& lm, const AffineAug& aug);

}  // namespace cabld
