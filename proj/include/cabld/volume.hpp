// volume.hpp — volumetric image type, file IO, trilinear sampling, resampling.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace cabld {

using Vec3 = std::array<double, 3>;

// Dense scalar 3D image. Voxels are float32 (the on-disk payload format);
// all sampling arithmetic runs in double. Axis 0 varies fastest in memory:
// flat = i0 + shape[0]*(i1 + shape[1]*i2). World coordinates (mm) are
// origin + index*spacing per axis.
struct Volume3D {
    std::array<int, 3> shape{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
    std::vector<float> data;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];
    }
    std::int64_t flat(int i, int j, int k) const {
        return i + static_cast<std::int64_t>(shape[0]) * (j + static_cast<std::int64_t>(shape[1]) * k);
    }
    float& at(int i, int j, int k) { return data[flat(i, j, k)]; }
    float at(int i, int j, int k) const { return data[flat(i, j, k)]; }

    Vec3 world(double i, double j, double k) const {
        return {origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + k * spacing[2]};
    }
    Vec3 center() const {
        return world((shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0);
    }

    // throws DataError when the metadata or payload violates the invariants
    // (dims >= 2, positive spacing, size match, finite voxels)
    void validate() const;
};

Volume3D make_volume(std::array<int, 3> shape, Vec3 spacing = {1, 1, 1}, Vec3 origin = {0, 0, 0});

// Raw little-endian float32 payload `<stem>.f32raw` plus `<stem>.json` sidecar
// {shape, spacing, origin}. `path` may name either file or the bare stem.
Volume3D load_volume(const std::string& path);
void save_volume(const Volume3D& v, const std::string& path);

// Trilinear interpolation at world point p (mm); zero outside the grid.
double sample_trilinear(const Volume3D& v, const Vec3& p);

// Per-output-voxel map into source-volume world coordinates (mm),
// interleaved xyz. Backward-warping convention.
struct DeformationField {
    std::array<int, 3> shape{0, 0, 0};
    std::vector<double> xyz;  // 3 * numel, [x0 y0 z0 x1 y1 z1 ...]

    std::int64_t numel() const {
        return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];
    }
};

// output(u) = sample_trilinear(v, field(u)); output grid inherits `geometry`'s
// shape/spacing/origin (the space the field was rasterized on).
Volume3D resample_by_field(const Volume3D& v, const DeformationField& field,
                           const std::array<int, 3>& out_shape, const Vec3& out_spacing,
                           const Vec3& out_origin);

}  // namespace cabld
