// augment.cpp — RC contrast cascade and affine augmentation.

#include "cabld/augment.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cabld/errors.hpp"

namespace cabld {

void RcConfig::validate() const {
    if (layers < 1) throw ConfigError("rc: layers must be >= 1");
    if (!(weight_hi > weight_lo)) throw ConfigError("rc: bad weight range");
    if (kernel != 1 && kernel != 3 && kernel != 5) throw ConfigError("rc: kernel must be 1, 3 or 5");
    if (channels < 1) throw ConfigError("rc: channels must be >= 1");
    if (slope < 0.0) throw ConfigError("rc: slope must be >= 0");
}

Volume3D rc_augment(const Volume3D& v, const RcConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    v.validate();
    Rng rng(Rng::derive(seed, 0x7263));
    const std::int64_t nvox = v.numel();
    const int k = cfg.kernel;
    const int k3 = k * k * k;
    const int half = k / 2;

    // channel-major working buffers
    std::vector<double> cur(v.data.begin(), v.data.end());
    int cin = 1;
    for (int layer = 0; layer < cfg.layers; ++layer) {
        const int cout = (layer == cfg.layers - 1) ? 1 : cfg.channels;
        std::vector<double> w(static_cast<std::size_t>(cout) * cin * k3);
        for (double& x : w) x = rng.uniform(cfg.weight_lo, cfg.weight_hi);
        double mean = 0.0;
        for (double x : w) mean += x;
        mean /= static_cast<double>(w.size());
        for (double& x : w) x -= mean;  // zero-centered, layer-wide

        std::vector<double> nxt(static_cast<std::size_t>(cout) * nvox, 0.0);
        if (k == 1) {
            // pointwise channel mixing
#pragma omp parallel for schedule(static)
            for (std::int64_t u = 0; u < nvox; ++u)
                for (int co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (int ci = 0; ci < cin; ++ci)
                        acc += w[static_cast<std::size_t>(co) * cin + ci] *
                               cur[static_cast<std::size_t>(ci) * nvox + u];
                    const double y = acc >= 0.0 ? acc : cfg.slope * acc;
                    nxt[static_cast<std::size_t>(co) * nvox + u] = y;
                }
        } else {
            const int nx = v.shape[0], ny = v.shape[1], nz = v.shape[2];
#pragma omp parallel for schedule(static)
            for (std::int64_t u = 0; u < nvox; ++u) {
                const int ix = static_cast<int>(u % nx);
                const int iy = static_cast<int>((u / nx) % ny);
                const int iz = static_cast<int>(u / (static_cast<std::int64_t>(nx) * ny));
                for (int co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int dz = 0; dz < k; ++dz)
                            for (int dy = 0; dy < k; ++dy)
                                for (int dx = 0; dx < k; ++dx) {
                                    const int x = ix + dx - half, y = iy + dy - half,
                                              z = iz + dz - half;
                                    if (x < 0 || x >= nx || y < 0 || y >= ny || z < 0 || z >= nz)
                                        continue;
                                    acc += w[static_cast<std::size_t>(
                                               ((co * cin + ci) * k + dz) * k * k + dy * k + dx)] *
                                           cur[static_cast<std::size_t>(ci) * nvox + v.flat(x, y, z)];
                                }
                    nxt[static_cast<std::size_t>(co) * nvox + u] =
                        acc >= 0.0 ? acc : cfg.slope * acc;
                }
            }
        }
        cur = std::move(nxt);
        cin = cout;
    }

    double mn = cur[0], mx = cur[0];
    for (double x : cur) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    Volume3D out = v;
    if (mx - mn < 1e-12) return out;  // constant in, constant out
    const double inv = 1.0 / (mx - mn);
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < nvox; ++u)
        out.data[static_cast<std::size_t>(u)] = static_cast<float>((cur[static_cast<std::size_t>(u)] - mn) * inv);
    return out;
}

AffineAug sample_affine(const AffineRanges& ranges, const Volume3D& geometry, Rng& rng) {
    AffineAug a;
    for (int i = 0; i < 3; ++i) a.rotation_deg[i] = rng.uniform(-ranges.rot_deg, ranges.rot_deg);
    for (int i = 0; i < 3; ++i)
        a.translation_vox[i] = rng.uniform(-ranges.trans_vox, ranges.trans_vox);
    for (int i = 0; i < 3; ++i) a.scale[i] = rng.uniform(ranges.scale_lo, ranges.scale_hi);
    for (int i = 0; i < 3; ++i) a.shear[i] = rng.uniform(-ranges.shear, ranges.shear);

    auto rad = [](double deg) { return deg * M_PI / 180.0; };
    const double cx = std::cos(rad(a.rotation_deg[0])), sx = std::sin(rad(a.rotation_deg[0]));
    const double cy = std::cos(rad(a.rotation_deg[1])), sy = std::sin(rad(a.rotation_deg[1]));
    const double cz = std::cos(rad(a.rotation_deg[2])), sz = std::sin(rad(a.rotation_deg[2]));
    Eigen::Matrix3d rx, ry, rz;
    rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
    Eigen::Matrix3d sh = Eigen::Matrix3d::Identity();
    sh(0, 1) = a.shear[0];
    sh(0, 2) = a.shear[1];
    sh(1, 2) = a.shear[2];
    const Eigen::Matrix3d lin =
        rz * ry * rx * sh * Eigen::Vector3d(a.scale[0], a.scale[1], a.scale[2]).asDiagonal();

    const Vec3 c = geometry.center();
    Eigen::Vector3d cv(c[0], c[1], c[2]);
    Eigen::Vector3d t(a.translation_vox[0] * geometry.spacing[0],
                      a.translation_vox[1] * geometry.spacing[1],
                      a.translation_vox[2] * geometry.spacing[2]);

    a.forward = Eigen::Matrix4d::Identity();
    a.forward.topLeftCorner<3, 3>() = lin;
    a.forward.topRightCorner<3, 1>() = cv + t - lin * cv;

    if (std::abs(lin.determinant()) < 1e-12)
        throw NumericalError("sample_affine: degenerate composition");
    a.inverse = a.forward.inverse();
    return a;
}

Volume3D apply_affine(const Volume3D& v, const AffineAug& aug) {
    DeformationField field;
    field.shape = v.shape;
    const std::int64_t n = v.numel();
    field.xyz.resize(static_cast<std::size_t>(3 * n));
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < n; ++u) {
        const int i = static_cast<int>(u % v.shape[0]);
        const int j = static_cast<int>((u / v.shape[0]) % v.shape[1]);
        const int k = static_cast<int>(u / (static_cast<std::int64_t>(v.shape[0]) * v.shape[1]));
        const Vec3 p = v.world(i, j, k);
        Eigen::Vector4d q = aug.inverse * Eigen::Vector4d(p[0], p[1], p[2], 1.0);
        field.xyz[3 * u] = q[0];
        field.xyz[3 * u + 1] = q[1];
        field.xyz[3 * u + 2] = q[2];
    }
    return resample_by_field(v, field, v.shape, v.spacing, v.origin);
}

LandmarkSet apply_affine_points(const LandmarkSet& lm, const AffineAug& aug) {
    lm.validate();
    LandmarkSet out;
    out.points.reserve(lm.points.size());
    for (const auto& p : lm.points) {
        Eigen::Vector4d q = aug.forward * Eigen::Vector4d(p[0], p[1], p[2], 1.0);
        out.points.push_back({q[0], q[1], q[2]});
    }
    return out;
}

}  // namespace cabld
