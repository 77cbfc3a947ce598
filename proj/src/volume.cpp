// volume.cpp — Volume3D IO and sampling.

#include "cabld/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cabld/errors.hpp"

namespace cabld {

namespace fs = std::filesystem;
using nlohmann::json;

void Volume3D::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (shape[a] < 2) throw DataError("volume dim " + std::to_string(a) + " must be >= 2");
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
            throw DataError("volume spacing must be positive and finite");
        if (!std::isfinite(origin[a])) throw DataError("volume origin must be finite");
    }
    if (static_cast<std::int64_t>(data.size()) != numel())
        throw DataError("volume size mismatch: data " + std::to_string(data.size()) +
                        " vs shape product " + std::to_string(numel()));
    for (float f : data)
        if (!std::isfinite(f)) throw DataError("non-finite voxel value");
}

Volume3D make_volume(std::array<int, 3> shape, Vec3 spacing, Vec3 origin) {
    Volume3D v;
    v.shape = shape;
    v.spacing = spacing;
    v.origin = origin;
    v.data.assign(static_cast<std::size_t>(v.numel()), 0.0f);
    v.validate();
    return v;
}

namespace {

// accept "<stem>", "<stem>.f32raw" or "<stem>.json"
std::string stem_of(const std::string& path) {
    for (const char* ext : {".f32raw", ".json"}) {
        if (path.size() > std::strlen(ext) && path.ends_with(ext))
            return path.substr(0, path.size() - std::strlen(ext));
    }
    return path;
}

}  // namespace

Volume3D load_volume(const std::string& path) {
    const std::string stem = stem_of(path);
    const std::string raw_path = stem + ".f32raw";
    const std::string json_path = stem + ".json";

    std::ifstream js(json_path);
    if (!js) throw DataError("missing sidecar: " + json_path);
    json j;
    try {
        js >> j;
    } catch (const json::exception& e) {
        throw DataError("bad sidecar " + json_path + ": " + e.what());
    }

    Volume3D v;
    try {
        auto sh = j.at("shape");
        auto sp = j.at("spacing");
        auto og = j.at("origin");
        for (int a = 0; a < 3; ++a) {
            v.shape[a] = sh.at(a).get<int>();
            v.spacing[a] = sp.at(a).get<double>();
            v.origin[a] = og.at(a).get<double>();
        }
    } catch (const json::exception& e) {
        throw DataError("bad sidecar " + json_path + ": " + e.what());
    }

    std::ifstream rf(raw_path, std::ios::binary);
    if (!rf) throw DataError("missing volume payload: " + raw_path);
    rf.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::int64_t>(rf.tellg());
    rf.seekg(0);
    const std::int64_t expect = static_cast<std::int64_t>(v.shape[0]) * v.shape[1] * v.shape[2];
    if (v.shape[0] < 2 || v.shape[1] < 2 || v.shape[2] < 2)
        throw DataError("bad shape in sidecar " + json_path);
    if (bytes != expect * 4)
        throw DataError("size mismatch: " + raw_path + " holds " + std::to_string(bytes / 4) +
                        " floats, sidecar shape wants " + std::to_string(expect));
    v.data.resize(static_cast<std::size_t>(expect));
    rf.read(reinterpret_cast<char*>(v.data.data()), expect * 4);
    if (!rf) throw DataError("short read: " + raw_path);
    v.validate();
    return v;
}

void save_volume(const Volume3D& v, const std::string& path) {
    v.validate();
    const std::string stem = stem_of(path);
    if (auto dir = fs::path(stem).parent_path(); !dir.empty()) fs::create_directories(dir);

    json j;
    j["shape"] = v.shape;
    j["spacing"] = v.spacing;
    j["origin"] = v.origin;
    std::ofstream js(stem + ".json");
    if (!js) throw DataError("cannot write sidecar: " + stem + ".json");
    js << j.dump(2) << "\n";

    std::ofstream rf(stem + ".f32raw", std::ios::binary);
    if (!rf) throw DataError("cannot write payload: " + stem + ".f32raw");
    rf.write(reinterpret_cast<const char*>(v.data.data()),
             static_cast<std::streamsize>(v.data.size()) * 4);
    if (!rf) throw DataError("short write: " + stem + ".f32raw");
}

double sample_trilinear(const Volume3D& v, const Vec3& p) {
    // continuous voxel coordinates
    const double cx = (p[0] - v.origin[0]) / v.spacing[0];
    const double cy = (p[1] - v.origin[1]) / v.spacing[1];
    const double cz = (p[2] - v.origin[2]) / v.spacing[2];
    const double fx = std::floor(cx), fy = std::floor(cy), fz = std::floor(cz);
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
    const double tx = cx - fx, ty = cy - fy, tz = cz - fz;

    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        const int z = z0 + dz;
        if (z < 0 || z >= v.shape[2]) continue;  // zero padding
        const double wz = dz ? tz : 1.0 - tz;
        for (int dy = 0; dy < 2; ++dy) {
            const int y = y0 + dy;
            if (y < 0 || y >= v.shape[1]) continue;
            const double wy = dy ? ty : 1.0 - ty;
            for (int dx = 0; dx < 2; ++dx) {
                const int x = x0 + dx;
                if (x < 0 || x >= v.shape[0]) continue;
                const double wx = dx ? tx : 1.0 - tx;
                acc += wx * wy * wz * static_cast<double>(v.data[v.flat(x, y, z)]);
            }
        }
    }
    return acc;
}

Volume3D resample_by_field(const Volume3D& v, const DeformationField& field,
                           const std::array<int, 3>& out_shape, const Vec3& out_spacing,
                           const Vec3& out_origin) {
    if (field.shape != out_shape)
        throw DataError("field shape does not match output grid shape");
    if (static_cast<std::int64_t>(field.xyz.size()) != 3 * field.numel())
        throw DataError("field payload size mismatch");
    Volume3D out = make_volume(out_shape, out_spacing, out_origin);
    const std::int64_t n = out.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < n; ++u) {
        const Vec3 p{field.xyz[3 * u], field.xyz[3 * u + 1], field.xyz[3 * u + 2]};
        out.data[static_cast<std::size_t>(u)] = static_cast<float>(sample_trilinear(v, p));
    }
    return out;
}

}  // namespace cabld
