// tps.cpp — thin-plate-spline fit/eval/rasterize.

#include "cabld/tps.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cabld/errors.hpp"
#include "cabld/linalg.hpp"

namespace cabld {

using nlohmann::json;
using Mat3c = Eigen::Matrix<double, Eigen::Dynamic, 3>;

double kernel_phi(double r) {
    if (r < 0.0) throw NumericalError("kernel_phi: negative radius");
    if (r == 0.0) return 0.0;
    return r * r * std::log(r);
}

namespace {

// Phi(sqrt(s)) for squared distance s, avoiding the sqrt: r^2 ln r = s ln(s)/2
inline double kernel_from_sqdist(double s) {
    return s > 0.0 ? 0.5 * s * std::log(s) : 0.0;
}

Mat3c to_mat(const LandmarkSet& lm) {
    Mat3c m(lm.count(), 3);
    for (int i = 0; i < lm.count(); ++i)
        for (int a = 0; a < 3; ++a) m(i, a) = lm.points[static_cast<std::size_t>(i)][a];
    return m;
}

// kernel matrix between normalized row sets
Eigen::MatrixXd kernel_matrix(const Mat3c& a, const Mat3c& b) {
    Eigen::MatrixXd k(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            k(i, j) = kernel_from_sqdist((a.row(i) - b.row(j)).squaredNorm());
    return k;
}

Eigen::MatrixXd checked_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const char* what) {
    const EquilibratedLu::RowMat ar = a;
    const EquilibratedLu lu = EquilibratedLu::factor(ar, what);
    return lu.solve(EquilibratedLu::RowMat(b));
}

}  // namespace

TpsTransform fit_tps(const LandmarkSet& source, const LandmarkSet& target, double lambda) {
    source.validate();
    target.validate();
    if (source.count() != target.count())
        throw ConfigError("fit_tps: source/target landmark count mismatch");
    const int n = source.count();
    if (n <= 3) throw ConfigError("fit_tps: needs more than 3 point pairs");
    if (lambda < 0.0) throw ConfigError("fit_tps: lambda must be >= 0");

    const Mat3c src = to_mat(source);
    const Mat3c tgt = to_mat(target);

    TpsTransform t;
    t.source_points = src;
    t.lambda = lambda;
    const Eigen::RowVector3d c = src.colwise().mean();
    const double s = std::sqrt((src.rowwise() - c).rowwise().squaredNorm().mean());
    if (!(s > 0.0)) throw SingularSystem("fit_tps: coincident source points");
    t.norm_center = {c[0], c[1], c[2]};
    t.norm_scale = s;

    const Mat3c sn = (src.rowwise() - c) / s;
    const Mat3c tn = (tgt.rowwise() - c) / s;

    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 4, n + 4);
    a.topLeftCorner(n, n) = kernel_matrix(sn, sn) + lambda * Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd r(n, 4);
    r.leftCols<3>() = sn;
    r.col(3).setOnes();
    a.topRightCorner(n, 4) = r;
    a.bottomLeftCorner(4, n) = r.transpose();

    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n + 4, 3);
    b.topRows(n) = tn;

    const Eigen::MatrixXd x = checked_solve(a, b, "fit_tps");
    t.V = x.topRows(n);
    t.W = x.bottomRows(4);
    return t;
}

Vec3 eval_tps(const TpsTransform& t, const Vec3& p) {
    const int n = t.count();
    const double s = t.norm_scale;
    double px = (p[0] - t.norm_center[0]) / s;
    double py = (p[1] - t.norm_center[1]) / s;
    double pz = (p[2] - t.norm_center[2]) / s;
    Vec3 out{};
    for (int a = 0; a < 3; ++a)
        out[a] = t.W(0, a) * px + t.W(1, a) * py + t.W(2, a) * pz + t.W(3, a);
    for (int j = 0; j < n; ++j) {
        const double dx = (t.source_points(j, 0) - t.norm_center[0]) / s - px;
        const double dy = (t.source_points(j, 1) - t.norm_center[1]) / s - py;
        const double dz = (t.source_points(j, 2) - t.norm_center[2]) / s - pz;
        const double k = kernel_from_sqdist(dx * dx + dy * dy + dz * dz);
        for (int a = 0; a < 3; ++a) out[a] += t.V(j, a) * k;
    }
    for (int a = 0; a < 3; ++a) out[a] = out[a] * s + t.norm_center[a];
    return out;
}

DeformationField dense_field(const TpsTransform& t, const std::array<int, 3>& shape,
                             const Vec3& spacing, const Vec3& origin) {
    DeformationField f;
    f.shape = shape;
    const std::int64_t n = f.numel();
    f.xyz.resize(static_cast<std::size_t>(3 * n));
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < n; ++u) {
        const int i = static_cast<int>(u % shape[0]);
        const int j = static_cast<int>((u / shape[0]) % shape[1]);
        const int k = static_cast<int>(u / (static_cast<std::int64_t>(shape[0]) * shape[1]));
        const Vec3 p{origin[0] + i * spacing[0], origin[1] + j * spacing[1],
                     origin[2] + k * spacing[2]};
        const Vec3 q = eval_tps(t, p);
        f.xyz[3 * u] = q[0];
        f.xyz[3 * u + 1] = q[1];
        f.xyz[3 * u + 2] = q[2];
    }
    return f;
}

double bending_energy(const TpsTransform& t) {
    const Eigen::RowVector3d c(t.norm_center[0], t.norm_center[1], t.norm_center[2]);
    const Mat3c sn = (t.source_points.rowwise() - c) / t.norm_scale;
    const Eigen::MatrixXd m = kernel_matrix(sn, sn);
    return (t.V.transpose() * m * t.V).trace();
}

void save_tps(const TpsTransform& t, const std::string& path) {
    json j;
    auto mat_to_json = [](const auto& m) {
        json rows = json::array();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            json row = json::array();
            for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
            rows.push_back(row);
        }
        return rows;
    };
    j["W"] = mat_to_json(t.W);
    j["V"] = mat_to_json(t.V);
    j["source_points"] = mat_to_json(t.source_points);
    j["lambda"] = t.lambda;
    j["norm_center"] = t.norm_center;
    j["norm_scale"] = t.norm_scale;
    if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
        std::filesystem::create_directories(dir);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write TPS file: " + path);
    f << j.dump(2) << "\n";
}

TpsTransform load_tps(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("missing TPS file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("bad TPS file " + path + ": " + e.what());
    }
    TpsTransform t;
    try {
        const auto& v = j.at("V");
        const auto& sp = j.at("source_points");
        t.V.resize(static_cast<Eigen::Index>(v.size()), 3);
        t.source_points.resize(static_cast<Eigen::Index>(sp.size()), 3);
        for (Eigen::Index i = 0; i < t.V.rows(); ++i)
            for (int a = 0; a < 3; ++a) t.V(i, a) = v.at(i).at(a).get<double>();
        for (Eigen::Index i = 0; i < t.source_points.rows(); ++i)
            for (int a = 0; a < 3; ++a) t.source_points(i, a) = sp.at(i).at(a).get<double>();
        for (int i = 0; i < 4; ++i)
            for (int a = 0; a < 3; ++a) t.W(i, a) = j.at("W").at(i).at(a).get<double>();
        t.lambda = j.at("lambda").get<double>();
        for (int a = 0; a < 3; ++a) t.norm_center[a] = j.at("norm_center").at(a).get<double>();
        t.norm_scale = j.at("norm_scale").get<double>();
    } catch (const json::exception& e) {
        throw DataError("bad TPS file " + path + ": " + e.what());
    }
    return t;
}

}  // namespace cabld
