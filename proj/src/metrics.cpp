// metrics.cpp — MRE / SDR evaluation.

#include "cabld/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cabld/errors.hpp"

namespace cabld {

using nlohmann::json;

namespace {

std::vector<std::vector<double>> radial_errors(const std::vector<LandmarkSet>& pred,
                                               const std::vector<LandmarkSet>& gt) {
    if (pred.size() != gt.size()) throw ConfigError("mre/sdr: scan count mismatch");
    if (pred.empty()) throw ConfigError("mre/sdr: no scans");
    std::vector<std::vector<double>> errs;
    errs.reserve(pred.size());
    for (std::size_t s = 0; s < pred.size(); ++s) {
        if (pred[s].count() != gt[s].count())
            throw ConfigError("mre/sdr: landmark count mismatch in scan " + std::to_string(s));
        std::vector<double> row;
        row.reserve(static_cast<std::size_t>(pred[s].count()));
        for (int i = 0; i < pred[s].count(); ++i) {
            const auto& a = pred[s].points[static_cast<std::size_t>(i)];
            const auto& b = gt[s].points[static_cast<std::size_t>(i)];
            const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
            row.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
        }
        errs.push_back(std::move(row));
    }
    return errs;
}

std::pair<double, double> mean_std(const std::vector<std::vector<double>>& errs) {
    double sum = 0.0;
    std::int64_t n = 0;
    for (const auto& row : errs)
        for (double e : row) {
            sum += e;
            ++n;
        }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& row : errs)
        for (double e : row) ss += (e - mean) * (e - mean);
    return {mean, std::sqrt(ss / static_cast<double>(n))};
}

}  // namespace

std::pair<double, double> mre(const std::vector<LandmarkSet>& pred,
                              const std::vector<LandmarkSet>& gt) {
    return mean_std(radial_errors(pred, gt));
}

double sdr(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& gt, double tau) {
    if (!(tau > 0.0)) throw ConfigError("sdr: threshold must be > 0");
    const auto errs = radial_errors(pred, gt);
    std::int64_t hits = 0, n = 0;
    for (const auto& row : errs)
        for (double e : row) {
            hits += (e < tau) ? 1 : 0;  // strict inequality
            ++n;
        }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

EvalReport report(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& gt,
                  const std::vector<double>& thresholds) {
    EvalReport r;
    r.radial_errors = radial_errors(pred, gt);
    std::tie(r.mre_mean, r.mre_std) = mean_std(r.radial_errors);
    r.thresholds = thresholds;
    for (double tau : thresholds) r.sdr.push_back(sdr(pred, gt, tau));
    return r;
}

void save_report_json(const EvalReport& r, const std::string& path) {
    json j;
    j["mre_mean_mm"] = r.mre_mean;
    j["mre_std_mm"] = r.mre_std;
    json sdrs = json::object();
    for (std::size_t i = 0; i < r.thresholds.size(); ++i)
        sdrs[std::to_string(r.thresholds[i]) + "mm"] = r.sdr[i];
    j["sdr_percent"] = sdrs;
    j["radial_errors_mm"] = r.radial_errors;
    if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
        std::filesystem::create_directories(dir);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write report: " + path);
    f << j.dump(2) << "\n";
}

void save_report_csv(const EvalReport& r, const std::string& path) {
    if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
        std::filesystem::create_directories(dir);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write report: " + path);
    f << "scan,landmark,radial_error_mm\n";
    for (std::size_t s = 0; s < r.radial_errors.size(); ++s)
        for (std::size_t i = 0; i < r.radial_errors[s].size(); ++i)
            f << s << "," << i << "," << r.radial_errors[s][i] << "\n";
    f << "\nmre_mean_mm,mre_std_mm";
    for (double t : r.thresholds) f << ",sdr_" << t << "mm";
    f << "\n" << r.mre_mean << "," << r.mre_std;
    for (double v : r.sdr) f << "," << v;
    f << "\n";
}

}  // namespace cabld
