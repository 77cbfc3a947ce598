// metrics.hpp — landmark detection evaluation: MRE and SDR.
#pragma once

#include <string>
#include <vector>

#include "cabld/landmarks.hpp"

namespace cabld {

struct EvalReport {
    std::vector<std::vector<double>> radial_errors;  // [scan][landmark], mm
    double mre_mean = 0.0;
    double mre_std = 0.0;  // population std over all S*L errors
    std::vector<double> thresholds;                  // tau, mm
    std::vector<double> sdr;                         // percent, parallel to thresholds
};

// mean +- population std of all S*L radial errors; counts/ordering must match
std::pair<double, double> mre(const std::vector<LandmarkSet>& pred,
                              const std::vector<LandmarkSet>& gt);

// 100 * #{errors strictly < tau} / (S*L)
double sdr(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& gt, double tau);

EvalReport report(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& gt,
                  const std::vector<double>& thresholds);

void save_report_json(const EvalReport& r, const std::string& path);
void save_report_csv(const EvalReport& r, const std::string& path);

}  // namespace cabld
