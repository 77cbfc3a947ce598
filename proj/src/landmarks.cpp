// landmarks.cpp — landmark set IO.

#include "cabld/landmarks.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cabld/errors.hpp"

namespace cabld {

using nlohmann::json;

void LandmarkSet::validate() const {
    if (points.empty()) throw DataError("landmark set is empty");
    for (const auto& p : points)
        for (double c : p)
            if (!std::isfinite(c)) throw DataError("non-finite landmark coordinate");
}

LandmarkSet load_landmarks(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("missing landmark file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("bad landmark file " + path + ": " + e.what());
    }
    if (!j.is_array()) throw DataError("landmark file must be a JSON array: " + path);
    LandmarkSet lm;
    for (const auto& row : j) {
        if (!row.is_array() || row.size() != 3)
            throw DataError("landmark entries must be [x,y,z] triples: " + path);
        lm.points.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
    }
    lm.validate();
    return lm;
}

void save_landmarks(const LandmarkSet& lm, const std::string& path) {
    lm.validate();
    if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
        std::filesystem::create_directories(dir);
    json j = json::array();
    for (const auto& p : lm.points) j.push_back(p);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write landmark file: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace cabld
