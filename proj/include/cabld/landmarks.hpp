// landmarks.hpp — ordered landmark sets in world (mm) coordinates.
#pragma once

#include <string>
#include <vector>

#include "cabld/volume.hpp"

namespace cabld {

// Ordered list of 3D points; index i always denotes the same anatomical
// landmark across subjects (the protocol).
struct LandmarkSet {
    std::vector<Vec3> points;

    int count() const { return static_cast<int>(points.size()); }

    // throws DataError when empty or non-finite
    void validate() const;
};

// JSON array of [x,y,z] mm triples.
LandmarkSet load_landmarks(const std::string& path);
void save_landmarks(const LandmarkSet& lm, const std::string& path);

}  // namespace cabld
