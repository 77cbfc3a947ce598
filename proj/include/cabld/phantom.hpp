// phantom.hpp — synthetic 3D phantoms with analytically known landmarks.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cabld/augment.hpp"
#include "cabld/landmarks.hpp"
#include "cabld/volume.hpp"

namespace cabld {

enum class ContrastFamily { kIdentity, kGamma, kRc };

// Template recipe: a smooth two-ellipsoid body plus L Gaussian blobs of
// distinct size/brightness anchored at the landmark sites (ground truth =
// blob centers, exact by construction). Subjects are TPS-warped copies whose
// control lattice includes the landmark sites, so the subject ground truth is
// the exact analytic image of the template landmarks.
struct PhantomSpec {
    int grid = 48;               // cubic volume, spacing 1 mm
    int landmarks = 6;
    double site_radius = 0.27;   // landmark ring radius, fraction of grid
    double site_jitter = 2.0;    // template site perturbation, mm
    double deform_sigma = 3.0;   // control-point jitter for subjects, mm
    double noise_sigma = 0.015;
    ContrastFamily contrast = ContrastFamily::kIdentity;
    double gamma = 1.0;          // used when contrast == kGamma
    RcConfig rc;                 // used when contrast == kRc
    std::uint64_t seed = 0;
    double margin = 4.0;         // landmark-to-border clearance, voxels

    void validate() const;  // throws ConfigError
};

struct Phantom {
    Volume3D volume;
    LandmarkSet landmarks;
};

Phantom make_template(const PhantomSpec& spec);

// Warp a template by the lambda=0 TPS interpolating control_src ->
// control_dst (pull-back resampling of the volume; landmarks carried
// analytically). The last `landmark_count` control pairs must be the
// template landmarks, so the returned ground truth is exact by construction.
Phantom deform_phantom(const Phantom& tmpl, const LandmarkSet& control_src,
                       const LandmarkSet& control_dst, int landmark_count);

// deterministic per (spec, seed); the same seed with a different contrast
// family yields the same geometry
Phantom make_subject(const Phantom& tmpl, const PhantomSpec& spec, std::uint64_t seed);

// Writes template + n_train + n_test subjects in the volume/landmark file
// formats plus manifest.json (spec echo, per-subject seeds, splits). Returns
// the manifest path.
std::string make_cohort(const PhantomSpec& spec, int n_train, int n_test,
                        const std::string& out_dir);

struct CohortEntry {
    std::string id;
    std::string volume_stem;    // relative to manifest dir
    std::string landmark_file;  // relative to manifest dir
    std::uint64_t seed = 0;
};

struct CohortManifest {
    PhantomSpec spec;
    std::string dir;
    std::string template_stem;
    std::string template_landmarks;
    std::vector<CohortEntry> train;
    std::vector<CohortEntry> test;
};

CohortManifest load_manifest(const std::string& path);

// JSON (de)serialization of the spec block, shared by manifest and CLI
void spec_to_json_file(const PhantomSpec& spec, const std::string& path);
PhantomSpec spec_from_json_file(const std::string& path);

}  // namespace cabld
