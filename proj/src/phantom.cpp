// phantom.cpp — synthetic cohort generation.

#include "cabld/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cabld/errors.hpp"
#include "cabld/rng.hpp"
#include "cabld/tps.hpp"

namespace cabld {

namespace fs = std::filesystem;
using nlohmann::json;

void PhantomSpec::validate() const {
    if (grid < 16) throw ConfigError("phantom: grid must be >= 16");
    if (landmarks < 1) throw ConfigError("phantom: needs at least one landmark");
    if (!(site_radius > 0.05 && site_radius < 0.45)) throw ConfigError("phantom: bad site radius");
    if (deform_sigma < 0 || noise_sigma < 0 || site_jitter < 0)
        throw ConfigError("phantom: negative magnitudes");
    if (contrast == ContrastFamily::kGamma && !(gamma > 0))
        throw ConfigError("phantom: gamma must be > 0");
    if (margin < 1.0) throw ConfigError("phantom: margin must be >= 1 voxel");
    // out-of-bounds deformation draws are retried per landmark, so feasibility
    // only concerns the undeformed sites
    const double r = site_radius * grid + site_jitter + margin;
    if (r > grid / 2.0)
        throw ConfigError("phantom: sites cannot stay inside the grid margin");
}

namespace {

// distinct blob shapes cycle through these
constexpr double kSigmas[6] = {2.2, 3.4, 2.6, 3.0, 2.4, 3.2};
constexpr double kAmps[6] = {0.65, 0.95, 0.75, 0.50, 0.85, 0.40};

std::vector<Vec3> landmark_sites(const PhantomSpec& spec) {
    Rng rng(Rng::derive(spec.seed, 0x73697465));
    const double n = spec.grid;
    const Vec3 c{(n - 1) / 2.0, (n - 1) / 2.0, (n - 1) / 2.0};
    const double r = spec.site_radius * n;
    std::vector<Vec3> sites;
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < spec.landmarks; ++i) {
        // Fibonacci sphere keeps any L well separated
        const double z = spec.landmarks == 1 ? 0.0 : 1.0 - 2.0 * i / (spec.landmarks - 1.0);
        const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double th = golden * i;
        Vec3 p{c[0] + r * rho * std::cos(th) + rng.uniform(-spec.site_jitter, spec.site_jitter),
               c[1] + r * rho * std::sin(th) + rng.uniform(-spec.site_jitter, spec.site_jitter),
               c[2] + r * z + rng.uniform(-spec.site_jitter, spec.site_jitter)};
        sites.push_back(p);
    }
    return sites;
}

}  // namespace

Phantom make_template(const PhantomSpec& spec) {
    spec.validate();
    const int n = spec.grid;
    Phantom ph;
    ph.volume = make_volume({n, n, n});
    const auto sites = landmark_sites(spec);
    ph.landmarks.points = sites;

    const double cx = (n - 1) / 2.0, cy = cx, cz = cx;
    const double ax = 0.42 * n, ay = 0.36 * n, az = 0.39 * n;
    const double bx = 0.20 * n, by = 0.16 * n, bz = 0.13 * n;
    const double ox = 0.05 * n, oy = -0.04 * n, oz = 0.03 * n;

    const std::int64_t nvox = ph.volume.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < nvox; ++u) {
        const int i = static_cast<int>(u % n);
        const int j = static_cast<int>((u / n) % n);
        const int k = static_cast<int>(u / (static_cast<std::int64_t>(n) * n));
        const double x = i, y = j, z = k;
        const double q1 = ((x - cx) / ax) * ((x - cx) / ax) + ((y - cy) / ay) * ((y - cy) / ay) +
                          ((z - cz) / az) * ((z - cz) / az);
        const double q2 = ((x - cx - ox) / bx) * ((x - cx - ox) / bx) +
                          ((y - cy - oy) / by) * ((y - cy - oy) / by) +
                          ((z - cz - oz) / bz) * ((z - cz - oz) / bz);
        double val = 0.35 / (1.0 + std::exp(-8.0 * (1.0 - q1)));
        val += 0.20 / (1.0 + std::exp(-8.0 * (1.0 - q2)));
        for (std::size_t b = 0; b < sites.size(); ++b) {
            const double sg = kSigmas[b % 6];
            const double dxs = x - sites[b][0], dys = y - sites[b][1], dzs = z - sites[b][2];
            const double d2 = dxs * dxs + dys * dys + dzs * dzs;
            val += kAmps[b % 6] * std::exp(-0.5 * d2 / (sg * sg));
        }
        ph.volume.data[static_cast<std::size_t>(u)] =
            static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
    return ph;
}

namespace {

void apply_contrast_and_noise(Volume3D& v, const PhantomSpec& spec, Rng& rng,
                              std::uint64_t subject_seed) {
    if (spec.contrast == ContrastFamily::kGamma) {
        for (auto& f : v.data)
            f = static_cast<float>(std::pow(std::clamp(static_cast<double>(f), 0.0, 1.0),
                                            spec.gamma));
    } else if (spec.contrast == ContrastFamily::kRc) {
        v = rc_augment(v, spec.rc, Rng::derive(subject_seed, 0x72630a));
    }
    if (spec.noise_sigma > 0.0) {
        for (auto& f : v.data) {
            const double y = static_cast<double>(f) + rng.normal(0.0, spec.noise_sigma);
            f = static_cast<float>(std::clamp(y, 0.0, 1.0));
        }
    }
}

}  // namespace

Phantom make_subject(const Phantom& tmpl, const PhantomSpec& spec, std::uint64_t seed) {
    spec.validate();
    tmpl.volume.validate();
    const int n = spec.grid;
    const int L = tmpl.landmarks.count();
    Rng rng(Rng::derive(seed, 0x73756266));

    // control points: 4x4x4 lattice (outer shell held fixed) + landmark sites
    std::vector<Vec3> lattice;
    const double lo = spec.margin, hi = n - 1 - spec.margin;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
            for (int c = 0; c < 4; ++c)
                lattice.push_back({lo + (hi - lo) * c / 3.0, lo + (hi - lo) * b / 3.0,
                                   lo + (hi - lo) * a / 3.0});

    LandmarkSet src, dst;
    const double bound_lo = spec.margin, bound_hi = n - 1 - spec.margin;
    for (const auto& p : lattice) {
        src.points.push_back(p);
        const bool interior =
            std::max({std::abs(p[0] - (n - 1) / 2.0), std::abs(p[1] - (n - 1) / 2.0),
                      std::abs(p[2] - (n - 1) / 2.0)}) < 0.33 * n;
        Vec3 q = p;
        if (interior && spec.deform_sigma > 0)
            for (int a = 0; a < 3; ++a) q[a] += rng.normal(0.0, spec.deform_sigma);
        dst.points.push_back(q);
    }
    for (int i = 0; i < L; ++i) {
        const Vec3 p = tmpl.landmarks.points[static_cast<std::size_t>(i)];
        src.points.push_back(p);
        Vec3 q = p;
        for (int tries = 0;; ++tries) {
            q = p;
            if (spec.deform_sigma > 0)
                for (int a = 0; a < 3; ++a) q[a] += rng.normal(0.0, spec.deform_sigma);
            const bool inside = q[0] > bound_lo && q[0] < bound_hi && q[1] > bound_lo &&
                                q[1] < bound_hi && q[2] > bound_lo && q[2] < bound_hi;
            if (inside) break;
            if (tries > 64) throw NumericalError("make_subject: cannot keep landmark in bounds");
        }
        dst.points.push_back(q);
    }

    Phantom out =
        spec.deform_sigma > 0 ? deform_phantom(tmpl, src, dst, L)
                              : Phantom{tmpl.volume, {std::vector<Vec3>(dst.points.end() - L,
                                                                        dst.points.end())}};
    apply_contrast_and_noise(out.volume, spec, rng, seed);
    return out;
}

Phantom deform_phantom(const Phantom& tmpl, const LandmarkSet& control_src,
                       const LandmarkSet& control_dst, int landmark_count) {
    if (control_src.count() != control_dst.count())
        throw ConfigError("deform_phantom: control point count mismatch");
    if (landmark_count < 1 || landmark_count > control_src.count())
        throw ConfigError("deform_phantom: bad landmark count");
    Phantom out;
    out.landmarks.points.assign(control_dst.points.end() - landmark_count,
                                control_dst.points.end());
    // pull-back map: subject coords -> template coords
    const TpsTransform bwd = fit_tps(control_dst, control_src, 0.0);
    const DeformationField field =
        dense_field(bwd, tmpl.volume.shape, tmpl.volume.spacing, tmpl.volume.origin);
    out.volume = resample_by_field(tmpl.volume, field, tmpl.volume.shape, tmpl.volume.spacing,
                                   tmpl.volume.origin);
    return out;
}

namespace {

json spec_to_json(const PhantomSpec& s) {
    json j;
    j["grid"] = s.grid;
    j["landmarks"] = s.landmarks;
    j["site_radius"] = s.site_radius;
    j["site_jitter"] = s.site_jitter;
    j["deform_sigma"] = s.deform_sigma;
    j["noise_sigma"] = s.noise_sigma;
    j["contrast"] = s.contrast == ContrastFamily::kIdentity ? "identity"
                    : s.contrast == ContrastFamily::kGamma  ? "gamma"
                                                            : "rc";
    j["gamma"] = s.gamma;
    j["rc_layers"] = s.rc.layers;
    j["rc_channels"] = s.rc.channels;
    j["seed"] = s.seed;
    j["margin"] = s.margin;
    return j;
}

PhantomSpec spec_from_json(const json& j) {
    PhantomSpec s;
    const std::vector<std::string> known{"grid",         "landmarks", "site_radius", "site_jitter",
                                         "deform_sigma", "noise_sigma", "contrast",  "gamma",
                                         "rc_layers",    "rc_channels", "seed",      "margin"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("phantom spec: unknown key '" + it.key() + "'");
    s.grid = j.value("grid", s.grid);
    s.landmarks = j.value("landmarks", s.landmarks);
    s.site_radius = j.value("site_radius", s.site_radius);
    s.site_jitter = j.value("site_jitter", s.site_jitter);
    s.deform_sigma = j.value("deform_sigma", s.deform_sigma);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    if (j.contains("contrast")) {
        const std::string c = j["contrast"].get<std::string>();
        if (c == "identity")
            s.contrast = ContrastFamily::kIdentity;
        else if (c == "gamma")
            s.contrast = ContrastFamily::kGamma;
        else if (c == "rc")
            s.contrast = ContrastFamily::kRc;
        else
            throw ConfigError("phantom spec: unknown contrast family '" + c + "'");
    }
    s.gamma = j.value("gamma", s.gamma);
    s.rc.layers = j.value("rc_layers", s.rc.layers);
    s.rc.channels = j.value("rc_channels", s.rc.channels);
    s.seed = j.value("seed", s.seed);
    s.margin = j.value("margin", s.margin);
    s.validate();
    return s;
}

}  // namespace

void spec_to_json_file(const PhantomSpec& spec, const std::string& path) {
    if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write spec: " + path);
    f << spec_to_json(spec).dump(2) << "\n";
}

PhantomSpec spec_from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("missing spec file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("bad spec file " + path + ": " + e.what());
    }
    return spec_from_json(j);
}

std::string make_cohort(const PhantomSpec& spec, int n_train, int n_test,
                        const std::string& out_dir) {
    if (n_train < 0 || n_test < 0 || n_train + n_test < 1)
        throw ConfigError("make_cohort: need at least one subject");
    fs::create_directories(out_dir);
    const Phantom tmpl = make_template(spec);
    save_volume(tmpl.volume, out_dir + "/template");
    save_landmarks(tmpl.landmarks, out_dir + "/template_landmarks.json");

    json manifest;
    manifest["spec"] = spec_to_json(spec);
    manifest["template"] = {{"volume", "template"}, {"landmarks", "template_landmarks.json"}};
    json train = json::array(), test = json::array();
    for (int i = 0; i < n_train + n_test; ++i) {
        const bool is_test = i >= n_train;
        const std::string id = (is_test ? "test_" : "train_") +
                               std::to_string(is_test ? i - n_train : i);
        const std::uint64_t sseed = Rng::derive(spec.seed, 1000 + static_cast<std::uint64_t>(i));
        const Phantom subj = make_subject(tmpl, spec, sseed);
        save_volume(subj.volume, out_dir + "/" + id);
        save_landmarks(subj.landmarks, out_dir + "/" + id + "_landmarks.json");
        json e;
        e["id"] = id;
        e["volume"] = id;
        e["landmarks"] = id + "_landmarks.json";
        e["seed"] = sseed;
        (is_test ? test : train).push_back(e);
    }
    manifest["train"] = train;
    manifest["test"] = test;
    const std::string mpath = out_dir + "/manifest.json";
    std::ofstream f(mpath);
    if (!f) throw DataError("cannot write manifest: " + mpath);
    f << manifest.dump(2) << "\n";
    return mpath;
}

CohortManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("missing manifest: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("bad manifest " + path + ": " + e.what());
    }
    CohortManifest m;
    try {
        m.spec = spec_from_json(j.at("spec"));
        m.dir = fs::path(path).parent_path().string();
        if (m.dir.empty()) m.dir = ".";
        m.template_stem = j.at("template").at("volume").get<std::string>();
        m.template_landmarks = j.at("template").at("landmarks").get<std::string>();
        auto parse = [](const json& arr) {
            std::vector<CohortEntry> out;
            for (const auto& e : arr)
                out.push_back({e.at("id").get<std::string>(), e.at("volume").get<std::string>(),
                               e.at("landmarks").get<std::string>(), e.at("seed").get<std::uint64_t>()});
            return out;
        };
        m.train = parse(j.at("train"));
        m.test = parse(j.at("test"));
    } catch (const json::exception& e) {
        throw DataError("bad manifest " + path + ": " + e.what());
    }
    return m;
}

}  // namespace cabld
