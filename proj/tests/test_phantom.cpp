// test_phantom.cpp — synthetic cohort generation.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cabld/errors.hpp"
#include "cabld/phantom.hpp"

using namespace cabld;
namespace fs = std::filesystem;

namespace {
PhantomSpec small_spec() {
    PhantomSpec s;
    s.grid = 32;
    s.landmarks = 6;
    s.deform_sigma = 1.5;
    s.noise_sigma = 0.0;
    s.seed = 11;
    return s;
}

Vec3 blob_centroid(const Volume3D& v, const Vec3& near, double radius) {
    double wx = 0, wy = 0, wz = 0, wsum = 0;
    for (int k = 0; k < v.shape[2]; ++k)
        for (int j = 0; j < v.shape[1]; ++j)
            for (int i = 0; i < v.shape[0]; ++i) {
                const Vec3 p = v.world(i, j, k);
                const double d2 = std::pow(p[0] - near[0], 2) + std::pow(p[1] - near[1], 2) +
                                  std::pow(p[2] - near[2], 2);
                if (d2 > radius * radius) continue;
                const double w = v.at(i, j, k);
                wx += w * p[0];
                wy += w * p[1];
                wz += w * p[2];
                wsum += w;
            }
    return {wx / wsum, wy / wsum, wz / wsum};
}
}  // namespace

TEST_CASE("single-blob template has its landmark at the blob center") {
    PhantomSpec s = small_spec();
    s.landmarks = 1;
    const Phantom ph = make_template(s);
    REQUIRE(ph.landmarks.count() == 1);
    // ground truth is the analytic site by construction
    int bi = 0, bj = 0, bk = 0;
    float best = -1;
    for (int k = 0; k < s.grid; ++k)
        for (int j = 0; j < s.grid; ++j)
            for (int i = 0; i < s.grid; ++i)
                if (ph.volume.at(i, j, k) > best) {
                    best = ph.volume.at(i, j, k);
                    bi = i;
                    bj = j;
                    bk = k;
                }
    const Vec3 lm = ph.landmarks.points[0];
    CHECK(std::abs(bi - lm[0]) <= 1.0);
    CHECK(std::abs(bj - lm[1]) <= 1.0);
    CHECK(std::abs(bk - lm[2]) <= 1.0);
}

TEST_CASE("template generation is deterministic and in range") {
    const PhantomSpec s = small_spec();
    const Phantom a = make_template(s);
    const Phantom b = make_template(s);
    for (std::size_t i = 0; i < a.volume.data.size(); ++i)
        CHECK(a.volume.data[i] == b.volume.data[i]);
    for (float f : a.volume.data) {
        CHECK(f >= 0.0f);
        CHECK(f <= 1.0f);
    }
    for (int i = 0; i < a.landmarks.count(); ++i)
        for (int c = 0; c < 3; ++c)
            CHECK(a.landmarks.points[static_cast<std::size_t>(i)][c] ==
                  b.landmarks.points[static_cast<std::size_t>(i)][c]);
}

TEST_CASE("zero deformation / identity contrast / zero noise copies the template") {
    PhantomSpec s = small_spec();
    s.deform_sigma = 0.0;
    const Phantom tmpl = make_template(s);
    const Phantom subj = make_subject(tmpl, s, 1234);
    for (std::size_t i = 0; i < tmpl.volume.data.size(); ++i)
        CHECK(subj.volume.data[i] == tmpl.volume.data[i]);
    for (int i = 0; i < tmpl.landmarks.count(); ++i)
        for (int c = 0; c < 3; ++c)
            CHECK(subj.landmarks.points[static_cast<std::size_t>(i)][c] ==
                  tmpl.landmarks.points[static_cast<std::size_t>(i)][c]);
}

TEST_CASE("pure translation deformation shifts landmarks exactly") {
    PhantomSpec s = small_spec();
    const Phantom tmpl = make_template(s);
    LandmarkSet src, dst;
    // corner anchors + the landmark sites, all translated by (2, 0, 0)
    for (double x : {4.0, 27.0})
        for (double y : {4.0, 27.0})
            for (double z : {4.0, 27.0}) src.points.push_back({x, y, z});
    for (const auto& p : tmpl.landmarks.points) src.points.push_back(p);
    for (const auto& p : src.points) dst.points.push_back({p[0] + 2.0, p[1], p[2]});
    const Phantom subj = deform_phantom(tmpl, src, dst, tmpl.landmarks.count());
    for (int i = 0; i < tmpl.landmarks.count(); ++i) {
        CHECK(subj.landmarks.points[static_cast<std::size_t>(i)][0] ==
              doctest::Approx(tmpl.landmarks.points[static_cast<std::size_t>(i)][0] + 2.0)
                  .epsilon(1e-9));
        CHECK(subj.landmarks.points[static_cast<std::size_t>(i)][1] ==
              doctest::Approx(tmpl.landmarks.points[static_cast<std::size_t>(i)][1]).epsilon(1e-9));
    }
    // warped blob centroid tracks the translated landmark to sub-voxel accuracy
    const Vec3 c0 =
        blob_centroid(tmpl.volume, tmpl.landmarks.points[0], 4.0);
    const Vec3 c1 = blob_centroid(subj.volume, subj.landmarks.points[0], 4.0);
    CHECK(std::abs(c1[0] - c0[0] - 2.0) < 0.2);
    CHECK(std::abs(c1[1] - c0[1]) < 0.2);
    CHECK(std::abs(c1[2] - c0[2]) < 0.2);
}

TEST_CASE("random subject: warped blob centroid agrees with the analytic landmark") {
    PhantomSpec s = small_spec();
    s.deform_sigma = 1.2;
    const Phantom tmpl = make_template(s);
    const Phantom subj = make_subject(tmpl, s, 777);
    // brightest blob (index 0 has the largest amplitude, sigma 1.8)
    const Vec3 lm = subj.landmarks.points[0];
    const Vec3 c = blob_centroid(subj.volume, lm, 3.5);
    const double err =
        std::sqrt(std::pow(c[0] - lm[0], 2) + std::pow(c[1] - lm[1], 2) + std::pow(c[2] - lm[2], 2));
    CHECK(err < 0.5);
}

TEST_CASE("same seed reproduces a subject; different contrast keeps geometry") {
    PhantomSpec s = small_spec();
    s.noise_sigma = 0.01;
    const Phantom tmpl = make_template(s);
    const Phantom a = make_subject(tmpl, s, 99);
    const Phantom b = make_subject(tmpl, s, 99);
    for (std::size_t i = 0; i < a.volume.data.size(); ++i)
        CHECK(a.volume.data[i] == b.volume.data[i]);
    PhantomSpec sg = s;
    sg.contrast = ContrastFamily::kGamma;
    sg.gamma = 2.0;
    const Phantom g = make_subject(tmpl, sg, 99);
    for (int i = 0; i < a.landmarks.count(); ++i)
        for (int c = 0; c < 3; ++c)
            CHECK(g.landmarks.points[static_cast<std::size_t>(i)][c] ==
                  a.landmarks.points[static_cast<std::size_t>(i)][c]);
}

TEST_CASE("gamma contrast moves intensities but stays in range") {
    PhantomSpec s = small_spec();
    s.deform_sigma = 0.0;
    s.contrast = ContrastFamily::kGamma;
    s.gamma = 0.5;
    const Phantom tmpl = make_template(s);
    const Phantom subj = make_subject(tmpl, s, 5);
    bool any_diff = false;
    for (std::size_t i = 0; i < subj.volume.data.size(); ++i) {
        CHECK(subj.volume.data[i] >= 0.0f);
        CHECK(subj.volume.data[i] <= 1.0f);
        any_diff |= subj.volume.data[i] != tmpl.volume.data[i];
    }
    CHECK(any_diff);
}

TEST_CASE("cohort manifest lists splits and regenerates bit-identically") {
    const auto dir = (fs::temp_directory_path() / "cabld_test_cohort").string();
    fs::remove_all(dir);
    PhantomSpec s = small_spec();
    const std::string mpath = make_cohort(s, 3, 2, dir);
    const CohortManifest m = load_manifest(mpath);
    CHECK(m.train.size() == 3);
    CHECK(m.test.size() == 2);
    for (const auto& tr : m.train)
        for (const auto& te : m.test) CHECK(tr.id != te.id);
    // regenerate one subject from its manifest seed
    const Phantom tmpl = make_template(m.spec);
    const Phantom again = make_subject(tmpl, m.spec, m.train[1].seed);
    const Volume3D from_disk = load_volume(m.dir + "/" + m.train[1].volume_stem);
    REQUIRE(from_disk.data.size() == again.volume.data.size());
    for (std::size_t i = 0; i < from_disk.data.size(); ++i)
        CHECK(from_disk.data[i] == again.volume.data[i]);
    const LandmarkSet lm_disk = load_landmarks(m.dir + "/" + m.train[1].landmark_file);
    for (int i = 0; i < lm_disk.count(); ++i)
        for (int c = 0; c < 3; ++c)
            CHECK(lm_disk.points[static_cast<std::size_t>(i)][c] ==
                  doctest::Approx(again.landmarks.points[static_cast<std::size_t>(i)][c])
                      .epsilon(1e-12));
}

TEST_CASE("infeasible spec is rejected") {
    PhantomSpec s = small_spec();
    s.site_radius = 0.44;
    s.site_jitter = 4.0;  // sites cannot respect the margin
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.landmarks = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}
