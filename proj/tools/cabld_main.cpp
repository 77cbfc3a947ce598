// cabld_main.cpp — command-line surface: phantom generation, training,
// inference, evaluation, TPS warping, augmentation preview, self-check.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "cabld/ad/grad_check.hpp"
#include "cabld/ad/graph.hpp"
#include "cabld/augment.hpp"
#include "cabld/errors.hpp"
#include "cabld/landmarks.hpp"
#include "cabld/losses.hpp"
#include "cabld/metrics.hpp"
#include "cabld/model.hpp"
#include "cabld/phantom.hpp"
#include "cabld/rng.hpp"
#include "cabld/tps.hpp"
#include "cabld/trainer.hpp"
#include "cabld/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cabld;

namespace {

void write_snapshot(const std::string& out_dir, const json& resolved) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir + "/resolved_config.json");
    if (!f) throw DataError("cannot write resolved config snapshot in " + out_dir);
    f << resolved.dump(2) << "\n";
}

std::vector<Volume3D> load_pool(const CohortManifest& m, const std::vector<CohortEntry>& split) {
    std::vector<Volume3D> pool;
    pool.reserve(split.size());
    for (const auto& e : split) pool.push_back(load_volume(m.dir + "/" + e.volume_stem));
    return pool;
}

int cmd_phantom(const std::string& spec_path, int n_train, int n_test,
                const std::string& out_dir, std::int64_t seed_override) {
    PhantomSpec spec = spec_path.empty() ? PhantomSpec{} : spec_from_json_file(spec_path);
    if (seed_override >= 0) spec.seed = static_cast<std::uint64_t>(seed_override);
    spec.validate();
    const std::string manifest = make_cohort(spec, n_train, n_test, out_dir);
    json snap;
    snap["command"] = "phantom";
    snap["spec_file"] = spec_path;
    snap["n_train"] = n_train;
    snap["n_test"] = n_test;
    snap["manifest"] = manifest;
    spec_to_json_file(spec, out_dir + "/resolved_spec.json");
    write_snapshot(out_dir, snap);
    std::cout << "wrote " << manifest << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, const std::string& resume_stem,
              std::int64_t seed_override) {
    const CohortManifest m = load_manifest(manifest_path);
    Volume3D tmpl = load_volume(m.dir + "/" + m.template_stem);
    LandmarkSet pt = load_landmarks(m.dir + "/" + m.template_landmarks);
    std::vector<Volume3D> pool = load_pool(m, m.train);

    json snap;
    snap["command"] = "train";
    snap["manifest"] = manifest_path;
    snap["config_file"] = config_path;
    snap["resume"] = resume_stem;

    if (!resume_stem.empty()) {
        Trainer t = Trainer::resume(resume_stem, std::move(tmpl), std::move(pt), std::move(pool));
        train_config_to_json_file(t.config(), out_dir + "/resolved_train_config.json");
        write_snapshot(out_dir, snap);
        t.run(out_dir);
        std::cout << "trained to step " << t.steps_done() << ", checkpoints in " << out_dir << "\n";
        return 0;
    }
    TrainConfig cfg = train_config_from_json_file(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    Trainer t(cfg, std::move(tmpl), std::move(pt), std::move(pool));
    train_config_to_json_file(t.config(), out_dir + "/resolved_train_config.json");
    write_snapshot(out_dir, snap);
    t.run(out_dir);
    std::cout << "trained " << t.total_steps() << " steps, checkpoints in " << out_dir << "\n";
    return 0;
}

int cmd_infer(const std::string& ckpt_stem, const std::vector<std::string>& volumes,
              const std::string& out_dir) {
    const DetectorParams params = read_checkpoint_params(ckpt_stem);
    fs::create_directories(out_dir);
    json snap;
    snap["command"] = "infer";
    snap["checkpoint"] = ckpt_stem;
    snap["volumes"] = volumes;
    write_snapshot(out_dir, snap);
    for (const auto& vp : volumes) {
        const Volume3D v = load_volume(vp);
        const LandmarkSet lm = infer(params, v);
        const std::string name = fs::path(vp).stem().string();
        save_landmarks(lm, out_dir + "/" + name + "_pred.json");
    }
    std::cout << "wrote " << volumes.size() << " prediction files to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::vector<double>& thresholds, const std::string& out_dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(pred_dir))
        if (e.path().extension() == ".json") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw DataError("no prediction files in " + pred_dir);
    std::vector<LandmarkSet> pred, gt;
    for (const auto& n : names) {
        const std::string gtp = gt_dir + "/" + n;
        if (!fs::exists(gtp)) throw DataError("no matching ground truth for " + n);
        pred.push_back(load_landmarks(pred_dir + "/" + n));
        gt.push_back(load_landmarks(gtp));
    }
    const EvalReport r = report(pred, gt, thresholds);
    save_report_json(r, out_dir + "/report.json");
    save_report_csv(r, out_dir + "/report.csv");
    json snap;
    snap["command"] = "eval";
    snap["pred_dir"] = pred_dir;
    snap["gt_dir"] = gt_dir;
    snap["thresholds"] = thresholds;
    snap["files"] = names;
    write_snapshot(out_dir, snap);
    std::cout << "MRE " << r.mre_mean << " +- " << r.mre_std << " mm";
    for (std::size_t i = 0; i < thresholds.size(); ++i)
        std::cout << "  SDR(" << thresholds[i] << "mm) " << r.sdr[i] << "%";
    std::cout << "\n";
    return 0;
}

int cmd_warp(const std::string& src_path, const std::string& tgt_path, double lambda,
             const std::string& volume_path, const std::string& out_dir) {
    const LandmarkSet src = load_landmarks(src_path);
    const LandmarkSet tgt = load_landmarks(tgt_path);
    const TpsTransform t = fit_tps(src, tgt, lambda);
    fs::create_directories(out_dir);
    save_tps(t, out_dir + "/tps.json");
    json snap;
    snap["command"] = "warp";
    snap["source"] = src_path;
    snap["target"] = tgt_path;
    snap["lambda"] = lambda;
    snap["volume"] = volume_path;
    write_snapshot(out_dir, snap);
    if (!volume_path.empty()) {
        // move features source -> target: pull-back resampling with the
        // swapped fit (target -> source)
        const Volume3D v = load_volume(volume_path);
        const TpsTransform back = fit_tps(tgt, src, lambda);
        const DeformationField f = dense_field(back, v.shape, v.spacing, v.origin);
        save_volume(resample_by_field(v, f, v.shape, v.spacing, v.origin), out_dir + "/warped");
    }
    std::cout << "wrote " << out_dir << "/tps.json\n";
    return 0;
}

int cmd_augment_preview(const std::string& volume_path, const std::string& rc_cfg_path,
                        const std::string& affine_cfg_path, std::uint64_t seed,
                        const std::string& out_dir) {
    const Volume3D v = load_volume(volume_path);
    fs::create_directories(out_dir);
    json snap;
    snap["command"] = "augment-preview";
    snap["volume"] = volume_path;
    snap["seed"] = seed;
    if (!rc_cfg_path.empty()) {
        std::ifstream f(rc_cfg_path);
        if (!f) throw DataError("missing rc config: " + rc_cfg_path);
        json j;
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw DataError("bad rc config: " + std::string(e.what()));
        }
        RcConfig rc;
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string k = it.key();
            if (k == "layers") rc.layers = it.value().get<int>();
            else if (k == "weight_lo") rc.weight_lo = it.value().get<double>();
            else if (k == "weight_hi") rc.weight_hi = it.value().get<double>();
            else if (k == "slope") rc.slope = it.value().get<double>();
            else if (k == "kernel") rc.kernel = it.value().get<int>();
            else if (k == "channels") rc.channels = it.value().get<int>();
            else throw ConfigError("rc config: unknown key '" + k + "'");
        }
        rc.validate();
        save_volume(rc_augment(v, rc, seed), out_dir + "/augmented");
        snap["rc_config"] = rc_cfg_path;
    } else {
        AffineRanges r;
        if (!affine_cfg_path.empty()) {
            std::ifstream f(affine_cfg_path);
            if (!f) throw DataError("missing affine config: " + affine_cfg_path);
            json j;
            try {
                f >> j;
            } catch (const json::exception& e) {
                throw DataError("bad affine config: " + std::string(e.what()));
            }
            for (auto it = j.begin(); it != j.end(); ++it) {
                const std::string k = it.key();
                if (k == "rot_deg") r.rot_deg = it.value().get<double>();
                else if (k == "trans_vox") r.trans_vox = it.value().get<double>();
                else if (k == "scale_lo") r.scale_lo = it.value().get<double>();
                else if (k == "scale_hi") r.scale_hi = it.value().get<double>();
                else if (k == "shear") r.shear = it.value().get<double>();
                else throw ConfigError("affine config: unknown key '" + k + "'");
            }
        }
        Rng rng(seed);
        const AffineAug aug = sample_affine(r, v, rng);
        save_volume(apply_affine(v, aug), out_dir + "/augmented");
        snap["affine_config"] = affine_cfg_path;
    }
    write_snapshot(out_dir, snap);
    std::cout << "wrote " << out_dir << "/augmented.f32raw\n";
    return 0;
}

// compact oracle suites; exercised in depth by the test suite, surfaced here
// as a user-facing sanity gate
int cmd_selfcheck() {
    int failures = 0;
    auto line = [&failures](const std::string& name, bool ok, const std::string& detail) {
        std::cout << (ok ? "PASS" : "FAIL") << "  " << name;
        if (!detail.empty()) std::cout << "  (" << detail << ")";
        std::cout << "\n";
        if (!ok) ++failures;
    };
    Rng rng(2024);

    {  // gradient oracles on every differentiable op family
        double worst = 0.0;
        worst = std::max(worst, ad::grad_check(
                                    [](ad::Graph& g, ad::Tensor x) {
                                        auto w = g.constant({2, 1, 3, 3, 3},
                                                            [] {
                                                                Rng r(7);
                                                                std::vector<double> v(54);
                                                                for (auto& q : v) q = r.normal(0, 0.3);
                                                                return v;
                                                            }());
                                        auto y = ad::conv3d(ad::reshape(x, {1, 6, 6, 6}), w, 1);
                                        auto sc = g.constant({2}, {1.1, 0.9});
                                        auto sh = g.constant({2}, {0.0, 0.2});
                                        auto n = ad::instance_norm(y, sc, sh);
                                        auto p = ad::max_pool3d(n);
                                        return ad::reduce_mean(ad::mul(p, p));
                                    },
                                    {216},
                                    [&rng] {
                                        std::vector<double> v(216);
                                        for (auto& q : v) q = rng.uniform(0, 1);
                                        return v;
                                    }()));
        line("gradient: conv3d/instance_norm/max_pool composite vs finite differences",
             worst < 1e-4, "max rel err " + std::to_string(worst));
    }
    {  // TPS oracle: interpolation + affine limit + constraints
        bool ok_interp = true, ok_constr = true;
        double worst = 0;
        for (int t = 0; t < 10; ++t) {
            LandmarkSet s, y;
            for (int i = 0; i < 8; ++i) {
                s.points.push_back({rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 32)});
                y.points.push_back({rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 32)});
            }
            const TpsTransform f = fit_tps(s, y, 0.0);
            for (int j = 0; j < 8; ++j) {
                const Vec3 got = eval_tps(f, s.points[static_cast<std::size_t>(j)]);
                for (int a = 0; a < 3; ++a)
                    worst = std::max(worst,
                                     std::abs(got[a] - y.points[static_cast<std::size_t>(j)][a]));
            }
            ok_constr = ok_constr && f.V.colwise().sum().norm() < 1e-8 * std::max(1.0, f.V.norm());
        }
        ok_interp = worst < 1e-6;
        line("tps: lambda=0 interpolation residual < 1e-6", ok_interp,
             "max " + std::to_string(worst));
        line("tps: constraint residuals < 1e-8 relative", ok_constr, "");
    }
    {  // loss oracle: alpha values from the curriculum formula
        const bool ok = std::abs(alpha(0.0)) == 0.0 &&
                        std::abs(alpha(0.5) - 0.8482836399575129) < 1e-6 &&
                        std::abs(alpha(1.0) - 0.9866142981514303) < 1e-6;
        line("losses: curriculum weight alpha(0)=0, alpha(0.5), alpha(1)", ok, "");
    }
    {  // losses equal a naive-loop oracle on a random tiny batch
        PhantomSpec spec;
        spec.grid = 16;
        spec.landmarks = 4;
        spec.site_radius = 0.25;
        spec.site_jitter = 0.5;
        spec.deform_sigma = 0.8;
        spec.noise_sigma = 0.0;
        spec.seed = 3;
        spec.margin = 2.0;
        const Phantom tmpl = make_template(spec);
        const Phantom s1 = make_subject(tmpl, spec, 21);
        const Phantom s2 = make_subject(tmpl, spec, 22);
        std::vector<LandmarkSet> preds{s1.landmarks, s2.landmarks};
        const LossValues v = compute_losses(preds, {&s1.volume, &s2.volume}, tmpl.volume,
                                            tmpl.landmarks, 0.5, 0.25);
        // naive registration: mean over subjects of per-voxel squared error
        double reg = 0.0;
        for (const Phantom* s : {&s1, &s2}) {
            const TpsTransform rev = fit_tps(tmpl.landmarks, s->landmarks, 0.5);
            double acc = 0.0;
            for (int k = 0; k < 16; ++k)
                for (int j = 0; j < 16; ++j)
                    for (int i = 0; i < 16; ++i) {
                        const Vec3 q = eval_tps(rev, {double(i), double(j), double(k)});
                        const double w = sample_trilinear(s->volume, q);
                        const double d = w - tmpl.volume.at(i, j, k);
                        acc += d * d;
                    }
            reg += acc / (16.0 * 16.0 * 16.0);
        }
        reg /= 2.0;
        const bool ok = std::abs(reg - v.registration) < 1e-12;
        line("losses: registration equals the naive per-voxel loop to 1e-12", ok,
             "diff " + std::to_string(std::abs(reg - v.registration)));
    }
    if (failures == 0) {
        std::cout << "selfcheck: all suites passed\n";
        return 0;
    }
    std::cout << "selfcheck: " << failures << " suite(s) failed\n";
    return 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cabld — self-supervised 3D landmark detection on synthetic phantoms"};
    app.require_subcommand(1);

    // phantom
    auto* ph = app.add_subcommand("phantom", "generate a synthetic cohort");
    std::string ph_spec, ph_out = "phantom_out";
    int ph_train = 8, ph_test = 2;
    std::int64_t ph_seed = -1;
    ph->add_option("--spec", ph_spec, "phantom spec JSON (defaults when omitted)");
    ph->add_option("--train", ph_train, "training subjects");
    ph->add_option("--test", ph_test, "held-out subjects");
    ph->add_option("--out", ph_out, "output directory")->required();
    ph->add_option("--seed", ph_seed, "seed override");

    // train
    auto* tr = app.add_subcommand("train", "train the detector");
    std::string tr_cfg, tr_manifest, tr_out = "train_out", tr_resume;
    std::int64_t tr_seed = -1;
    tr->add_option("--config", tr_cfg, "train config JSON");
    tr->add_option("--manifest", tr_manifest, "cohort manifest")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint stem to resume from");
    tr->add_option("--seed", tr_seed, "seed override");

    // infer
    auto* in = app.add_subcommand("infer", "predict landmarks for volumes");
    std::string in_ckpt, in_out = "infer_out";
    std::vector<std::string> in_vols;
    in->add_option("--checkpoint", in_ckpt, "checkpoint stem")->required();
    in->add_option("--volume", in_vols, "volume stem(s)")->required();
    in->add_option("--out", in_out, "output directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    std::string ev_pred, ev_gt, ev_out = "eval_out";
    std::vector<double> ev_taus{3.0, 6.0, 9.0};
    ev->add_option("--pred-dir", ev_pred, "directory of prediction JSONs")->required();
    ev->add_option("--gt-dir", ev_gt, "directory of ground-truth JSONs")->required();
    ev->add_option("--thresholds", ev_taus, "SDR thresholds (mm)");
    ev->add_option("--out", ev_out, "output directory")->required();

    // warp
    auto* wp = app.add_subcommand("warp", "fit a TPS between landmark sets");
    std::string wp_src, wp_tgt, wp_vol, wp_out = "warp_out";
    double wp_lambda = 0.0;
    wp->add_option("--source", wp_src, "source landmark JSON")->required();
    wp->add_option("--target", wp_tgt, "target landmark JSON")->required();
    wp->add_option("--lambda", wp_lambda, "regularization weight");
    wp->add_option("--volume", wp_vol, "optional volume to carry along");
    wp->add_option("--out", wp_out, "output directory")->required();

    // augment-preview
    auto* au = app.add_subcommand("augment-preview", "emit an augmented volume");
    std::string au_vol, au_rc, au_aff, au_out = "augment_out";
    std::uint64_t au_seed = 0;
    au->add_option("--volume", au_vol, "volume stem")->required();
    au->add_option("--rc-config", au_rc, "random-convolution config JSON");
    au->add_option("--affine-config", au_aff, "affine ranges JSON");
    au->add_option("--seed", au_seed, "seed");
    au->add_option("--out", au_out, "output directory")->required();

    // selfcheck
    app.add_subcommand("selfcheck", "run the built-in oracle suites");

    try {
        app.parse(argc, argv);
        if (ph->parsed()) return cmd_phantom(ph_spec, ph_train, ph_test, ph_out, ph_seed);
        if (tr->parsed()) return cmd_train(tr_cfg, tr_manifest, tr_out, tr_resume, tr_seed);
        if (in->parsed()) return cmd_infer(in_ckpt, in_vols, in_out);
        if (ev->parsed()) return cmd_eval(ev_pred, ev_gt, ev_taus, ev_out);
        if (wp->parsed()) return cmd_warp(wp_src, wp_tgt, wp_lambda, wp_vol, wp_out);
        if (au->parsed()) return cmd_augment_preview(au_vol, au_rc, au_aff, au_seed, au_out);
        return cmd_selfcheck();
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0;  // --help
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "error: numerical: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 4;
    }
}
