// trainer.cpp — training loop, Adam, checkpointing, config IO.

#include "cabld/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "cabld/errors.hpp"
#include "cabld/losses.hpp"

namespace cabld {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    if (subjects_per_step < 2) throw ConfigError("train: M must be >= 2");
    if (epochs < 1 && total_steps < 1) throw ConfigError("train: set epochs or total_steps");
    if (!(lr_min < lr_init)) throw ConfigError("train: lr_min must be < lr_init");
    if (!(lambda_lo > 0.0 && lambda_hi >= lambda_lo)) throw ConfigError("train: bad lambda range");
    if (checkpoint_every < 0) throw ConfigError("train: bad checkpoint cadence");
    rc.validate();
    detector.validate();
}

int TrainConfig::resolved_steps(int pool_size) const {
    if (total_steps > 0) return total_steps;
    const int per_epoch = (pool_size + subjects_per_step - 1) / subjects_per_step;
    return epochs * per_epoch;
}

// ------------------------------------------------------------ config JSON

namespace {

json config_to_json(const TrainConfig& c) {
    json j;
    j["subjects_per_step"] = c.subjects_per_step;
    j["epochs"] = c.epochs;
    j["total_steps"] = c.total_steps;
    j["lr_init"] = c.lr_init;
    j["lr_min"] = c.lr_min;
    j["lambda_lo"] = c.lambda_lo;
    j["lambda_hi"] = c.lambda_hi;
    j["rc_enabled"] = c.rc_enabled;
    j["rc"] = {{"layers", c.rc.layers},   {"weight_lo", c.rc.weight_lo},
               {"weight_hi", c.rc.weight_hi}, {"slope", c.rc.slope},
               {"kernel", c.rc.kernel},   {"channels", c.rc.channels}};
    j["affine_enabled"] = c.affine_enabled;
    j["affine"] = {{"rot_deg", c.affine.rot_deg},
                   {"trans_vox", c.affine.trans_vox},
                   {"scale_lo", c.affine.scale_lo},
                   {"scale_hi", c.affine.scale_hi},
                   {"shear", c.affine.shear}};
    j["consistency_enabled"] = c.consistency_enabled;
    json blocks = json::array();
    for (const auto& b : c.detector.blocks) blocks.push_back({{"channels", b.channels}, {"pool", b.pool}});
    j["detector"] = {{"blocks", blocks},
                     {"landmarks", c.detector.landmarks},
                     {"input_shape", c.detector.input_shape},
                     {"final_gain", c.detector.final_gain}};
    j["seed"] = c.seed;
    j["checkpoint_every"] = c.checkpoint_every;
    j["verbose"] = c.verbose;
    return j;
}

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& ctx) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError(ctx + ": unknown key '" + it.key() + "'");
}

TrainConfig config_from_json(const json& j) {
    TrainConfig c;
    reject_unknown(j,
                   {"subjects_per_step", "epochs", "total_steps", "lr_init", "lr_min",
                    "lambda_lo", "lambda_hi", "rc_enabled", "rc", "affine_enabled", "affine",
                    "consistency_enabled", "detector", "seed", "checkpoint_every", "verbose"},
                   "train config");
    c.subjects_per_step = j.value("subjects_per_step", c.subjects_per_step);
    c.epochs = j.value("epochs", c.epochs);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.lambda_lo = j.value("lambda_lo", c.lambda_lo);
    c.lambda_hi = j.value("lambda_hi", c.lambda_hi);
    c.rc_enabled = j.value("rc_enabled", c.rc_enabled);
    if (j.contains("rc")) {
        const json& r = j["rc"];
        reject_unknown(r, {"layers", "weight_lo", "weight_hi", "slope", "kernel", "channels"},
                       "rc config");
        c.rc.layers = r.value("layers", c.rc.layers);
        c.rc.weight_lo = r.value("weight_lo", c.rc.weight_lo);
        c.rc.weight_hi = r.value("weight_hi", c.rc.weight_hi);
        c.rc.slope = r.value("slope", c.rc.slope);
        c.rc.kernel = r.value("kernel", c.rc.kernel);
        c.rc.channels = r.value("channels", c.rc.channels);
    }
    c.affine_enabled = j.value("affine_enabled", c.affine_enabled);
    if (j.contains("affine")) {
        const json& a = j["affine"];
        reject_unknown(a, {"rot_deg", "trans_vox", "scale_lo", "scale_hi", "shear"},
                       "affine config");
        c.affine.rot_deg = a.value("rot_deg", c.affine.rot_deg);
        c.affine.trans_vox = a.value("trans_vox", c.affine.trans_vox);
        c.affine.scale_lo = a.value("scale_lo", c.affine.scale_lo);
        c.affine.scale_hi = a.value("scale_hi", c.affine.scale_hi);
        c.affine.shear = a.value("shear", c.affine.shear);
    }
    c.consistency_enabled = j.value("consistency_enabled", c.consistency_enabled);
    if (j.contains("detector")) {
        const json& d = j["detector"];
        reject_unknown(d, {"blocks", "landmarks", "input_shape", "final_gain"}, "detector config");
        if (d.contains("blocks")) {
            c.detector.blocks.clear();
            for (const auto& b : d["blocks"]) {
                reject_unknown(b, {"channels", "pool"}, "detector block");
                c.detector.blocks.push_back(
                    {b.value("channels", 16), b.value("pool", false)});
            }
        }
        c.detector.landmarks = d.value("landmarks", c.detector.landmarks);
        if (d.contains("input_shape"))
            for (int a = 0; a < 3; ++a) c.detector.input_shape[a] = d["input_shape"].at(a).get<int>();
        c.detector.final_gain = d.value("final_gain", c.detector.final_gain);
    }
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.verbose = j.value("verbose", c.verbose);
    c.validate();
    return c;
}

}  // namespace

TrainConfig train_config_from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("missing train config: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("bad train config " + path + ": " + e.what());
    }
    return config_from_json(j);
}

void train_config_to_json_file(const TrainConfig& cfg, const std::string& path) {
    if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write train config: " + path);
    f << config_to_json(cfg).dump(2) << "\n";
}

// ------------------------------------------------------------------ Trainer

Trainer::Trainer(TrainConfig cfg, Volume3D tmpl, LandmarkSet template_landmarks,
                 std::vector<Volume3D> pool)
    : cfg_(std::move(cfg)),
      tmpl_(std::move(tmpl)),
      template_landmarks_(std::move(template_landmarks)),
      pool_(std::move(pool)),
      rng_(cfg_.seed) {
    cfg_.validate();
    tmpl_.validate();
    template_landmarks_.validate();
    if (template_landmarks_.count() != cfg_.detector.landmarks)
        throw ConfigError("trainer: template landmark count != detector landmarks");
    if (static_cast<int>(pool_.size()) < cfg_.subjects_per_step)
        throw ConfigError("trainer: pool smaller than batch size M");
    if (tmpl_.shape != cfg_.detector.input_shape)
        throw ConfigError("trainer: template shape != detector input shape");
    total_steps_ = cfg_.resolved_steps(static_cast<int>(pool_.size()));
    params_ = init_params(cfg_.detector, cfg_.seed);
    adam_m_.resize(params_.tensors.size());
    adam_v_.resize(params_.tensors.size());
    for (std::size_t i = 0; i < params_.tensors.size(); ++i) {
        adam_m_[i].assign(params_.tensors[i].size(), 0.0);
        adam_v_[i].assign(params_.tensors[i].size(), 0.0);
    }
    init_caches();
}

void Trainer::init_caches() {
    grid_kernel_ =
        ad::make_grid_kernel(template_landmarks_, tmpl_.shape, tmpl_.spacing, tmpl_.origin);
}

StepRecord Trainer::step() {
    if (steps_done_ >= total_steps_) throw ConfigError("trainer: all steps already run");
    const int s = steps_done_;
    const double eta = total_steps_ > 1 ? static_cast<double>(s) / (total_steps_ - 1) : 0.0;
    const double lr = cfg_.lr_min + 0.5 * (cfg_.lr_init - cfg_.lr_min) * (1.0 + std::cos(M_PI * eta));
    StepRecord rec;
    rec.step = s;
    rec.eta = eta;
    rec.alpha = alpha(eta);
    rec.lr = lr;

    const int m = cfg_.subjects_per_step;
    std::vector<double> pvec;
    for (const auto& p : template_landmarks_.points) pvec.insert(pvec.end(), p.begin(), p.end());

    constexpr int kMaxAttempts = 5;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        // batch draws happen before any fallible work so a retry advances them
        std::vector<int> idx;
        {
            std::vector<int> all(pool_.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
            for (int k = 0; k < m; ++k) {
                const std::size_t pick =
                    k + static_cast<std::size_t>(rng_.randint(all.size() - static_cast<std::size_t>(k)));
                std::swap(all[static_cast<std::size_t>(k)], all[pick]);
                idx.push_back(all[static_cast<std::size_t>(k)]);
            }
        }
        const double lam = rng_.log_uniform(cfg_.lambda_lo, cfg_.lambda_hi);

        try {
            ad::Graph g;
            auto pnodes = make_param_nodes(g, params_);
            ad::Tensor pt = g.constant({template_landmarks_.count(), 3}, pvec);
            std::vector<SubjectNodes> subjects;
            for (int k = 0; k < m; ++k) {
                Volume3D vol = pool_[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
                if (cfg_.affine_enabled) {
                    const AffineAug aug = sample_affine(cfg_.affine, vol, rng_);
                    vol = apply_affine(vol, aug);
                }
                auto pre_rc = std::make_shared<const Volume3D>(vol);
                const Volume3D det_in =
                    cfg_.rc_enabled ? rc_augment(vol, cfg_.rc, rng_.raw()) : vol;
                const auto fwd = detector_forward_graph(g, cfg_.detector, pnodes, det_in);
                SubjectNodes sn;
                sn.pred = fwd.pred;
                sn.pre_rc = pre_rc;
                sn.fwd = ad::tps_fit_graph(g, fwd.pred, pt, lam);
                sn.rev = ad::tps_fit_graph(g, pt, fwd.pred, lam);
                subjects.push_back(std::move(sn));
            }
            const LossNodes losses = build_losses(g, subjects, tmpl_, grid_kernel_, pt, eta,
                                                  cfg_.consistency_enabled);
            g.backward(losses.total);

            adam_t_ += 1;
            const double b1 = 0.9, b2 = 0.999, aeps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam_t_));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam_t_));
            for (std::size_t i = 0; i < params_.tensors.size(); ++i) {
                const auto& gv = g.node(pnodes[i].id).grad;
                auto& pv = params_.tensors[i];
                auto& mv = adam_m_[i];
                auto& vv = adam_v_[i];
                for (std::size_t q = 0; q < pv.size(); ++q) {
                    const double gq = gv.empty() ? 0.0 : gv[q];
                    mv[q] = b1 * mv[q] + (1.0 - b1) * gq;
                    vv[q] = b2 * vv[q] + (1.0 - b2) * gq * gq;
                    pv[q] -= lr * (mv[q] / bc1) / (std::sqrt(vv[q] / bc2) + aeps);
                }
            }

            rec.lambda = lam;
            rec.registration = losses.registration.scalar();
            if (cfg_.consistency_enabled) {
                rec.consistency1 = losses.consistency1.scalar();
                rec.consistency2 = losses.consistency2.scalar();
            }
            rec.total = losses.total.scalar();
            rec.updated = true;
            ++steps_done_;
            log_.push_back(rec);
            return rec;
        } catch (const SingularSystem&) {
            ++rec.retries;  // skip and resample
        }
    }
    // no usable batch found: advance without an update
    rec.lambda = 0.0;
    ++steps_done_;
    log_.push_back(rec);
    return rec;
}

void Trainer::run(const std::string& out_dir) {
    std::ofstream csv;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const std::string path = out_dir + "/loss_log.csv";
        const bool fresh = !fs::exists(path) || steps_done_ == 0;
        csv.open(path, fresh ? std::ios::trunc : std::ios::app);
        if (!csv) throw DataError("cannot write loss log: " + path);
        if (fresh)
            csv << "step,eta,alpha,lr,lambda,registration,consistency1,consistency2,total,"
                   "retries,updated\n";
    }
    const int print_every = std::max(1, total_steps_ / 20);
    while (steps_done_ < total_steps_) {
        const StepRecord r = step();
        if (csv.is_open()) {
            csv << r.step << "," << r.eta << "," << r.alpha << "," << r.lr << "," << r.lambda
                << "," << r.registration << "," << r.consistency1 << "," << r.consistency2 << ","
                << r.total << "," << r.retries << "," << (r.updated ? 1 : 0) << "\n";
            csv.flush();
        }
        if (cfg_.verbose && (r.step % print_every == 0 || r.step + 1 == total_steps_))
            std::cout << "step " << r.step << "/" << total_steps_ << " eta=" << r.eta
                      << " alpha=" << r.alpha << " reg=" << r.registration
                      << " total=" << r.total << std::endl;
        if (!out_dir.empty() && cfg_.checkpoint_every > 0 &&
            (r.step + 1) % cfg_.checkpoint_every == 0 && r.step + 1 < total_steps_)
            save_checkpoint(out_dir + "/ckpt_step" + std::to_string(r.step + 1));
    }
    if (!out_dir.empty()) save_checkpoint(out_dir + "/final");
}

LandmarkSet Trainer::infer_volume(const Volume3D& v) const { return infer(params_, v); }

// --------------------------------------------------------------- checkpoints

namespace {
constexpr int kCheckpointVersion = 1;
}

void Trainer::save_checkpoint(const std::string& stem) const {
    if (auto dir = fs::path(stem).parent_path(); !dir.empty()) fs::create_directories(dir);
    json j;
    j["version"] = kCheckpointVersion;
    j["config"] = config_to_json(cfg_);
    j["steps_done"] = steps_done_;
    j["adam_t"] = adam_t_;
    j["rng_state"] = rng_.save_state();
    json table = json::array();
    std::int64_t offset = 0;
    auto add_entry = [&](const std::string& name, const std::vector<int>& shape,
                         const std::vector<double>& v) {
        table.push_back({{"name", name},
                         {"shape", shape},
                         {"offset", offset},
                         {"size", static_cast<std::int64_t>(v.size())}});
        offset += static_cast<std::int64_t>(v.size());
    };
    for (std::size_t i = 0; i < params_.tensors.size(); ++i)
        add_entry(params_.names[i], params_.shapes[i], params_.tensors[i]);
    for (std::size_t i = 0; i < params_.tensors.size(); ++i)
        add_entry("adam_m." + params_.names[i], params_.shapes[i], adam_m_[i]);
    for (std::size_t i = 0; i < params_.tensors.size(); ++i)
        add_entry("adam_v." + params_.names[i], params_.shapes[i], adam_v_[i]);
    j["tensors"] = table;
    j["blob_doubles"] = offset;

    std::ofstream mf(stem + ".json");
    if (!mf) throw DataError("cannot write checkpoint manifest: " + stem + ".json");
    mf << j.dump(2) << "\n";

    std::ofstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw DataError("cannot write checkpoint blob: " + stem + ".bin");
    auto dump = [&bf](const std::vector<double>& v) {
        bf.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size()) * 8);
    };
    for (const auto& t : params_.tensors) dump(t);
    for (const auto& t : adam_m_) dump(t);
    for (const auto& t : adam_v_) dump(t);
    if (!bf) throw DataError("short write: " + stem + ".bin");
}

namespace {

json read_manifest(const std::string& stem) {
    std::ifstream mf(stem + ".json");
    if (!mf) throw DataError("missing checkpoint manifest: " + stem + ".json");
    json j;
    try {
        mf >> j;
    } catch (const json::exception& e) {
        throw DataError("bad checkpoint manifest: " + std::string(e.what()));
    }
    if (j.value("version", -1) != kCheckpointVersion)
        throw DataError("checkpoint version mismatch");
    return j;
}

std::vector<double> read_blob(const std::string& stem, std::int64_t expect_doubles) {
    std::ifstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw DataError("missing checkpoint blob: " + stem + ".bin");
    bf.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::int64_t>(bf.tellg());
    if (bytes != expect_doubles * 8)
        throw DataError("checkpoint blob size mismatch (corrupt checkpoint)");
    bf.seekg(0);
    std::vector<double> blob(static_cast<std::size_t>(expect_doubles));
    bf.read(reinterpret_cast<char*>(blob.data()), bytes);
    if (!bf) throw DataError("short read: " + stem + ".bin");
    return blob;
}

}  // namespace

CheckpointHeader read_checkpoint_header(const std::string& stem) {
    const json j = read_manifest(stem);
    CheckpointHeader h;
    try {
        h.config = config_from_json(j.at("config"));
        h.steps_done = j.at("steps_done").get<int>();
    } catch (const json::exception& e) {
        throw DataError("bad checkpoint manifest: " + std::string(e.what()));
    }
    return h;
}

DetectorParams read_checkpoint_params(const std::string& stem) {
    const json j = read_manifest(stem);
    const TrainConfig cfg = config_from_json(j.at("config"));
    DetectorParams p = init_params(cfg.detector, cfg.seed);
    const std::vector<double> blob = read_blob(stem, j.at("blob_doubles").get<std::int64_t>());
    const json& table = j.at("tensors");
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        const json& e = table.at(i);
        if (e.at("name").get<std::string>() != p.names[i] ||
            e.at("size").get<std::int64_t>() != static_cast<std::int64_t>(p.tensors[i].size()))
            throw DataError("checkpoint does not match its declared detector config");
        const auto off = e.at("offset").get<std::int64_t>();
        std::copy(blob.begin() + off, blob.begin() + off + static_cast<std::int64_t>(p.tensors[i].size()),
                  p.tensors[i].begin());
    }
    return p;
}

Trainer Trainer::resume(const std::string& stem, Volume3D tmpl, LandmarkSet template_landmarks,
                        std::vector<Volume3D> pool) {
    const json j = read_manifest(stem);
    TrainConfig cfg;
    std::int64_t adam_t = 0;
    int steps_done = 0;
    std::string rng_state;
    try {
        cfg = config_from_json(j.at("config"));
        adam_t = j.at("adam_t").get<std::int64_t>();
        steps_done = j.at("steps_done").get<int>();
        rng_state = j.at("rng_state").get<std::string>();
    } catch (const json::exception& e) {
        throw DataError("bad checkpoint manifest: " + std::string(e.what()));
    }

    Trainer t(cfg, std::move(tmpl), std::move(template_landmarks), std::move(pool));
    const std::vector<double> blob = read_blob(stem, j.at("blob_doubles").get<std::int64_t>());
    const json& table = j.at("tensors");
    const std::size_t n = t.params_.tensors.size();
    auto fill = [&](std::size_t row, std::vector<double>& dst, const std::string& want) {
        const json& e = table.at(row);
        if (e.at("name").get<std::string>() != want ||
            e.at("size").get<std::int64_t>() != static_cast<std::int64_t>(dst.size()))
            throw DataError("checkpoint does not match its declared detector config");
        const auto off = e.at("offset").get<std::int64_t>();
        std::copy(blob.begin() + off, blob.begin() + off + static_cast<std::int64_t>(dst.size()),
                  dst.begin());
    };
    for (std::size_t i = 0; i < n; ++i) fill(i, t.params_.tensors[i], t.params_.names[i]);
    for (std::size_t i = 0; i < n; ++i) fill(n + i, t.adam_m_[i], "adam_m." + t.params_.names[i]);
    for (std::size_t i = 0; i < n; ++i)
        fill(2 * n + i, t.adam_v_[i], "adam_v." + t.params_.names[i]);
    t.adam_t_ = adam_t;
    t.steps_done_ = steps_done;
    t.rng_.load_state(rng_state);
    return t;
}

}  // namespace cabld
