// trainer.hpp — the training loop: sampling, augmentation, TPS fitting,
// curriculum loss, Adam with cosine-annealed learning rate, checkpointing.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cabld/ad/tps_graph.hpp"
#include "cabld/augment.hpp"
#include "cabld/landmarks.hpp"
#include "cabld/model.hpp"
#include "cabld/volume.hpp"

namespace cabld {

struct TrainConfig {
    int subjects_per_step = 2;  // M
    int epochs = 0;             // one epoch = one pass over the pool (ceil(K/M) steps)
    int total_steps = 0;        // overrides epochs when set
    double lr_init = 1e-4;
    double lr_min = 1e-6;
    double lambda_lo = 1e-3;  // log-uniform TPS regularization range
    double lambda_hi = 10.0;
    bool rc_enabled = true;
    RcConfig rc;
    bool affine_enabled = false;
    AffineRanges affine;
    bool consistency_enabled = true;
    DetectorConfig detector;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // steps; 0 = final checkpoint only
    bool verbose = false;

    void validate() const;                 // throws ConfigError
    int resolved_steps(int pool_size) const;
    bool operator==(const TrainConfig&) const = default;
};

// JSON round-trip with unknown-key rejection
TrainConfig train_config_from_json_file(const std::string& path);
void train_config_to_json_file(const TrainConfig& cfg, const std::string& path);

struct StepRecord {
    int step = 0;
    double eta = 0, alpha = 0, lr = 0, lambda = 0;
    double registration = 0, consistency1 = 0, consistency2 = 0, total = 0;
    int retries = 0;     // singular-fit resamples consumed by this step
    bool updated = false;
};

class Trainer {
  public:
    Trainer(TrainConfig cfg, Volume3D tmpl, LandmarkSet template_landmarks,
            std::vector<Volume3D> pool);

    // one optimization step (skip-and-resample on singular TPS fits);
    // throws NumericalError on non-finite loss/gradients
    StepRecord step();
    // all remaining steps; writes loss CSV + checkpoints under out_dir when given
    void run(const std::string& out_dir = "");

    int steps_done() const { return steps_done_; }
    int total_steps() const { return total_steps_; }
    const TrainConfig& config() const { return cfg_; }
    const DetectorParams& params() const { return params_; }
    const std::vector<StepRecord>& log() const { return log_; }

    LandmarkSet infer_volume(const Volume3D& v) const;

    // round-trips params, Adam moments, step counters and RNG state:
    // `<stem>.json` manifest + `<stem>.bin` float64 blob
    void save_checkpoint(const std::string& stem) const;
    // resumes the exact trajectory; template/landmarks/pool must be the data
    // the checkpointed run was using
    static Trainer resume(const std::string& stem, Volume3D tmpl,
                          LandmarkSet template_landmarks, std::vector<Volume3D> pool);

  private:
    Trainer() = default;

    TrainConfig cfg_;
    Volume3D tmpl_;
    LandmarkSet template_landmarks_;
    std::vector<Volume3D> pool_;
    DetectorParams params_;
    std::vector<std::vector<double>> adam_m_, adam_v_;
    std::int64_t adam_t_ = 0;
    int steps_done_ = 0;
    int total_steps_ = 0;
    Rng rng_;
    std::vector<StepRecord> log_;
    ad::GridKernel grid_kernel_;

    void init_caches();
};

// standalone checkpoint inspection (for `infer`: params + config only)
struct CheckpointHeader {
    TrainConfig config;
    int steps_done = 0;
};
CheckpointHeader read_checkpoint_header(const std::string& stem);
DetectorParams read_checkpoint_params(const std::string& stem);

}  // namespace cabld
