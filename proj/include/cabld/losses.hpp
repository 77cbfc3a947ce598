// losses.hpp — training objectives: registration similarity, cross-subject /
// subject-template consistency, curriculum weight, total loss.
#pragma once

#include <memory>
#include <vector>

#include "cabld/ad/graph.hpp"
#include "cabld/ad/tps_graph.hpp"
#include "cabld/landmarks.hpp"
#include "cabld/tps.hpp"
#include "cabld/volume.hpp"

namespace cabld {

// sigmoid curriculum ramp: 0 at eta=0, ~0.9866 at eta=1, strictly increasing
double alpha(double eta);

// per-subject graph nodes assembled by the trainer
struct SubjectNodes {
    ad::Tensor pred;                         // [L x 3] detector output, mm
    std::shared_ptr<const Volume3D> pre_rc;  // geometric-augmented, pre-RC volume
    ad::TpsFitNodes fwd;                     // predicted -> template landmarks
    ad::TpsFitNodes rev;                     // template landmarks -> predicted
};

struct LossNodes {
    ad::Tensor registration;
    ad::Tensor consistency1;  // cross-subject, mean over pairs
    ad::Tensor consistency2;  // subject-template, mean over subjects
    ad::Tensor consistency;   // sum of the two
    ad::Tensor total;
};

// registration: (1/M) sum_k MSE(warp(pre_rc_k by reverse field), template).
// consistency1: mean over the M-choose-2 pairs of the mean-over-landmarks
// distance between warped predictions; consistency2: same against the
// template landmarks. total: (1-alpha) * registration + alpha * consistency,
// or plain registration when `consistency_enabled` is false.
LossNodes build_losses(ad::Graph& g, const std::vector<SubjectNodes>& subjects,
                       const Volume3D& tmpl, const ad::GridKernel& grid_kernel,
                       ad::Tensor template_landmarks, double eta, bool consistency_enabled);

// convenience values for tests / CLI (builds an internal graph over constant
// predictions)
struct LossValues {
    double registration = 0, consistency1 = 0, consistency2 = 0, consistency = 0, total = 0,
           alpha = 0;
};
LossValues compute_losses(const std::vector<LandmarkSet>& predictions,
                          const std::vector<const Volume3D*>& pre_rc_volumes,
                          const Volume3D& tmpl, const LandmarkSet& template_landmarks,
                          double lambda, double eta);

}  // namespace cabld
