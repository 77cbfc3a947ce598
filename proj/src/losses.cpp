// losses.cpp — loss graph assembly.

#include "cabld/losses.hpp"

#include <cmath>

#include "cabld/errors.hpp"

namespace cabld {

double alpha(double eta) {
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("alpha: eta must lie in [0, 1]");
    return 2.0 / (1.0 + std::exp(-5.0 * eta)) - 1.0;
}

LossNodes build_losses(ad::Graph& g, const std::vector<SubjectNodes>& subjects,
                       const Volume3D& tmpl, const ad::GridKernel& grid_kernel,
                       ad::Tensor template_landmarks, double eta, bool consistency_enabled) {
    const int m = static_cast<int>(subjects.size());
    if (m < 2) throw ConfigError("build_losses: batch needs M >= 2 subjects");
    if (grid_kernel.vcount != tmpl.numel())
        throw ConfigError("build_losses: grid kernel does not match template grid");

    std::vector<double> tvec(tmpl.data.begin(), tmpl.data.end());
    ad::Tensor tmpl_flat = g.constant({static_cast<int>(tmpl.numel())}, std::move(tvec));

    LossNodes out;
    bool first = true;
    for (const auto& s : subjects) {
        if (s.pre_rc->shape != tmpl.shape)
            throw ConfigError("registration loss: subject/template shape mismatch");
        ad::Tensor field = ad::tps_dense_field_graph(g, s.rev, grid_kernel);
        ad::Tensor warped = ad::warp_trilinear(field, s.pre_rc);
        ad::Tensor diff = ad::sub(warped, tmpl_flat);
        ad::Tensor mse = ad::reduce_mean(ad::mul(diff, diff));
        out.registration = first ? mse : ad::add(out.registration, mse);
        first = false;
    }
    out.registration = ad::scale(out.registration, 1.0 / m);

    const double a = alpha(eta);
    if (!consistency_enabled) {
        out.total = out.registration;
        return out;
    }

    std::vector<ad::Tensor> warped_preds;
    warped_preds.reserve(static_cast<std::size_t>(m));
    for (const auto& s : subjects) warped_preds.push_back(ad::tps_eval_graph(g, s.fwd, s.pred));

    bool first1 = true;
    for (int r = 0; r < m; ++r)
        for (int j = r + 1; j < m; ++j) {
            ad::Tensor d = ad::reduce_mean(ad::row_norm(ad::sub(warped_preds[static_cast<std::size_t>(r)],
                                                                warped_preds[static_cast<std::size_t>(j)])));
            out.consistency1 = first1 ? d : ad::add(out.consistency1, d);
            first1 = false;
        }
    out.consistency1 = ad::scale(out.consistency1, 2.0 / (m * (m - 1)));

    bool first2 = true;
    for (int k = 0; k < m; ++k) {
        ad::Tensor d = ad::reduce_mean(
            ad::row_norm(ad::sub(warped_preds[static_cast<std::size_t>(k)], template_landmarks)));
        out.consistency2 = first2 ? d : ad::add(out.consistency2, d);
        first2 = false;
    }
    out.consistency2 = ad::scale(out.consistency2, 1.0 / m);

    out.consistency = ad::add(out.consistency1, out.consistency2);
    out.total = ad::add(ad::scale(out.registration, 1.0 - a), ad::scale(out.consistency, a));
    return out;
}

LossValues compute_losses(const std::vector<LandmarkSet>& predictions,
                          const std::vector<const Volume3D*>& pre_rc_volumes,
                          const Volume3D& tmpl, const LandmarkSet& template_landmarks,
                          double lambda, double eta) {
    if (predictions.size() != pre_rc_volumes.size())
        throw ConfigError("compute_losses: prediction/volume count mismatch");
    const int l = template_landmarks.count();
    ad::Graph g;
    const ad::GridKernel gk =
        ad::make_grid_kernel(template_landmarks, tmpl.shape, tmpl.spacing, tmpl.origin);

    std::vector<double> pvec;
    for (const auto& p : template_landmarks.points) pvec.insert(pvec.end(), p.begin(), p.end());
    ad::Tensor pt = g.constant({l, 3}, pvec);

    std::vector<SubjectNodes> subjects;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i].count() != l)
            throw ConfigError("compute_losses: landmark count mismatch");
        std::vector<double> pr;
        for (const auto& p : predictions[i].points) pr.insert(pr.end(), p.begin(), p.end());
        SubjectNodes s;
        s.pred = g.constant({l, 3}, pr);
        s.pre_rc = std::make_shared<Volume3D>(*pre_rc_volumes[i]);
        s.fwd = ad::tps_fit_graph(g, s.pred, pt, lambda);
        s.rev = ad::tps_fit_graph(g, pt, s.pred, lambda);
        subjects.push_back(std::move(s));
    }
    const LossNodes nodes = build_losses(g, subjects, tmpl, gk, pt, eta, true);
    LossValues v;
    v.registration = nodes.registration.scalar();
    v.consistency1 = nodes.consistency1.scalar();
    v.consistency2 = nodes.consistency2.scalar();
    v.consistency = nodes.consistency.scalar();
    v.total = nodes.total.scalar();
    v.alpha = alpha(eta);
    return v;
}

}  // namespace cabld
