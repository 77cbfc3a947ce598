// model.cpp — detector network assembly and inference.

#include "cabld/model.hpp"

#include <cmath>

#include "cabld/errors.hpp"
#include "cabld/rng.hpp"

namespace cabld {

int DetectorConfig::pool_count() const {
    int n = 0;
    for (const auto& b : blocks) n += b.pool ? 1 : 0;
    return n;
}

void DetectorConfig::validate() const {
    if (blocks.empty()) throw ConfigError("detector: needs at least one block");
    if (landmarks < 1) throw ConfigError("detector: needs at least one landmark");
    for (const auto& b : blocks)
        if (b.channels < 1) throw ConfigError("detector: block channels must be >= 1");
    std::array<int, 3> s = input_shape;
    for (const auto& b : blocks) {
        if (!b.pool) continue;
        for (int a = 0; a < 3; ++a) {
            if (s[a] % 2 != 0 || s[a] < 2)
                throw ConfigError("detector: pooling needs even spatial dims >= 2");
            s[a] /= 2;
        }
    }
    for (int a = 0; a < 3; ++a)
        if (s[a] < 1) throw ConfigError("detector: working grid collapsed to zero");
}

std::int64_t DetectorParams::total_size() const {
    std::int64_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::int64_t>(t.size());
    return n;
}

DetectorParams init_params(const DetectorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DetectorParams p;
    p.cfg = cfg;
    Rng rng(Rng::derive(seed, 0x7061726d));  // independent init stream

    auto push = [&p](const std::string& name, std::vector<int> shape, std::vector<double> val) {
        p.names.push_back(name);
        p.shapes.push_back(std::move(shape));
        p.tensors.push_back(std::move(val));
    };

    int cin = 1;
    for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
        const int cout = cfg.blocks[b].channels;
        const int fan_in = cin * 27;
        const double std = std::sqrt(2.0 / fan_in);
        std::vector<double> k(static_cast<std::size_t>(cout) * cin * 27);
        for (double& w : k) w = rng.normal(0.0, std);
        push("block" + std::to_string(b) + ".conv", {cout, cin, 3, 3, 3}, std::move(k));
        push("block" + std::to_string(b) + ".scale", {cout},
             std::vector<double>(static_cast<std::size_t>(cout), 1.0));
        push("block" + std::to_string(b) + ".shift", {cout},
             std::vector<double>(static_cast<std::size_t>(cout), 0.0));
        cin = cout;
    }
    const int L = cfg.landmarks;
    const double std = cfg.final_gain * std::sqrt(2.0 / cin);
    std::vector<double> k(static_cast<std::size_t>(L) * cin);
    for (double& w : k) w = rng.normal(0.0, std);
    push("final.conv", {L, cin, 1, 1, 1}, std::move(k));
    return p;
}

WorkingGrid working_grid(const DetectorConfig& cfg, const Volume3D& input) {
    const int t = cfg.pool_count();
    const double f = std::pow(2.0, t);
    WorkingGrid w;
    for (int a = 0; a < 3; ++a) {
        w.shape[a] = input.shape[a] >> t;
        w.spacing[a] = input.spacing[a] * f;
        // pooled cell center = mean of its constituent voxel centers
        w.origin[a] = input.origin[a] + input.spacing[a] * (f - 1.0) / 2.0;
    }
    return w;
}

std::vector<ad::Tensor> make_param_nodes(ad::Graph& g, const DetectorParams& params) {
    std::vector<ad::Tensor> nodes;
    nodes.reserve(params.tensors.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
        nodes.push_back(g.param(params.shapes[i], params.tensors[i]));
    return nodes;
}

DetectorGraphOut detector_forward_graph(ad::Graph& g, const DetectorConfig& cfg,
                                        const std::vector<ad::Tensor>& param_nodes,
                                        const Volume3D& input) {
    cfg.validate();
    if (input.shape != cfg.input_shape)
        throw ConfigError("detector: input shape does not match config");

    DetectorGraphOut out;
    out.param_nodes = param_nodes;

    std::vector<double> in(input.data.begin(), input.data.end());
    ad::Tensor x = g.constant({1, input.shape[0], input.shape[1], input.shape[2]}, std::move(in));

    std::size_t pi = 0;
    for (const auto& blk : cfg.blocks) {
        x = ad::conv3d(x, out.param_nodes[pi], 1);
        x = ad::instance_norm(x, out.param_nodes[pi + 1], out.param_nodes[pi + 2]);
        x = ad::relu(x);
        if (blk.pool) x = ad::max_pool3d(x);
        pi += 3;
    }
    out.features = ad::conv3d(x, out.param_nodes[pi], 0);

    out.grid = working_grid(cfg, input);
    const auto& ws = out.grid.shape;
    const std::int64_t v = static_cast<std::int64_t>(ws[0]) * ws[1] * ws[2];
    std::vector<double> coords(static_cast<std::size_t>(v) * 3);
    for (std::int64_t u = 0; u < v; ++u) {
        const int i = static_cast<int>(u % ws[0]);
        const int j = static_cast<int>((u / ws[0]) % ws[1]);
        const int k = static_cast<int>(u / (static_cast<std::int64_t>(ws[0]) * ws[1]));
        coords[static_cast<std::size_t>(u) * 3 + 0] = out.grid.origin[0] + i * out.grid.spacing[0];
        coords[static_cast<std::size_t>(u) * 3 + 1] = out.grid.origin[1] + j * out.grid.spacing[1];
        coords[static_cast<std::size_t>(u) * 3 + 2] = out.grid.origin[2] + k * out.grid.spacing[2];
    }
    ad::Tensor coord_table = g.constant({static_cast<int>(v), 3}, std::move(coords));
    ad::Tensor probs = ad::spatial_softmax(
        ad::reshape(out.features, {cfg.landmarks, static_cast<int>(v)}));
    out.pred = ad::coord_expectation(probs, coord_table);
    return out;
}

DetectorGraphOut detector_forward_graph(ad::Graph& g, const DetectorParams& params,
                                        const Volume3D& input) {
    return detector_forward_graph(g, params.cfg, make_param_nodes(g, params), input);
}

LandmarkSet infer(const DetectorParams& params, const Volume3D& input) {
    ad::Graph g;
    const auto fwd = detector_forward_graph(g, params, input);
    LandmarkSet lm;
    const auto& v = fwd.pred.val();
    for (int i = 0; i < params.cfg.landmarks; ++i)
        lm.points.push_back({v[static_cast<std::size_t>(i) * 3],
                             v[static_cast<std::size_t>(i) * 3 + 1],
                             v[static_cast<std::size_t>(i) * 3 + 2]});
    return lm;
}

}  // namespace cabld
