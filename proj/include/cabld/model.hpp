// model.hpp — landmark detection network: conv-block stack + center-of-mass head.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cabld/ad/graph.hpp"
#include "cabld/landmarks.hpp"
#include "cabld/volume.hpp"

namespace cabld {

struct ConvBlockCfg {
    int channels = 16;
    bool pool = false;
};

// Each block: conv3d(3x3x3, pad 1) -> instance norm -> relu -> optional
// 2x2x2 max pool. A final 1x1x1 conv maps the last block's channels to one
// feature map per landmark; the CoM head reduces those to coordinates.
struct DetectorConfig {
    std::vector<ConvBlockCfg> blocks;
    int landmarks = 6;
    std::array<int, 3> input_shape{48, 48, 48};
    double final_gain = 1.0;  // scale on the final conv's init std

    int pool_count() const;
    void validate() const;  // throws ConfigError
    bool operator==(const DetectorConfig&) const = default;
};

// Flat parameter storage; tensor order is per block [kernel, norm scale,
// norm shift], then the final kernel. Lives outside any graph.
struct DetectorParams {
    DetectorConfig cfg;
    std::vector<std::string> names;
    std::vector<std::vector<int>> shapes;
    std::vector<std::vector<double>> tensors;

    std::int64_t total_size() const;
};

// Kaiming-style fan-in scaled normal kernels, norm scale 1 / shift 0;
// deterministic per seed.
DetectorParams init_params(const DetectorConfig& cfg, std::uint64_t seed);

// geometry of the pooled working grid the CoM head operates on
struct WorkingGrid {
    std::array<int, 3> shape;
    Vec3 spacing;
    Vec3 origin;
};
WorkingGrid working_grid(const DetectorConfig& cfg, const Volume3D& input);

struct DetectorGraphOut {
    std::vector<ad::Tensor> param_nodes;  // parallel to DetectorParams.tensors
    ad::Tensor features;                  // [L, wx, wy, wz]
    ad::Tensor pred;                      // [L x 3] world mm
    WorkingGrid grid;
};

// inject parameters once per graph, so a multi-subject step accumulates
// gradients across all uses
std::vector<ad::Tensor> make_param_nodes(ad::Graph& g, const DetectorParams& params);

// forward pass reusing existing parameter nodes; input volume enters as a
// constant. Throws ConfigError when the input shape does not match cfg.
DetectorGraphOut detector_forward_graph(ad::Graph& g, const DetectorConfig& cfg,
                                        const std::vector<ad::Tensor>& param_nodes,
                                        const Volume3D& input);

// convenience: injects parameters and runs one forward pass
DetectorGraphOut detector_forward_graph(ad::Graph& g, const DetectorParams& params,
                                        const Volume3D& input);

// forward-only prediction
LandmarkSet infer(const DetectorParams& params, const Volume3D& input);

}  // namespace cabld
