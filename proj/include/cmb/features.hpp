#pragma once

#include <string>

#include "cmb/nn.hpp"
#include "cmb/tensor.hpp"

namespace cmb {

struct FeatureChannels {
    int64_t c1 = 8, c2 = 16, c3 = 24, c4 = 32;
    int64_t c5 = 32;
};

// Multi-level visual features. Spatial dims halve between consecutive levels;
// L5 shares L4's grid.
struct FeaturePyramid {
    Tensor l1, l2, l3, l4, l5;
};

struct TextFeatures {
    Tensor t; // [N, D_text]
};

// Stand-in for a pretrained visual backbone: per level a stride-2 conv3x3
// entry followed by a stride-1 conv3x3, each ReLU-activated. Deterministic
// given the construction seed.
class StubVisualEncoder {
public:
    StubVisualEncoder() = default;
    StubVisualEncoder(const FeatureChannels& ch, Rng& rng);

    // image [3,H,W] with H, W divisible by 16 -> levels L1..L4 (l5 left empty)
    FeaturePyramid forward(const Tensor& image) const;
    void params(const std::string& prefix, ParamList& out);

private:
    Conv2d entry_[4], refine_[4];
};

// Builds the high-level feature L5 on L4's grid: L2 and L3 are brought down
// by strided convs, channel-concatenated with L4 and fused by a
// conv3x3 + ReLU + batchnorm stage.
class PyramidFuser {
public:
    PyramidFuser() = default;
    PyramidFuser(const FeatureChannels& ch, Rng& rng);

    Tensor forward(const Tensor& l2, const Tensor& l3, const Tensor& l4, bool training);
    void params(const std::string& prefix, ParamList& out);

private:
    Conv2d down2_a_, down2_b_, down3_;
    Conv2d fuse_;
    BatchNorm2d bn_;
};

// Normalized mask geometry: centroid, extent and area fraction. This is the
// signal the synthetic text features carry.
struct MaskGeometry {
    double cx = 0.5, cy = 0.5, ext_w = 0.0, ext_h = 0.0, area = 0.0;
};
MaskGeometry mask_geometry(const Tensor& mask); // [H,W] binary

// Returns the fixed projection matrix used by the synthesizer,
// [n_tokens*d_text x 5]; exposed so tests can probe the encoding.
std::vector<double> text_projection(int64_t n_tokens, int64_t d_text);

// Emits [n_tokens, d_text] features: a fixed random projection of the mask
// geometry plus small seeded noise. Matched samples receive the true mask's
// geometry; mismatched samples receive an unrelated one (caller's choice).
TextFeatures synth_text_features(const MaskGeometry& g, int64_t n_tokens, int64_t d_text,
                                 uint64_t noise_seed);

// Reads a rank-2 CMBT tensor.
TextFeatures load_text_features(const std::string& path);

} // namespace cmb
