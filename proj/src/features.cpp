#include "cmb/features.hpp"

#include <cmath>

#include "cmb/serialize.hpp"

namespace cmb {

StubVisualEncoder::StubVisualEncoder(const FeatureChannels& ch, Rng& rng) {
    int64_t cin[4] = {3, ch.c1, ch.c2, ch.c3};
    int64_t cout[4] = {ch.c1, ch.c2, ch.c3, ch.c4};
    for (int i = 0; i < 4; ++i) {
        entry_[i] = Conv2d(cin[i], cout[i], 3, 2, 1, rng);
        refine_[i] = Conv2d(cout[i], cout[i], 3, 1, 1, rng);
    }
}

FeaturePyramid StubVisualEncoder::forward(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("encoder: need [3,H,W], got " + shape_str(image.shape()));
    if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0)
        throw ShapeError("encoder: spatial dims must be divisible by 16, got " +
                         shape_str(image.shape()));
    FeaturePyramid p;
    Tensor h = image;
    Tensor* levels[4] = {&p.l1, &p.l2, &p.l3, &p.l4};
    for (int i = 0; i < 4; ++i) {
        h = relu(entry_[i].forward(h));
        h = relu(refine_[i].forward(h));
        *levels[i] = h;
    }
    return p;
}

void StubVisualEncoder::params(const std::string& prefix, ParamList& out) {
    for (int i = 0; i < 4; ++i) {
        entry_[i].params(prefix + ".entry" + std::to_string(i + 1), out);
        refine_[i].params(prefix + ".refine" + std::to_string(i + 1), out);
    }
}

PyramidFuser::PyramidFuser(const FeatureChannels& ch, Rng& rng)
    : down2_a_(ch.c2, ch.c2, 3, 2, 1, rng),
      down2_b_(ch.c2, ch.c2, 3, 2, 1, rng),
      down3_(ch.c3, ch.c3, 3, 2, 1, rng),
      fuse_(ch.c2 + ch.c3 + ch.c4, ch.c5, 3, 1, 1, rng),
      bn_(ch.c5) {}

Tensor PyramidFuser::forward(const Tensor& l2, const Tensor& l3, const Tensor& l4,
                             bool training) {
    Tensor d2 = down2_b_.forward(down2_a_.forward(l2));
    Tensor d3 = down3_.forward(l3);
    if (d2.dim(1) != l4.dim(1) || d3.dim(1) != l4.dim(1))
        throw ShapeError("fuse_to_L5: downsampled grids " + shape_str(d2.shape()) + ", " +
                         shape_str(d3.shape()) + " do not match L4 " + shape_str(l4.shape()));
    Tensor cat = concat({d2, d3, l4}, 0);
    return bn_.forward(relu(fuse_.forward(cat)), training);
}

void PyramidFuser::params(const std::string& prefix, ParamList& out) {
    down2_a_.params(prefix + ".down2a", out);
    down2_b_.params(prefix + ".down2b", out);
    down3_.params(prefix + ".down3", out);
    fuse_.params(prefix + ".fuse", out);
    bn_.params(prefix + ".bn", out);
}

MaskGeometry mask_geometry(const Tensor& mask) {
    if (mask.rank() != 2) throw ShapeError("mask_geometry: need [H,W], got " + shape_str(mask.shape()));
    int64_t h = mask.dim(0), w = mask.dim(1);
    MaskGeometry g;
    double sx = 0, sy = 0, n = 0;
    int64_t min_i = h, max_i = -1, min_j = w, max_j = -1;
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            if (mask.at({i, j}) > 0.5) {
                sx += static_cast<double>(j);
                sy += static_cast<double>(i);
                n += 1.0;
                min_i = std::min(min_i, i);
                max_i = std::max(max_i, i);
                min_j = std::min(min_j, j);
                max_j = std::max(max_j, j);
            }
    if (n > 0) {
        g.cx = sx / n / static_cast<double>(w);
        g.cy = sy / n / static_cast<double>(h);
        g.ext_w = static_cast<double>(max_j - min_j + 1) / static_cast<double>(w);
        g.ext_h = static_cast<double>(max_i - min_i + 1) / static_cast<double>(h);
        g.area = n / static_cast<double>(h * w);
    }
    return g;
}

namespace {
// One shared projection across all samples keeps the geometry -> text map a
// fixed, learnable relation.
constexpr uint64_t kTextProjectionSeed = 0x7c3b9a51u;
constexpr double kTextNoise = 0.01;
} // namespace

std::vector<double> text_projection(int64_t n_tokens, int64_t d_text) {
    Rng rng(kTextProjectionSeed);
    std::vector<double> proj(static_cast<size_t>(n_tokens * d_text) * 5);
    // scaled so token magnitudes are comparable to the visual features the
    // fusion attends over
    for (auto& v : proj) v = 1.75 * rng.normal();
    return proj;
}

TextFeatures synth_text_features(const MaskGeometry& g, int64_t n_tokens, int64_t d_text,
                                 uint64_t noise_seed) {
    if (n_tokens < 1) throw ValueError("synth_text_features: need at least one token");
    std::vector<double> proj = text_projection(n_tokens, d_text);
    double geo[5] = {g.cx, g.cy, g.ext_w, g.ext_h, g.area};
    Rng noise(noise_seed);
    std::vector<double> t(static_cast<size_t>(n_tokens * d_text));
    for (size_t i = 0; i < t.size(); ++i) {
        double v = 0.0;
        for (int q = 0; q < 5; ++q) v += proj[i * 5 + q] * geo[q];
        t[i] = v + kTextNoise * noise.normal();
    }
    return {Tensor::from_data({n_tokens, d_text}, std::move(t))};
}

TextFeatures load_text_features(const std::string& path) {
    Tensor t = load_tensor(path);
    if (t.rank() != 2)
        throw FormatError(path + ": text features must be rank 2, got " + shape_str(t.shape()));
    for (double v : t.vec())
        if (!std::isfinite(v)) throw FormatError(path + ": non-finite text feature value");
    return {t};
}

} // namespace cmb
