#pragma once

#include <array>
#include <functional>

#include "cmb/nn.hpp"
#include "cmb/tensor.hpp"

namespace cmb {

// psi mapping used inside coupling layers: any [C,H,W] -> [C,H,W] function.
using PsiFn = std::function<Tensor(const Tensor&)>;

// Divisors closer to zero than this are pushed to +/- kDivGuard before the
// multiplicative coupling and its inverse; both directions apply the same
// clamp, so the round trip stays exact. An exactly-zero psi output has no
// sign to preserve and is rejected on inversion instead.
constexpr double kDivGuard = 1e-3;

// Affine coupling: re2 = e2 + psi_a(e1); re1 = e1 * g + g with
// g = clamp(psi_b(re2)).
std::pair<Tensor, Tensor> coupling_forward(const Tensor& e1, const Tensor& e2,
                                           const PsiFn& psi_a, const PsiFn& psi_b);
// Inverse: e1 = (re1 - g) / g; e2 = re2 - psi_a(e1). Throws SingularityError
// naming the first position where psi_b(re2) is exactly zero.
std::pair<Tensor, Tensor> coupling_invert(const Tensor& re1, const Tensor& re2,
                                          const PsiFn& psi_a, const PsiFn& psi_b);

// Edge refinement module: channel-split invertible coupling plus a 1x1
// boundary head over the recombined features.
class Erm {
public:
    Erm() = default;
    Erm(int64_t channels, int psi_depth, Rng& rng);

    // V [C,H,W] with C even -> (rV, boundary logits E [1,H,W])
    std::pair<Tensor, Tensor> forward(const Tensor& v, bool training);
    // Recovers V from rV under the same psi parameters.
    Tensor invert(const Tensor& rv, bool training);
    void params(const std::string& prefix, ParamList& out);

    PsiBlock psi_a, psi_b;
    Conv2d edge_head;
};

// Edge-guided residual module: U_r = psi_c(U + psi_d(psi_e(U))), gated by the
// boundary logits through a sigmoid, with a 1x1 mask head.
class Egrm {
public:
    Egrm() = default;
    Egrm(int64_t channels, int psi_depth, Rng& rng);

    // returns (mask logits M [1,H,W], carry [C,H,W])
    std::pair<Tensor, Tensor> forward(const Tensor& u, const Tensor& e, bool training);
    void params(const std::string& prefix, ParamList& out);

    PsiBlock psi_c, psi_d, psi_e;
    Conv2d mask_head;
};

struct DecoderBlockOutput {
    Tensor e;     // boundary logits [1,H,W]; undefined for the plain decoder
    Tensor m;     // mask logits [1,H,W]
    Tensor carry; // features handed to the next block
};

// One decoder stage: concat(previous features, lateral features), two 1x1
// convs to U and V, coupling branch for the boundary, gated residual branch
// for the mask.
class DecoderBlock {
public:
    DecoderBlock() = default;
    DecoderBlock(int64_t c_in, int64_t c_fused, int psi_depth, Rng& rng);

    DecoderBlockOutput forward(const Tensor& prev, const Tensor& lateral, bool training);
    void params(const std::string& prefix, ParamList& out);

    Conv2d to_u, to_v;
    Erm erm;
    Egrm egrm;
};

// 1x1 conv + batchnorm + ReLU per pyramid level down to a common width.
class ChannelCompression {
public:
    ChannelCompression() = default;
    ChannelCompression(const std::array<int64_t, 4>& in_channels, int64_t out_channels, Rng& rng);

    std::array<Tensor, 4> forward(const std::array<Tensor, 4>& levels, bool training);
    void params(const std::string& prefix, ParamList& out);

    std::array<Conv2d, 4> convs;
    std::array<BatchNorm2d, 4> bns;
};

// Restoration edge decoder: four blocks from the coarsest grid up, carry
// upsampled 2x (nearest) between blocks. Output order is DB4..DB1, so
// index 3 holds the finest maps.
class Red {
public:
    Red() = default;
    Red(int64_t c_top, int64_t c_compressed, int psi_depth, Rng& rng);

    std::array<DecoderBlockOutput, 4> decode(const Tensor& o,
                                             const std::array<Tensor, 4>& compressed,
                                             bool training);
    void params(const std::string& prefix, ParamList& out);

    std::array<DecoderBlock, 4> blocks; // index 0 = DB4 (coarsest)
};

// Baseline decoder for ablations without the coupling branch: per block a 1x1
// fusion conv, a psi stack and a mask head; no boundary maps.
class PlainDecoder {
public:
    PlainDecoder() = default;
    PlainDecoder(int64_t c_top, int64_t c_compressed, int psi_depth, Rng& rng);

    std::array<DecoderBlockOutput, 4> decode(const Tensor& o,
                                             const std::array<Tensor, 4>& compressed,
                                             bool training);
    void params(const std::string& prefix, ParamList& out);

    std::array<Conv2d, 4> fuse;
    std::array<PsiBlock, 4> psi;
    std::array<Conv2d, 4> mask_heads;
};

} // namespace cmb
