#include "cmb/red.hpp"

#include <string>

namespace cmb {

namespace {

Tensor guarded(const Tensor& psi_out) { return clamp_away_from_zero(psi_out, kDivGuard); }

void check_no_exact_zero(const Tensor& psi_out) {
    const auto& v = psi_out.vec();
    for (int64_t i = 0; i < psi_out.size(); ++i) {
        if (v[i] == 0.0) {
            int64_t c = psi_out.dim(0), h = psi_out.dim(1), w = psi_out.dim(2);
            (void)c;
            int64_t ch = i / (h * w);
            int64_t rem = i % (h * w);
            throw SingularityError("coupling_invert: psi_b output is exactly zero at (c=" +
                                   std::to_string(ch) + ", i=" + std::to_string(rem / w) +
                                   ", j=" + std::to_string(rem % w) + ")");
        }
    }
}

} // namespace

std::pair<Tensor, Tensor> coupling_forward(const Tensor& e1, const Tensor& e2,
                                           const PsiFn& psi_a, const PsiFn& psi_b) {
    Tensor re2 = add(e2, psi_a(e1));
    Tensor g = guarded(psi_b(re2));
    Tensor re1 = add(mul(e1, g), g);
    return {re1, re2};
}

std::pair<Tensor, Tensor> coupling_invert(const Tensor& re1, const Tensor& re2,
                                          const PsiFn& psi_a, const PsiFn& psi_b) {
    Tensor raw = psi_b(re2);
    check_no_exact_zero(raw);
    Tensor g = guarded(raw);
    Tensor e1 = div(sub(re1, g), g);
    Tensor e2 = sub(re2, psi_a(e1));
    return {e1, e2};
}

Erm::Erm(int64_t channels, int psi_depth, Rng& rng)
    : psi_a(channels / 2, psi_depth, rng),
      psi_b(channels / 2, psi_depth, rng),
      edge_head(channels, 1, 1, 1, 0, rng) {}

std::pair<Tensor, Tensor> Erm::forward(const Tensor& v, bool training) {
    if (v.dim(0) % 2 != 0)
        throw ShapeError("erm: channel count must be even, got " + shape_str(v.shape()));
    int64_t half = v.dim(0) / 2;
    auto halves = split(v, 0, {half, half});
    auto pa = [&](const Tensor& t) { return psi_a.forward(t, training); };
    auto pb = [&](const Tensor& t) { return psi_b.forward(t, training); };
    auto [re1, re2] = coupling_forward(halves[0], halves[1], pa, pb);
    Tensor rv = concat({re1, re2}, 0);
    return {rv, edge_head.forward(rv)};
}

Tensor Erm::invert(const Tensor& rv, bool training) {
    if (rv.dim(0) % 2 != 0)
        throw ShapeError("erm invert: channel count must be even, got " + shape_str(rv.shape()));
    int64_t half = rv.dim(0) / 2;
    auto halves = split(rv, 0, {half, half});
    auto pa = [&](const Tensor& t) { return psi_a.forward(t, training); };
    auto pb = [&](const Tensor& t) { return psi_b.forward(t, training); };
    auto [e1, e2] = coupling_invert(halves[0], halves[1], pa, pb);
    return concat({e1, e2}, 0);
}

void Erm::params(const std::string& prefix, ParamList& out) {
    psi_a.params(prefix + ".psi_a", out);
    psi_b.params(prefix + ".psi_b", out);
    edge_head.params(prefix + ".edge_head", out);
}

Egrm::Egrm(int64_t channels, int psi_depth, Rng& rng)
    : psi_c(channels, psi_depth, rng),
      psi_d(channels, psi_depth, rng),
      psi_e(channels, psi_depth, rng),
      mask_head(channels, 1, 1, 1, 0, rng) {}

std::pair<Tensor, Tensor> Egrm::forward(const Tensor& u, const Tensor& e, bool training) {
    if (e.rank() != 3 || e.dim(0) != 1 || e.dim(1) != u.dim(1) || e.dim(2) != u.dim(2))
        throw ShapeError("egrm: boundary map " + shape_str(e.shape()) +
                         " does not match features " + shape_str(u.shape()));
    Tensor ur = psi_c.forward(add(u, psi_d.forward(psi_e.forward(u, training), training)),
                              training);
    Tensor gate = sigmoid(e);
    Tensor m = add(mul_broadcast0(ur, gate), ur);
    return {mask_head.forward(m), m};
}

void Egrm::params(const std::string& prefix, ParamList& out) {
    psi_c.params(prefix + ".psi_c", out);
    psi_d.params(prefix + ".psi_d", out);
    psi_e.params(prefix + ".psi_e", out);
    mask_head.params(prefix + ".mask_head", out);
}

DecoderBlock::DecoderBlock(int64_t c_in, int64_t c_fused, int psi_depth, Rng& rng)
    : to_u(c_in, c_fused, 1, 1, 0, rng),
      to_v(c_in, c_fused, 1, 1, 0, rng),
      erm(c_fused, psi_depth, rng),
      egrm(c_fused, psi_depth, rng) {}

DecoderBlockOutput DecoderBlock::forward(const Tensor& prev, const Tensor& lateral,
                                         bool training) {
    if (prev.dim(1) != lateral.dim(1) || prev.dim(2) != lateral.dim(2))
        throw ShapeError("decoder block: grids differ, " + shape_str(prev.shape()) + " vs " +
                         shape_str(lateral.shape()));
    Tensor x = concat({prev, lateral}, 0);
    Tensor u = to_u.forward(x);
    Tensor v = to_v.forward(x);
    DecoderBlockOutput out;
    out.e = erm.forward(v, training).second;
    auto [m, carry] = egrm.forward(u, out.e, training);
    out.m = m;
    out.carry = carry;
    return out;
}

void DecoderBlock::params(const std::string& prefix, ParamList& out) {
    to_u.params(prefix + ".to_u", out);
    to_v.params(prefix + ".to_v", out);
    erm.params(prefix + ".erm", out);
    egrm.params(prefix + ".egrm", out);
}

ChannelCompression::ChannelCompression(const std::array<int64_t, 4>& in_channels,
                                       int64_t out_channels, Rng& rng) {
    for (int i = 0; i < 4; ++i) {
        convs[i] = Conv2d(in_channels[i], out_channels, 1, 1, 0, rng);
        bns[i] = BatchNorm2d(out_channels);
    }
}

std::array<Tensor, 4> ChannelCompression::forward(const std::array<Tensor, 4>& levels,
                                                  bool training) {
    std::array<Tensor, 4> out;
    for (int i = 0; i < 4; ++i)
        out[i] = relu(bns[i].forward(convs[i].forward(levels[i]), training));
    return out;
}

void ChannelCompression::params(const std::string& prefix, ParamList& out) {
    for (int i = 0; i < 4; ++i) {
        convs[i].params(prefix + ".conv" + std::to_string(i + 1), out);
        bns[i].params(prefix + ".bn" + std::to_string(i + 1), out);
    }
}

Red::Red(int64_t c_top, int64_t c_compressed, int psi_depth, Rng& rng) {
    // DB4 fuses (O, L4); later blocks fuse (carry, L_i)
    blocks[0] = DecoderBlock(c_top + c_compressed, c_compressed, psi_depth, rng);
    for (int i = 1; i < 4; ++i)
        blocks[i] = DecoderBlock(2 * c_compressed, c_compressed, psi_depth, rng);
}

std::array<DecoderBlockOutput, 4> Red::decode(const Tensor& o,
                                              const std::array<Tensor, 4>& compressed,
                                              bool training) {
    std::array<DecoderBlockOutput, 4> outs;
    outs[0] = blocks[0].forward(o, compressed[3], training); // DB4 with L4
    Tensor carry = outs[0].carry;
    for (int i = 1; i < 4; ++i) {
        carry = upsample_nearest2x(carry);
        outs[i] = blocks[i].forward(carry, compressed[3 - i], training);
        carry = outs[i].carry;
    }
    return outs;
}

void Red::params(const std::string& prefix, ParamList& out) {
    for (int i = 0; i < 4; ++i)
        blocks[i].params(prefix + ".db" + std::to_string(4 - i), out);
}

PlainDecoder::PlainDecoder(int64_t c_top, int64_t c_compressed, int psi_depth, Rng& rng) {
    fuse[0] = Conv2d(c_top + c_compressed, c_compressed, 1, 1, 0, rng);
    for (int i = 1; i < 4; ++i) fuse[i] = Conv2d(2 * c_compressed, c_compressed, 1, 1, 0, rng);
    for (int i = 0; i < 4; ++i) {
        psi[i] = PsiBlock(c_compressed, psi_depth, rng);
        mask_heads[i] = Conv2d(c_compressed, 1, 1, 1, 0, rng);
    }
}

std::array<DecoderBlockOutput, 4> PlainDecoder::decode(const Tensor& o,
                                                       const std::array<Tensor, 4>& compressed,
                                                       bool training) {
    std::array<DecoderBlockOutput, 4> outs;
    Tensor carry = o;
    for (int i = 0; i < 4; ++i) {
        if (i > 0) carry = upsample_nearest2x(carry);
        Tensor x = concat({carry, compressed[3 - i]}, 0);
        Tensor h = psi[i].forward(fuse[i].forward(x), training);
        outs[i].m = mask_heads[i].forward(h);
        outs[i].carry = h;
        carry = h;
    }
    return outs;
}

void PlainDecoder::params(const std::string& prefix, ParamList& out) {
    for (int i = 0; i < 4; ++i) {
        std::string block = prefix + ".pb" + std::to_string(4 - i);
        fuse[i].params(block + ".fuse", out);
        psi[i].params(block + ".psi", out);
        mask_heads[i].params(block + ".mask_head", out);
    }
}

} // namespace cmb
