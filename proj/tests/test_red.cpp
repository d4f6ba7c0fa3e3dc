#include <doctest.h>

#include <cmath>

#include "cmb/losses.hpp"
#include "cmb/oracle.hpp"
#include "cmb/red.hpp"
#include "test_util.hpp"

using namespace cmb;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.vec()[i] - b.vec()[i]));
    return m;
}

} // namespace

TEST_CASE("coupling with psi forced to one shifts both halves by one") {
    Rng rng(301);
    Tensor e1 = random_tensor({2, 3, 3}, rng, 1.0, false);
    Tensor e2 = random_tensor({2, 3, 3}, rng, 1.0, false);
    PsiFn one = [](const Tensor& t) { return Tensor::ones(t.shape()); };
    auto [re1, re2] = coupling_forward(e1, e2, one, one);
    for (int64_t i = 0; i < e1.size(); ++i) {
        CHECK(re2.vec()[i] == doctest::Approx(e2.vec()[i] + 1.0));
        CHECK(re1.vec()[i] == doctest::Approx(e1.vec()[i] + 1.0));
    }
    auto [b1, b2] = coupling_invert(re1, re2, one, one);
    CHECK(max_abs_diff(b1, e1) < 1e-12);
    CHECK(max_abs_diff(b2, e2) < 1e-12);
}

TEST_CASE("zero input with zero-bias psi reduces to pure substitution") {
    Rng rng(303);
    Erm erm(4, 2, rng); // conv biases and bn shifts start at zero
    Tensor v = Tensor::zeros({4, 3, 3});
    auto [rv, e] = erm.forward(v, true);
    // psi_a(0) = 0 through conv/relu/bn, so re2 = 0 and re1 = psi_b(0) = 0
    for (double x : rv.vec()) CHECK(x == 0.0);
    CHECK(e.size() == 9);
}

TEST_CASE("erm round trip recovers the input on random seeds") {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(400 + seed);
        Erm erm(8, 2, rng);
        Tensor v = random_tensor({8, 4, 4}, rng, 1.0, false);
        for (bool training : {true, false}) {
            auto [rv, e] = erm.forward(v, training);
            Tensor back = erm.invert(rv, training);
            CHECK(max_abs_diff(back, v) < 1e-5);
        }
    }
}

TEST_CASE("invertibility holds for any psi depth and width") {
    for (int trial = 0; trial < 8; ++trial) {
        Rng rng(500 + trial);
        int depth = 1 + static_cast<int>(rng.uniform_int(0, 2));
        int64_t c = 2 * (1 + rng.uniform_int(0, 3));
        int64_t h = 2 + rng.uniform_int(0, 4);
        Erm erm(c, depth, rng);
        Tensor v = random_tensor({c, h, h}, rng, 1.5, false);
        auto [rv, e] = erm.forward(v, true);
        CHECK(max_abs_diff(erm.invert(rv, true), v) < 1e-5);
    }
}

TEST_CASE("deliberately zeroed psi_b output raises a singularity error") {
    Rng rng(305);
    Erm erm(4, 1, rng);
    // zero the final bn scale so psi_b emits exactly zero everywhere
    std::fill(erm.psi_b.bns[0].gamma.vec().begin(), erm.psi_b.bns[0].gamma.vec().end(), 0.0);
    Tensor v = random_tensor({4, 3, 3}, rng, 1.0, false);
    auto [rv, e] = erm.forward(v, true);
    for (double x : rv.vec()) CHECK(std::isfinite(x)); // forward never divides
    CHECK_THROWS_AS(erm.invert(rv, true), SingularityError);
}

TEST_CASE("tampering psi parameters between forward and invert breaks recovery") {
    Rng rng(307);
    Erm erm(8, 2, rng);
    Tensor v = random_tensor({8, 4, 4}, rng, 1.0, false);
    auto [rv, e] = erm.forward(v, true);
    erm.psi_a.convs[0].w.vec()[0] += 0.5;
    CHECK(max_abs_diff(erm.invert(rv, true), v) > 1e-3);
}

TEST_CASE("egrm gate limits: zero gate passes the residual, unit gate doubles it") {
    Rng rng(309);
    Egrm egrm(4, 2, rng);
    Tensor u = random_tensor({4, 3, 3}, rng, 1.0, false);
    Tensor e_neg = Tensor::full({1, 3, 3}, -1e9);
    Tensor e_pos = Tensor::full({1, 3, 3}, 1e9);
    auto [m_lo, carry_lo] = egrm.forward(u, e_neg, true);
    auto [m_hi, carry_hi] = egrm.forward(u, e_pos, true);
    for (int64_t i = 0; i < carry_lo.size(); ++i)
        CHECK(carry_hi.vec()[i] == doctest::Approx(2.0 * carry_lo.vec()[i]).epsilon(1e-9));
}

TEST_CASE("egrm matches a naive loop composition of its stages") {
    Rng rng(311);
    int64_t c = 4, h = 3, w = 3;
    Egrm egrm(c, 1, rng);
    Tensor u = random_tensor({c, h, w}, rng, 1.0, false);
    Tensor e = random_tensor({1, h, w}, rng, 1.0, false);
    auto [m, carry] = egrm.forward(u, e, true);

    auto run_psi = [&](PsiBlock& psi, const std::vector<double>& x) {
        auto conv = oracle::loop_conv2d(x, c, h, w, psi.convs[0].w.vec(), c, 3, 3,
                                        psi.convs[0].b.vec(), 1, 1);
        auto act = oracle::loop_relu(conv);
        return oracle::loop_bn_train(act, c, h * w, psi.bns[0].gamma.vec(),
                                     psi.bns[0].beta.vec(), BatchNorm2d::kEps);
    };
    auto inner = run_psi(egrm.psi_d, run_psi(egrm.psi_e, u.vec()));
    std::vector<double> pre(u.size());
    for (int64_t i = 0; i < u.size(); ++i) pre[i] = u.vec()[i] + inner[i];
    auto ur = run_psi(egrm.psi_c, pre);
    auto gate = oracle::loop_sigmoid(e.vec());
    std::vector<double> m_feat(ur.size());
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t p = 0; p < h * w; ++p)
            m_feat[ci * h * w + p] = ur[ci * h * w + p] * gate[p] + ur[ci * h * w + p];
    auto m_ref = oracle::loop_conv2d(m_feat, c, h, w, egrm.mask_head.w.vec(), 1, 1, 1,
                                     egrm.mask_head.b.vec(), 1, 0);
    for (int64_t i = 0; i < carry.size(); ++i)
        CHECK(carry.vec()[i] == doctest::Approx(m_feat[i]).epsilon(1e-12));
    for (int64_t i = 0; i < m.size(); ++i)
        CHECK(m.vec()[i] == doctest::Approx(m_ref[i]).epsilon(1e-12));
}

TEST_CASE("decoder emits maps at doubling grids with finite logits") {
    Rng rng(313);
    Red red(6, 8, 2, rng);
    Tensor o = random_tensor({6, 4, 4}, rng, 1.0, false);
    std::array<Tensor, 4> compressed = {
        random_tensor({8, 32, 32}, rng, 1.0, false),
        random_tensor({8, 16, 16}, rng, 1.0, false),
        random_tensor({8, 8, 8}, rng, 1.0, false),
        random_tensor({8, 4, 4}, rng, 1.0, false),
    };
    auto outs = red.decode(o, compressed, true);
    int64_t expect = 4;
    for (int i = 0; i < 4; ++i) {
        CHECK(outs[i].e.shape() == Shape{1, expect, expect});
        CHECK(outs[i].m.shape() == Shape{1, expect, expect});
        CHECK(outs[i].carry.dim(0) == 8);
        for (double v : outs[i].e.vec()) CHECK(std::isfinite(v));
        for (double v : outs[i].m.vec()) CHECK(std::isfinite(v));
        expect *= 2;
    }
}

TEST_CASE("every decoder output receives gradient from the loss") {
    Rng rng(315);
    Red red(4, 4, 1, rng);
    Tensor o = random_tensor({4, 2, 2}, rng);
    std::array<Tensor, 4> compressed = {
        random_tensor({4, 16, 16}, rng), random_tensor({4, 8, 8}, rng),
        random_tensor({4, 4, 4}, rng), random_tensor({4, 2, 2}, rng)};
    std::vector<double> gv(16 * 16, 0.0);
    for (int i = 4; i < 10; ++i)
        for (int j = 4; j < 10; ++j) gv[i * 16 + j] = 1.0;
    Tensor g = Tensor::from_data({16, 16}, gv);

    ParamList ps;
    red.params("red", ps);
    for (auto& p : ps) p.tensor.zero_grad();
    auto outs = red.decode(o, compressed, true);
    Tensor loss = total_loss(outs, g);
    loss.backward();
    // every block's heads must be live: their parameters see nonzero grads
    for (int b = 0; b < 4; ++b) {
        auto grad_norm = [](const Tensor& t) {
            if (!t.has_grad()) return 0.0;
            double s = 0.0;
            for (double v : t.grad()) s += std::abs(v);
            return s;
        };
        CHECK(grad_norm(red.blocks[b].erm.edge_head.w) > 0.0);
        CHECK(grad_norm(red.blocks[b].egrm.mask_head.w) > 0.0);
    }
}

TEST_CASE("decoder end-to-end gradients pass fd checks at tiny dims") {
    Rng rng(317);
    Red red(2, 2, 1, rng);
    Tensor o = random_tensor({2, 2, 2}, rng);
    std::array<Tensor, 4> compressed = {
        random_tensor({2, 16, 16}, rng), random_tensor({2, 8, 8}, rng),
        random_tensor({2, 4, 4}, rng), random_tensor({2, 2, 2}, rng)};
    auto build = [&]() {
        auto outs = red.decode(o, compressed, true);
        Tensor acc;
        for (auto& blk : outs) {
            Tensor term = add(sum(mul(blk.m, blk.m)), sum(mul(blk.e, blk.e)));
            acc = acc.defined() ? add(acc, term) : term;
        }
        return acc;
    };
    ParamList ps;
    red.params("red", ps);
    std::vector<Tensor> inputs = {o};
    for (auto& p : ps)
        if (p.is_param) inputs.push_back(p.tensor);
    auto r = grad_check(build, inputs, 1e-6, 6);
    CHECK(r.max_rel_err < 1e-4);
    CHECK(r.n_checked >= 100);
}

TEST_CASE("plain decoder emits masks without boundary maps") {
    Rng rng(319);
    PlainDecoder dec(4, 4, 1, rng);
    Tensor o = random_tensor({4, 2, 2}, rng, 1.0, false);
    std::array<Tensor, 4> compressed = {
        random_tensor({4, 16, 16}, rng, 1.0, false), random_tensor({4, 8, 8}, rng, 1.0, false),
        random_tensor({4, 4, 4}, rng, 1.0, false), random_tensor({4, 2, 2}, rng, 1.0, false)};
    auto outs = dec.decode(o, compressed, true);
    int64_t expect = 2;
    for (auto& blk : outs) {
        CHECK_FALSE(blk.e.defined());
        CHECK(blk.m.shape() == Shape{1, expect, expect});
        expect *= 2;
    }
}
