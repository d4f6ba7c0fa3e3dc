#include <doctest.h>

#include <cmath>

#include "cmb/losses.hpp"
#include "cmb/oracle.hpp"
#include "cmb/red.hpp"
#include "test_util.hpp"

using namespace cmb;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("saturated perfect prediction drives both mask losses to the floor") {
    std::vector<double> gv = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    Tensor g = Tensor::from_data({4, 4}, gv);
    std::vector<double> logits(16);
    for (int i = 0; i < 16; ++i) logits[i] = gv[i] > 0.5 ? 20.0 : -20.0;
    Tensor x = Tensor::from_data({1, 4, 4}, logits);
    auto [l_bce, l_iou] = weighted_bce_iou(x, g);
    CHECK(l_bce.item() < 1e-6);
    CHECK(l_iou.item() < 1e-6);
}

TEST_CASE("uniform ground truth reduces to the unweighted losses") {
    Rng rng(401);
    Tensor g = Tensor::zeros({5, 5});
    Tensor w = pixel_weights(g);
    for (double v : w.vec()) CHECK(v == doctest::Approx(1.0));
    Tensor x = random_tensor({1, 5, 5}, rng, 1.0, false);
    auto [l_bce, l_iou] = weighted_bce_iou(x, g);
    std::vector<double> ones(25, 1.0);
    auto ref = oracle::loop_weighted_bce_iou(x.vec(), g.vec(), ones);
    CHECK(l_bce.item() == doctest::Approx(ref.bce_w).epsilon(1e-12));
    CHECK(l_iou.item() == doctest::Approx(ref.iou_w).epsilon(1e-12));
}

TEST_CASE("single tampered pixel matches the scalar loop oracle") {
    std::vector<double> gv(16, 0.0);
    gv[5] = 1.0;
    Tensor g = Tensor::from_data({4, 4}, gv);
    Rng rng(403);
    Tensor x = random_tensor({1, 4, 4}, rng, 2.0, false);
    auto [l_bce, l_iou] = weighted_bce_iou(x, g);
    Tensor w = pixel_weights(g);
    auto ref = oracle::loop_weighted_bce_iou(x.vec(), gv, w.vec());
    CHECK(l_bce.item() == doctest::Approx(ref.bce_w).epsilon(1e-12));
    CHECK(l_iou.item() == doctest::Approx(ref.iou_w).epsilon(1e-12));
}

TEST_CASE("non-binary ground truth is rejected") {
    Tensor g = Tensor::full({4, 4}, 0.25);
    Tensor x = Tensor::zeros({1, 4, 4});
    CHECK_THROWS_AS(weighted_bce_iou(x, g), ValueError);
}

TEST_CASE("dice of an identical saturated map stays under the smoothing floor") {
    std::vector<double> gv(32 * 32, 0.0);
    for (int i = 10; i < 20; ++i)
        for (int j = 10; j < 20; ++j) gv[i * 32 + j] = 1.0;
    Tensor g = Tensor::from_data({32, 32}, gv);
    std::vector<double> logits(32 * 32);
    for (size_t i = 0; i < logits.size(); ++i) logits[i] = gv[i] > 0.5 ? 20.0 : -20.0;
    Tensor x = Tensor::from_data({1, 32, 32}, logits);
    CHECK(dice_loss(x, g).item() < 1e-3);
}

TEST_CASE("dice of disjoint balanced maps approaches one") {
    std::vector<double> gv(16, 0.0), logits(16);
    for (int i = 0; i < 8; ++i) gv[i] = 1.0;
    for (int i = 0; i < 16; ++i) logits[i] = gv[i] > 0.5 ? -20.0 : 20.0;
    Tensor g = Tensor::from_data({4, 4}, gv);
    Tensor x = Tensor::from_data({1, 4, 4}, logits);
    CHECK(dice_loss(x, g).item() > 0.8);
}

TEST_CASE("dice matches the scalar loop oracle on random maps") {
    Rng rng(405);
    Tensor x = random_tensor({1, 8, 8}, rng, 2.0, false);
    std::vector<double> gv(64);
    for (auto& v : gv) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    Tensor g = Tensor::from_data({8, 8}, gv);
    double ref = oracle::loop_dice(x.vec(), gv, 1.0);
    CHECK(dice_loss(x, g).item() == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("boundary of an empty mask is empty") {
    Tensor g = Tensor::zeros({6, 6});
    Tensor e = boundary_gt(g);
    for (double v : e.vec()) CHECK(v == 0.0);
}

TEST_CASE("boundary of a single interior pixel is the full 3x3 block") {
    std::vector<double> gv(25, 0.0);
    gv[2 * 5 + 2] = 1.0;
    Tensor g = Tensor::from_data({5, 5}, gv);
    Tensor e = boundary_gt(g);
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 5; ++j) {
            bool in_block = i >= 1 && i <= 3 && j >= 1 && j <= 3;
            CHECK(e.at({i, j}) == (in_block ? 1.0 : 0.0));
        }
}

TEST_CASE("boundary is always contained in the dilated mask") {
    Rng rng(407);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> gv(8 * 8);
        for (auto& v : gv) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
        Tensor g = Tensor::from_data({8, 8}, gv);
        Tensor e = boundary_gt(g);
        for (int64_t i = 0; i < 8; ++i)
            for (int64_t j = 0; j < 8; ++j) {
                if (e.at({i, j}) == 0.0) continue;
                double dil = 0.0;
                for (int64_t di = -1; di <= 1; ++di)
                    for (int64_t dj = -1; dj <= 1; ++dj) {
                        int64_t si = i + di, sj = j + dj;
                        if (si >= 0 && si < 8 && sj >= 0 && sj < 8)
                            dil = std::max(dil, g.at({si, sj}));
                    }
                CHECK(dil == 1.0);
            }
    }
}

TEST_CASE("total loss is the exact sum of its non-negative terms") {
    Rng rng(409);
    std::array<DecoderBlockOutput, 4> outs;
    int64_t grid = 2;
    for (int i = 0; i < 4; ++i) {
        outs[i].m = random_tensor({1, grid, grid}, rng, 1.0, false);
        outs[i].e = random_tensor({1, grid, grid}, rng, 1.0, false);
        grid *= 2;
    }
    std::vector<double> gv(16 * 16, 0.0);
    for (int i = 3; i < 9; ++i)
        for (int j = 5; j < 12; ++j) gv[i * 16 + j] = 1.0;
    Tensor g = Tensor::from_data({16, 16}, gv);
    LossReport report;
    Tensor total = total_loss(outs, g, &report);
    double acc = 0.0;
    for (auto& blk : report.blocks) {
        CHECK(blk.bce_w >= 0.0);
        CHECK(blk.iou_w >= 0.0);
        CHECK(blk.dice >= 0.0);
        acc += blk.bce_w + blk.iou_w + blk.dice;
    }
    CHECK(total.item() == doctest::Approx(acc).epsilon(1e-9));
    CHECK(report.total == doctest::Approx(total.item()));
}

TEST_CASE("loss gradients pass fd checks through all four blocks") {
    Rng rng(411);
    std::array<DecoderBlockOutput, 4> outs;
    std::vector<Tensor> inputs;
    int64_t grid = 2;
    for (int i = 0; i < 4; ++i) {
        outs[i].m = random_tensor({1, grid, grid}, rng);
        outs[i].e = random_tensor({1, grid, grid}, rng);
        inputs.push_back(outs[i].m);
        inputs.push_back(outs[i].e);
        grid *= 2;
    }
    std::vector<double> gv(16 * 16, 0.0);
    for (int i = 6; i < 12; ++i)
        for (int j = 2; j < 9; ++j) gv[i * 16 + j] = 1.0;
    Tensor g = Tensor::from_data({16, 16}, gv);
    auto build = [&]() { return total_loss(outs, g); };
    auto r = grad_check(build, inputs, 1e-6, 30);
    CHECK(r.max_rel_err < 1e-4);
}
