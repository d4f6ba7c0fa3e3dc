#include <doctest.h>

#include <cmath>

#include "cmb/nn.hpp"
#include "test_util.hpp"

using namespace cmb;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("batchnorm training normalizes each channel") {
    Rng rng(701);
    BatchNorm2d bn(3);
    Tensor x = random_tensor({3, 4, 4}, rng, 2.0, false);
    Tensor y = bn.forward(x, true);
    for (int64_t c = 0; c < 3; ++c) {
        double m = 0.0, v = 0.0;
        for (int64_t i = 0; i < 16; ++i) m += y.vec()[c * 16 + i];
        m /= 16.0;
        for (int64_t i = 0; i < 16; ++i) {
            double d = y.vec()[c * 16 + i] - m;
            v += d * d;
        }
        v /= 16.0;
        CHECK(std::abs(m) < 1e-10);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-3)); // eps shifts variance slightly
    }
}

TEST_CASE("batchnorm training gradients pass fd checks") {
    Rng rng(703);
    BatchNorm2d bn(3);
    for (auto& v : bn.gamma.vec()) v = 0.5 + rng.uniform();
    for (auto& v : bn.beta.vec()) v = rng.normal();
    Tensor x = random_tensor({3, 4, 4}, rng);
    auto build = [&]() {
        Tensor y = bn.forward(x, true);
        return sum(mul(y, sigmoid(y)));
    };
    auto r = grad_check(build, {x, bn.gamma, bn.beta});
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("batchnorm eval is a deterministic affine map") {
    Rng rng(705);
    BatchNorm2d bn(4);
    // warm the running stats
    for (int i = 0; i < 5; ++i) bn.forward(random_tensor({4, 3, 3}, rng, 1.5, false), true);
    Tensor x = random_tensor({4, 3, 3}, rng, 1.0, false);
    Tensor y1 = bn.forward(x, false);
    Tensor y2 = bn.forward(x, false);
    for (int64_t i = 0; i < y1.size(); ++i) CHECK(y1.vec()[i] == y2.vec()[i]);
    // affine in x: bn(2x) - bn(x) == bn(3x) - bn(2x)
    Tensor y2x = bn.forward(mul_scalar(x, 2.0), false);
    Tensor y3x = bn.forward(mul_scalar(x, 3.0), false);
    for (int64_t i = 0; i < x.size(); ++i)
        CHECK(y2x.vec()[i] - y1.vec()[i] ==
              doctest::Approx(y3x.vec()[i] - y2x.vec()[i]).epsilon(1e-9));
}

TEST_CASE("batchnorm running averages follow the momentum update") {
    Rng rng(707);
    BatchNorm2d bn(2);
    Tensor x = random_tensor({2, 3, 3}, rng, 1.0, false);
    std::vector<double> mu(2), var(2);
    {
        // recompute expected batch stats by hand
        for (int64_t c = 0; c < 2; ++c) {
            double m = 0.0;
            for (int64_t i = 0; i < 9; ++i) m += x.vec()[c * 9 + i];
            m /= 9.0;
            double v = 0.0;
            for (int64_t i = 0; i < 9; ++i) {
                double d = x.vec()[c * 9 + i] - m;
                v += d * d;
            }
            mu[c] = m;
            var[c] = v / 9.0;
        }
    }
    bn.forward(x, true);
    for (int64_t c = 0; c < 2; ++c) {
        CHECK(bn.running_mean.vec()[c] == doctest::Approx(0.1 * mu[c]).epsilon(1e-12));
        CHECK(bn.running_var.vec()[c] ==
              doctest::Approx(0.9 * 1.0 + 0.1 * var[c]).epsilon(1e-12));
    }
}

TEST_CASE("psi block keeps width and passes gradients") {
    Rng rng(709);
    PsiBlock psi(3, 2, rng);
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor y = psi.forward(x, true);
    REQUIRE(y.shape() == x.shape());
    auto build = [&]() { return sum(mul(psi.forward(x, true), x)); };
    ParamList ps;
    psi.params("psi", ps);
    std::vector<Tensor> inputs = {x};
    for (auto& p : ps)
        if (p.is_param) inputs.push_back(p.tensor);
    auto r = grad_check(build, inputs, 1e-6, 10);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("linear layers handle vectors and token rows") {
    Rng rng(711);
    Linear l(4, 3, rng);
    Tensor v = random_tensor({4}, rng, 1.0, false);
    Tensor rows = random_tensor({5, 4}, rng, 1.0, false);
    Tensor y1 = l.forward(v);
    Tensor y2 = l.forward(rows);
    REQUIRE(y1.shape() == Shape{3});
    REQUIRE(y2.shape() == Shape{5, 3});
    for (int64_t o = 0; o < 3; ++o) {
        double expect = l.b.vec()[o];
        for (int64_t i = 0; i < 4; ++i) expect += l.w.at({o, i}) * v.vec()[i];
        CHECK(y1.vec()[o] == doctest::Approx(expect).epsilon(1e-12));
    }
    Linear nb(4, 3, rng, /*with_bias=*/false);
    CHECK_FALSE(nb.b.defined());
    Tensor z = nb.forward(Tensor::zeros({2, 4}));
    for (double val : z.vec()) CHECK(val == 0.0);
}

TEST_CASE("parameter registries expose unique names") {
    Rng rng(713);
    PsiBlock psi(2, 2, rng);
    ParamList ps;
    psi.params("psi", ps);
    for (size_t i = 0; i < ps.size(); ++i)
        for (size_t j = i + 1; j < ps.size(); ++j) CHECK(ps[i].name != ps[j].name);
}
