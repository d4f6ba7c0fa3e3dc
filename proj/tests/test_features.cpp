#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cmb/features.hpp"
#include "cmb/serialize.hpp"
#include "test_util.hpp"

using namespace cmb;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("pyramid shapes halve per level for the default channel plan") {
    Rng rng(601);
    FeatureChannels ch;
    StubVisualEncoder enc(ch, rng);
    Tensor img = random_tensor({3, 64, 64}, rng, 1.0, false);
    FeaturePyramid p = enc.forward(img);
    CHECK(p.l1.shape() == Shape{8, 32, 32});
    CHECK(p.l2.shape() == Shape{16, 16, 16});
    CHECK(p.l3.shape() == Shape{24, 8, 8});
    CHECK(p.l4.shape() == Shape{32, 4, 4});
}

TEST_CASE("pyramid shape contract holds across random valid sizes") {
    Rng rng(603);
    FeatureChannels ch;
    StubVisualEncoder enc(ch, rng);
    for (int trial = 0; trial < 4; ++trial) {
        int64_t h = 16 * rng.uniform_int(1, 5);
        int64_t w = 16 * rng.uniform_int(1, 5);
        FeaturePyramid p = enc.forward(random_tensor({3, h, w}, rng, 1.0, false));
        CHECK(p.l1.shape() == Shape{8, h / 2, w / 2});
        CHECK(p.l2.shape() == Shape{16, h / 4, w / 4});
        CHECK(p.l3.shape() == Shape{24, h / 8, w / 8});
        CHECK(p.l4.shape() == Shape{32, h / 16, w / 16});
    }
}

TEST_CASE("indivisible input dims are rejected") {
    Rng rng(605);
    StubVisualEncoder enc(FeatureChannels{}, rng);
    CHECK_THROWS_AS(enc.forward(Tensor::zeros({3, 60, 64})), ShapeError);
    CHECK_THROWS_AS(enc.forward(Tensor::zeros({3, 64, 40})), ShapeError);
}

TEST_CASE("same seed and image give a bitwise-identical pyramid") {
    Rng rng_img(607);
    Tensor img = random_tensor({3, 32, 32}, rng_img, 1.0, false);
    Rng a(99), b(99);
    StubVisualEncoder enc_a(FeatureChannels{}, a);
    StubVisualEncoder enc_b(FeatureChannels{}, b);
    FeaturePyramid pa = enc_a.forward(img);
    FeaturePyramid pb = enc_b.forward(img);
    for (int64_t i = 0; i < pa.l4.size(); ++i) CHECK(pa.l4.vec()[i] == pb.l4.vec()[i]);
    for (int64_t i = 0; i < pa.l1.size(); ++i) CHECK(pa.l1.vec()[i] == pb.l1.vec()[i]);
}

TEST_CASE("zero image through zero-initialized convs yields an all-zero pyramid") {
    Rng rng(609);
    StubVisualEncoder enc(FeatureChannels{}, rng);
    ParamList ps;
    enc.params("enc", ps);
    for (auto& p : ps) std::fill(p.tensor.vec().begin(), p.tensor.vec().end(), 0.0);
    FeaturePyramid p = enc.forward(Tensor::zeros({3, 32, 32}));
    for (const Tensor* level : {&p.l1, &p.l2, &p.l3, &p.l4})
        for (double v : level->vec()) CHECK(v == 0.0);
}

TEST_CASE("fuse_to_l5 lands on l4's grid with the configured channel count") {
    Rng rng(611);
    FeatureChannels ch;
    StubVisualEncoder enc(ch, rng);
    PyramidFuser fuser(ch, rng);
    FeaturePyramid p = enc.forward(random_tensor({3, 64, 64}, rng, 1.0, false));
    Tensor l5 = fuser.forward(p.l2, p.l3, p.l4, true);
    CHECK(l5.shape() == Shape{32, 4, 4});
}

TEST_CASE("fuse_to_l5 with zeroed parameters maps zero inputs to zero") {
    Rng rng(613);
    FeatureChannels ch;
    PyramidFuser fuser(ch, rng);
    ParamList ps;
    fuser.params("fuser", ps);
    for (auto& p : ps)
        if (p.name.find("running_var") == std::string::npos)
            std::fill(p.tensor.vec().begin(), p.tensor.vec().end(), 0.0);
    Tensor l5 = fuser.forward(Tensor::zeros({16, 16, 16}), Tensor::zeros({24, 8, 8}),
                              Tensor::zeros({32, 4, 4}), true);
    for (double v : l5.vec()) CHECK(v == 0.0);
}

TEST_CASE("gradient flows from l5 to all three pyramid inputs") {
    Rng rng(615);
    FeatureChannels ch{4, 6, 8, 10, 12};
    PyramidFuser fuser(ch, rng);
    Tensor l2 = random_tensor({6, 8, 8}, rng);
    Tensor l3 = random_tensor({8, 4, 4}, rng);
    Tensor l4 = random_tensor({10, 2, 2}, rng);
    auto build = [&]() {
        Tensor l5 = fuser.forward(l2, l3, l4, true);
        return sum(mul(l5, l5));
    };
    auto r = grad_check(build, {l2, l3, l4}, 1e-6, 20);
    CHECK(r.max_rel_err < 1e-4);

    l2.zero_grad();
    l3.zero_grad();
    l4.zero_grad();
    build().backward();
    for (const Tensor* t : {&l2, &l3, &l4}) {
        double norm = 0.0;
        for (double v : t->grad()) norm += std::abs(v);
        CHECK(norm > 0.0);
    }
}

TEST_CASE("text features load from rank-2 containers and reject others") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "cmb_features_test";
    fs::create_directories(dir);
    Rng rng(617);
    Tensor t = Tensor::randn({5, 16}, rng);
    save_tensor((dir / "t.cmbt").string(), t);
    TextFeatures tf = load_text_features((dir / "t.cmbt").string());
    CHECK(tf.t.shape() == Shape{5, 16});

    save_tensor((dir / "bad.cmbt").string(), Tensor::randn({5, 4, 4}, rng));
    CHECK_THROWS_AS(load_text_features((dir / "bad.cmbt").string()), FormatError);
}

TEST_CASE("synthesized text is deterministic per seed and geometry") {
    MaskGeometry g{0.4, 0.6, 0.2, 0.3, 0.05};
    TextFeatures a = synth_text_features(g, 4, 8, 42);
    TextFeatures b = synth_text_features(g, 4, 8, 42);
    REQUIRE(a.t.shape() == Shape{4, 8});
    for (int64_t i = 0; i < a.t.size(); ++i) CHECK(a.t.vec()[i] == b.t.vec()[i]);
    TextFeatures c = synth_text_features(g, 4, 8, 43);
    bool differs = false;
    for (int64_t i = 0; i < a.t.size(); ++i)
        if (a.t.vec()[i] != c.t.vec()[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("matched and mismatched text separate under a logistic probe") {
    // 200 samples; features are the absolute residuals between the received
    // text and the projection of the true geometry. Matched residuals are
    // pure noise, mismatched ones carry the geometry gap.
    const int n_samples = 200, n_tokens = 4, d_text = 8;
    const int dim = n_tokens * d_text;
    Rng rng(619);
    auto proj = text_projection(n_tokens, d_text);
    std::vector<std::vector<double>> feats;
    std::vector<double> labels;
    for (int i = 0; i < n_samples; ++i) {
        MaskGeometry true_geo{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                              rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5),
                              rng.uniform(0.02, 0.3)};
        bool matched = i % 2 == 0;
        MaskGeometry used = true_geo;
        if (!matched)
            used = MaskGeometry{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5),
                                rng.uniform(0.02, 0.3)};
        TextFeatures tf = synth_text_features(used, n_tokens, d_text, 1000 + i);
        double truth[5] = {true_geo.cx, true_geo.cy, true_geo.ext_w, true_geo.ext_h,
                           true_geo.area};
        std::vector<double> f(dim);
        for (int j = 0; j < dim; ++j) {
            double expect = 0.0;
            for (int q = 0; q < 5; ++q) expect += proj[j * 5 + q] * truth[q];
            f[j] = std::abs(tf.t.vec()[j] - expect);
        }
        feats.push_back(std::move(f));
        labels.push_back(matched ? 0.0 : 1.0);
    }
    // plain logistic regression by gradient descent
    std::vector<double> w(dim, 0.0);
    double bias = 0.0;
    for (int epoch = 0; epoch < 300; ++epoch) {
        for (int i = 0; i < n_samples; ++i) {
            double z = bias;
            for (int j = 0; j < dim; ++j) z += w[j] * feats[i][j];
            double p = 1.0 / (1.0 + std::exp(-z));
            double err = p - labels[i];
            for (int j = 0; j < dim; ++j) w[j] -= 0.5 * err * feats[i][j];
            bias -= 0.5 * err;
        }
    }
    int correct = 0;
    for (int i = 0; i < n_samples; ++i) {
        double z = bias;
        for (int j = 0; j < dim; ++j) z += w[j] * feats[i][j];
        if ((z > 0.0) == (labels[i] > 0.5)) ++correct;
    }
    CHECK(static_cast<double>(correct) / n_samples > 0.9);
}
