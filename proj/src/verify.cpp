#include "cmb/verify.hpp"

#include <cmath>
#include <filesystem>
#include <functional>

#include <json.hpp>

#include "cmb/features.hpp"
#include "cmb/itcam.hpp"
#include "cmb/itim.hpp"
#include "cmb/losses.hpp"
#include "cmb/oracle.hpp"
#include "cmb/red.hpp"
#include "cmb/serialize.hpp"

namespace cmb {

namespace {

// Worst relative error of analytic gradients against central differences over
// a strided subsample of coordinates.
double gradcheck_worst(const std::function<Tensor()>& build, std::vector<Tensor> inputs,
                       int64_t max_coords) {
    for (auto& t : inputs) t.zero_grad();
    build().backward();
    double worst = 0.0;
    auto f = [&]() { return build().item(); };
    for (auto& t : inputs) {
        std::vector<double> analytic =
            t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0);
        int64_t stride = 1;
        if (max_coords > 0 && t.size() > max_coords) stride = t.size() / max_coords;
        for (int64_t i = 0; i < t.size(); i += stride) {
            auto fd = oracle::fd_gradient(f, {t.data() + i});
            worst = std::max(worst, oracle::rel_error(analytic[i], fd[0]));
        }
    }
    return worst;
}

Tensor rand_grad(Shape shape, Rng& rng, double scale = 1.0) {
    return Tensor::randn(std::move(shape), rng, scale).set_requires_grad(true);
}

} // namespace

std::vector<CheckResult> run_verification(uint64_t seed) {
    std::vector<CheckResult> checks;
    auto record = [&](const std::string& name, double metric, double tol, bool lower_is_pass) {
        checks.push_back({name, lower_is_pass ? metric <= tol : metric >= tol, metric, tol});
    };

    { // primitive gradients
        Rng rng(Rng::mix(seed, 1));
        Tensor x = rand_grad({3, 4, 4}, rng);
        Tensor w = rand_grad({2, 3, 3, 3}, rng, 0.5);
        Tensor b = rand_grad({2}, rng, 0.5);
        double worst = gradcheck_worst(
            [&]() {
                Tensor y = reshape(conv2d(x, w, b, 1, 1), {2, 16});
                return sum(mul(sigmoid(y), softmax(y, 1)));
            },
            {x, w, b}, 30);
        record("gradcheck-primitives", worst, 1e-4, true);
    }
    { // itcam gradients
        Rng rng(Rng::mix(seed, 2));
        AmbiguityGate gate(6, 4, 5, 4, 3, rng);
        Tensor l5 = rand_grad({6, 2, 2}, rng);
        Tensor text = rand_grad({4, 5}, rng);
        double worst = gradcheck_worst(
            [&]() {
                AmbiguityResult r = gate.forward(text, l5, nullptr);
                return add(sum(mul(r.t_a, r.t_a)), r.a);
            },
            {l5, text}, 20);
        record("gradcheck-itcam", worst, 1e-4, true);
    }
    { // itim gradients
        Rng rng(Rng::mix(seed, 3));
        Itim m(3, 4, rng);
        for (auto& v : m.gamma.w.vec()) v = rng.normal(0.0, 0.5);
        for (auto& v : m.theta.w.vec()) v = rng.normal(0.0, 0.5);
        m.w1.vec()[0] = 0.3;
        m.w2.vec()[0] = -0.2;
        Tensor l5 = rand_grad({3, 2, 2}, rng);
        Tensor t = rand_grad({3, 4}, rng);
        double worst = gradcheck_worst(
            [&]() {
                InteractionState s = m.forward(l5, t);
                return sum(mul(s.o, s.o));
            },
            {l5, t}, 20);
        record("gradcheck-itim", worst, 1e-4, true);
    }
    { // red gradients
        Rng rng(Rng::mix(seed, 4));
        Red red(2, 2, 1, rng);
        Tensor o = rand_grad({2, 2, 2}, rng);
        std::array<Tensor, 4> compressed = {rand_grad({2, 16, 16}, rng),
                                            rand_grad({2, 8, 8}, rng), rand_grad({2, 4, 4}, rng),
                                            rand_grad({2, 2, 2}, rng)};
        double worst = gradcheck_worst(
            [&]() {
                auto outs = red.decode(o, compressed, true);
                Tensor acc;
                for (auto& blk : outs) {
                    Tensor term = add(sum(mul(blk.m, blk.m)), sum(mul(blk.e, blk.e)));
                    acc = acc.defined() ? add(acc, term) : term;
                }
                return acc;
            },
            {o}, 8);
        record("gradcheck-red", worst, 1e-4, true);
    }
    { // loss gradients
        Rng rng(Rng::mix(seed, 5));
        std::array<DecoderBlockOutput, 4> outs;
        std::vector<Tensor> inputs;
        int64_t grid = 2;
        for (int i = 0; i < 4; ++i) {
            outs[i].m = rand_grad({1, grid, grid}, rng);
            outs[i].e = rand_grad({1, grid, grid}, rng);
            inputs.push_back(outs[i].m);
            inputs.push_back(outs[i].e);
            grid *= 2;
        }
        std::vector<double> gv(16 * 16, 0.0);
        for (int i = 5; i < 11; ++i)
            for (int j = 3; j < 10; ++j) gv[i * 16 + j] = 1.0;
        Tensor g = Tensor::from_data({16, 16}, gv);
        double worst =
            gradcheck_worst([&]() { return total_loss(outs, g); }, inputs, 16);
        record("gradcheck-losses", worst, 1e-4, true);
    }
    { // coupling invertibility
        double worst = 0.0;
        for (int trial = 0; trial < 25; ++trial) {
            Rng rng(Rng::mix(seed, 600 + trial));
            Erm erm(8, 2, rng);
            Tensor v = Tensor::randn({8, 4, 4}, rng);
            auto [rv, e] = erm.forward(v, true);
            Tensor back = erm.invert(rv, true);
            for (int64_t i = 0; i < v.size(); ++i)
                worst = std::max(worst, std::abs(back.vec()[i] - v.vec()[i]));
        }
        record("erm-invertibility", worst, 1e-5, true);
    }
    { // negative control: tampered psi parameters must break recovery
        Rng rng(Rng::mix(seed, 7));
        Erm erm(8, 2, rng);
        Tensor v = Tensor::randn({8, 4, 4}, rng);
        auto [rv, e] = erm.forward(v, true);
        erm.psi_a.convs[0].w.vec()[0] += 0.5;
        Tensor back = erm.invert(rv, true);
        double worst = 0.0;
        for (int64_t i = 0; i < v.size(); ++i)
            worst = std::max(worst, std::abs(back.vec()[i] - v.vec()[i]));
        record("erm-invertibility-negative-control", worst, 1e-5, false);
    }
    { // knn against the exhaustive oracle
        int mismatches = 0;
        for (int trial = 0; trial < 50; ++trial) {
            Rng rng(Rng::mix(seed, 800 + trial));
            int c = 6 + static_cast<int>(rng.uniform_int(0, 20));
            Tensor s = Tensor::randn({c, c}, rng);
            for (int k : {1, 3, c - 1}) {
                auto got = knn_neighbors(s, k);
                auto ref = oracle::knn_exhaustive(s.vec(), c, c, k);
                for (int n = 0; n < c; ++n)
                    for (int j = 0; j < k; ++j)
                        if (got.idx[n][j] != ref.idx[n][j]) ++mismatches;
            }
        }
        record("knn-exhaustive-oracle", mismatches, 0.0, true);
    }
    { // closed-form kl against monte carlo
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Rng rng(Rng::mix(seed, 900 + trial));
            int64_t d = 8;
            GaussianLatent p, q;
            p.mu = Tensor::randn({d}, rng);
            q.mu = Tensor::randn({d}, rng);
            p.sigma = Tensor::zeros({d});
            q.sigma = Tensor::zeros({d});
            for (int64_t i = 0; i < d; ++i) {
                p.sigma.vec()[i] = 0.3 + rng.uniform();
                q.sigma.vec()[i] = 0.3 + rng.uniform();
            }
            auto [kl_pq, kl_qp] = symmetric_kl(p, q);
            auto mc = oracle::mc_kl(p.mu.vec(), p.sigma.vec(), q.mu.vec(), q.sigma.vec(),
                                    200000, Rng::mix(seed, 950 + trial));
            worst = std::max(worst, std::abs(kl_pq.item() - mc.mean) / mc.std_err);
        }
        record("kl-monte-carlo", worst, 3.0, true);
    }
    { // softmax rows
        Rng rng(Rng::mix(seed, 10));
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            Tensor x = Tensor::randn({5, 7}, rng, 5.0);
            Tensor s = softmax(x, 1);
            for (int64_t r = 0; r < 5; ++r) {
                double total = 0.0;
                for (int64_t j = 0; j < 7; ++j) total += s.at({r, j});
                worst = std::max(worst, std::abs(total - 1.0));
            }
        }
        record("softmax-row-sums", worst, 1e-12, true);
    }
    { // concat/split identity
        Rng rng(Rng::mix(seed, 11));
        double worst = 0.0;
        Tensor a = Tensor::randn({3, 4, 2}, rng);
        Tensor b = Tensor::randn({5, 4, 2}, rng);
        auto parts = split(concat({a, b}, 0), 0, {3, 5});
        for (int64_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(parts[0].vec()[i] - a.vec()[i]));
        for (int64_t i = 0; i < b.size(); ++i)
            worst = std::max(worst, std::abs(parts[1].vec()[i] - b.vec()[i]));
        record("concat-split-identity", worst, 0.0, true);
    }
    { // ambiguity bounds
        Rng rng(Rng::mix(seed, 12));
        AmbiguityGate gate(8, 4, 6, 5, 10, rng);
        double lo = 1.0, hi = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            Tensor l5 = Tensor::randn({8, 2, 2}, rng, 2.0);
            Tensor text = Tensor::randn({4, 6}, rng, 2.0);
            double a = gate.forward(text, l5, nullptr).a.item();
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
        bool pass = lo >= 0.5 && hi < 1.0;
        checks.push_back({"ambiguity-bounds", pass, hi, 1.0});
    }
    { // itim residual identity at zero-initialized value paths
        Rng rng(Rng::mix(seed, 13));
        Itim m(5, 4, rng);
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            Tensor l5 = Tensor::randn({5, 2, 3}, rng, 3.0);
            Tensor t = Tensor::randn({4, 4}, rng, 3.0);
            InteractionState s = m.forward(l5, t);
            for (int64_t i = 0; i < l5.size(); ++i)
                worst = std::max(worst, std::abs(s.o.vec()[i] - l5.vec()[i]));
        }
        record("itim-residual-identity", worst, 1e-12, true);
    }
    { // pyramid shape contract
        Rng rng(Rng::mix(seed, 14));
        StubVisualEncoder enc(FeatureChannels{}, rng);
        int violations = 0;
        for (int trial = 0; trial < 5; ++trial) {
            int64_t h = 16 * rng.uniform_int(1, 4);
            int64_t w = 16 * rng.uniform_int(1, 4);
            FeaturePyramid p = enc.forward(Tensor::randn({3, h, w}, rng));
            if (p.l1.shape() != Shape{8, h / 2, w / 2}) ++violations;
            if (p.l2.shape() != Shape{16, h / 4, w / 4}) ++violations;
            if (p.l3.shape() != Shape{24, h / 8, w / 8}) ++violations;
            if (p.l4.shape() != Shape{32, h / 16, w / 16}) ++violations;
        }
        record("pyramid-shapes", violations, 0.0, true);
    }
    { // serialization round trip
        Rng rng(Rng::mix(seed, 15));
        Tensor t = Tensor::randn({3, 5, 2}, rng);
        auto path =
            (std::filesystem::temp_directory_path() / "cmb_verify_roundtrip.cmbt").string();
        save_tensor(path, t);
        Tensor back = load_tensor(path);
        double worst = 0.0;
        for (int64_t i = 0; i < t.size(); ++i)
            worst = std::max(worst, std::abs(back.vec()[i] - t.vec()[i]));
        record("serialization-roundtrip", worst, 0.0, true);
    }
    return checks;
}

int print_report(const std::vector<CheckResult>& checks, std::ostream& os) {
    int failures = 0;
    for (const auto& c : checks) {
        nlohmann::ordered_json j;
        j["name"] = c.name;
        j["status"] = c.pass ? "pass" : "fail";
        j["metric"] = c.metric;
        j["tolerance"] = c.tolerance;
        os << j.dump() << "\n";
        if (!c.pass) ++failures;
    }
    return failures;
}

} // namespace cmb
