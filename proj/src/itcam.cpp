#include "cmb/itcam.hpp"

#include <algorithm>
#include <cmath>

namespace cmb {

Tensor autocorrelate(const Tensor& x) {
    if (x.rank() != 2)
        throw ShapeError("autocorrelate: need a [C,M] matrix, got " + shape_str(x.shape()));
    return matmul(softmax(x, 1), transpose2d(x));
}

NeighborTable knn_neighbors(const Tensor& s, int k) {
    if (s.rank() != 2) throw ShapeError("knn_neighbors: need rank 2, got " + shape_str(s.shape()));
    int64_t rows = s.dim(0), cols = s.dim(1);
    if (k < 1 || k > rows - 1)
        throw ValueError("knn_neighbors: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(rows - 1) + "]");
    NeighborTable table;
    table.k = k;
    table.idx.resize(rows);
    table.dist.resize(rows);
    const double* d = s.data();
    std::vector<std::pair<double, int>> cand;
    for (int64_t n = 0; n < rows; ++n) {
        cand.clear();
        for (int64_t m = 0; m < rows; ++m) {
            if (m == n) continue;
            double d2 = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
                double diff = d[n * cols + j] - d[m * cols + j];
                d2 += diff * diff;
            }
            cand.push_back({std::sqrt(d2), static_cast<int>(m)});
        }
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });
        for (int j = 0; j < k; ++j) {
            table.idx[n].push_back(cand[j].second);
            table.dist[n].push_back(cand[j].first);
        }
    }
    return table;
}

Tensor knn_pair_features(const Tensor& s, const NeighborTable& table) {
    int64_t c = s.dim(0);
    int64_t cols = s.dim(1);
    if (cols != c)
        throw ShapeError("knn_pair_features: need square S, got " + shape_str(s.shape()));
    int k = table.k;
    int64_t npos = c * k;
    const double* sd = s.data();
    std::vector<double> out(static_cast<size_t>(2 * c * npos));
    for (int64_t n = 0; n < c; ++n) {
        for (int j = 0; j < k; ++j) {
            int64_t m = table.idx[n][j];
            int64_t pos = n * k + j;
            for (int64_t q = 0; q < c; ++q) {
                out[q * npos + pos] = sd[n * c + q] - sd[m * c + q];
                out[(c + q) * npos + pos] = sd[m * c + q];
            }
        }
    }
    auto idx = table.idx;
    return Tensor::make_custom(
        {2 * c, npos}, std::move(out), {s},
        [c, k, npos, idx](const std::vector<double>& g, std::vector<Tensor>& inputs) {
            Tensor& s_in = inputs[0];
            if (!s_in.requires_grad()) return;
            std::vector<double> ds(static_cast<size_t>(c * c), 0.0);
            for (int64_t n = 0; n < c; ++n) {
                for (int j = 0; j < k; ++j) {
                    int64_t m = idx[n][j];
                    int64_t pos = n * k + j;
                    for (int64_t q = 0; q < c; ++q) {
                        double gd = g[q * npos + pos];        // d/d(s_n - d)
                        double gn = g[(c + q) * npos + pos];  // d/d(d)
                        ds[n * c + q] += gd;
                        ds[m * c + q] += gn - gd;
                    }
                }
            }
            s_in.accumulate_grad(ds.data(), static_cast<int64_t>(ds.size()));
        });
}

CentralFeatureHead::CentralFeatureHead(int64_t c, int64_t d_central, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(2 * c));
    w = Tensor::randn({d_central, 2 * c}, rng, std).set_requires_grad(true);
    b = Tensor::zeros({d_central}).set_requires_grad(true);
}

Tensor CentralFeatureHead::forward(const Tensor& s, const NeighborTable& table) const {
    Tensor p = knn_pair_features(s, table);
    Tensor mapped = add_channels(matmul(w, p), b);
    return global_maxpool(mapped);
}

void CentralFeatureHead::params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
}

GaussianHead::GaussianHead(int64_t d_in, int64_t d_z, Rng& rng)
    : mu_head(d_in, d_z, rng), sigma_head(d_in, d_z, rng) {
    // start both modalities near the same latent (mu ~ 0, sigma ~ softplus(0))
    // so the gate opens at a ~ 0.5 instead of saturating before training
    for (auto& v : mu_head.w.vec()) v *= 0.02;
    for (auto& v : sigma_head.w.vec()) v *= 0.02;
}

GaussianLatent GaussianHead::forward(const Tensor& c, Rng* eps_rng) const {
    GaussianLatent g;
    g.mu = mu_head.forward(c);
    g.sigma = add_scalar(softplus(sigma_head.forward(c)), kSigmaFloor);
    int64_t dz = g.mu.dim(0);
    g.eps.assign(static_cast<size_t>(dz), 0.0);
    if (eps_rng)
        for (auto& e : g.eps) e = eps_rng->normal();
    Tensor eps_t = Tensor::from_data({dz}, g.eps);
    g.z = add(g.mu, mul(g.sigma, eps_t));
    return g;
}

void GaussianHead::params(const std::string& prefix, ParamList& out) {
    mu_head.params(prefix + ".mu", out);
    sigma_head.params(prefix + ".sigma", out);
}

std::pair<Tensor, Tensor> symmetric_kl(const GaussianLatent& p, const GaussianLatent& q) {
    if (p.mu.shape() != q.mu.shape())
        throw ShapeError("symmetric_kl: latent widths differ, " + shape_str(p.mu.shape()) +
                         " vs " + shape_str(q.mu.shape()));
    for (double v : p.sigma.vec())
        if (!(v > 0.0)) throw ValueError("symmetric_kl: non-positive sigma");
    for (double v : q.sigma.vec())
        if (!(v > 0.0)) throw ValueError("symmetric_kl: non-positive sigma");
    auto kl = [](const GaussianLatent& a, const GaussianLatent& b) {
        Tensor ratio = cmb::log(div(b.sigma, a.sigma));
        Tensor dmu = sub(a.mu, b.mu);
        Tensor num = add(mul(a.sigma, a.sigma), mul(dmu, dmu));
        Tensor den = mul_scalar(mul(b.sigma, b.sigma), 2.0);
        return sum(add(ratio, add_scalar(div(num, den), -0.5)));
    };
    return {kl(p, q), kl(q, p)};
}

Tensor ambiguity_from_kl(const Tensor& kl_vt, const Tensor& kl_tv) {
    Tensor m = mul_scalar(add(kl_vt, kl_tv), 0.5);
    // saturate the averaged KL so a stays strictly below 1 in double
    // precision; sigmoid(30) is within 1e-13 of the uncapped value
    Tensor capped = sub(m, relu(add_scalar(m, -30.0)));
    return sigmoid(capped);
}

AmbiguityGate::AmbiguityGate(int64_t c_img, int64_t n_tokens, int64_t d_central, int64_t d_z,
                             int k_, Rng& rng)
    : img_central(c_img, d_central, rng),
      txt_central(n_tokens, d_central, rng),
      img_gauss(d_central, d_z, rng),
      txt_gauss(d_central, d_z, rng),
      k(k_) {}

AmbiguityResult AmbiguityGate::forward(const Tensor& text, const Tensor& l5,
                                       Rng* eps_rng) const {
    if (l5.rank() != 3)
        throw ShapeError("ambiguity_gate: L5 must be [C,H,W], got " + shape_str(l5.shape()));
    int64_t c = l5.dim(0);
    Tensor x_img = reshape(l5, {c, l5.dim(1) * l5.dim(2)});
    Tensor s_v = autocorrelate(x_img);
    int k_img = static_cast<int>(std::min<int64_t>(k, c - 1));
    Tensor central_v = img_central.forward(s_v, knn_neighbors(s_v, k_img));

    Tensor s_t = autocorrelate(text); // text rows act as the channel axis
    int k_txt = static_cast<int>(std::min<int64_t>(k, text.dim(0) - 1));
    Tensor central_t = txt_central.forward(s_t, knn_neighbors(s_t, k_txt));

    AmbiguityResult r;
    r.g_v = img_gauss.forward(central_v, eps_rng);
    r.g_t = txt_gauss.forward(central_t, eps_rng);
    auto [kl_vt, kl_tv] = symmetric_kl(r.g_v, r.g_t);
    r.kl_vt = kl_vt;
    r.kl_tv = kl_tv;
    r.a = ambiguity_from_kl(kl_vt, kl_tv);
    r.t_a = scale_by(text, rsub_scalar(r.a, 1.0));
    return r;
}

void AmbiguityGate::params(const std::string& prefix, ParamList& out) {
    img_central.params(prefix + ".img_central", out);
    txt_central.params(prefix + ".txt_central", out);
    img_gauss.params(prefix + ".img_gauss", out);
    txt_gauss.params(prefix + ".txt_gauss", out);
}

} // namespace cmb
