#pragma once

#include <utility>
#include <vector>

#include "cmb/nn.hpp"
#include "cmb/tensor.hpp"

namespace cmb {

// Channel autocorrelation: S = rowsoftmax(X) * X^T for X [C, M].
Tensor autocorrelate(const Tensor& x);

// K nearest rows (Euclidean) for every row of S, self excluded, ties broken
// toward the lower index.
struct NeighborTable {
    int k = 0;
    std::vector<std::vector<int>> idx;
    std::vector<std::vector<double>> dist;
};
NeighborTable knn_neighbors(const Tensor& s, int k);

// Differential neighborhood map [2C, C*k]: channels 0..C-1 hold s_n - d_n^j,
// channels C..2C-1 hold d_n^j, positions sweep (n, j). Differentiable in S
// with the neighbor assignment held fixed.
Tensor knn_pair_features(const Tensor& s, const NeighborTable& table);

// Differential weighting, 1x1 conv and global max pool down to a vector.
class CentralFeatureHead {
public:
    CentralFeatureHead() = default;
    CentralFeatureHead(int64_t c, int64_t d_central, Rng& rng);

    Tensor forward(const Tensor& s, const NeighborTable& table) const; // [d_central]
    void params(const std::string& prefix, ParamList& out);

    Tensor w, b; // conv1x1 as [d_central, 2C] + bias
};

struct GaussianLatent {
    Tensor mu;
    Tensor sigma; // strictly positive: softplus head + 1e-6 floor
    Tensor z;     // mu + sigma * eps
    std::vector<double> eps;
};

// Variational head: mu affine, sigma softplus-affine; z reparameterized with
// eps ~ N(0,I) drawn from the passed generator, or frozen to 0 when null
// (deterministic inference).
class GaussianHead {
public:
    GaussianHead() = default;
    GaussianHead(int64_t d_in, int64_t d_z, Rng& rng);

    GaussianLatent forward(const Tensor& c, Rng* eps_rng) const;
    void params(const std::string& prefix, ParamList& out);

    Linear mu_head, sigma_head;
    static constexpr double kSigmaFloor = 1e-6;
};

// Closed-form diagonal-Gaussian KL in both directions: (KL(p||q), KL(q||p)).
std::pair<Tensor, Tensor> symmetric_kl(const GaussianLatent& p, const GaussianLatent& q);

// a = sigmoid of the averaged bidirectional KL; strictly increasing in both
// arguments, 0.5 exactly when both vanish.
Tensor ambiguity_from_kl(const Tensor& kl_vt, const Tensor& kl_tv);

struct AmbiguityResult {
    Tensor a;     // scalar in [0.5, 1)
    Tensor t_a;   // (1 - a) * T
    Tensor kl_vt; // KL(image || text)
    Tensor kl_tv; // KL(text || image)
    GaussianLatent g_v, g_t;
};

// The full image-text ambiguity pipeline: central features of both
// modalities, Gaussian latents, symmetric KL, sigmoid gate, text reweighting.
class AmbiguityGate {
public:
    AmbiguityGate() = default;
    // c_img: channel count of L5; n_tokens: text row count (the text path's
    // channel axis). k is clamped per path to (rows - 1).
    AmbiguityGate(int64_t c_img, int64_t n_tokens, int64_t d_central, int64_t d_z, int k,
                  Rng& rng);

    AmbiguityResult forward(const Tensor& text, const Tensor& l5, Rng* eps_rng) const;
    void params(const std::string& prefix, ParamList& out);

    CentralFeatureHead img_central, txt_central;
    GaussianHead img_gauss, txt_gauss;
    int k = 10;
};

} // namespace cmb
