#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cmb/rng.hpp"

namespace cmb::oracle {

// Brute-force reference implementations used by tests and the verification
// suite. Everything here is scalar loops over raw buffers; nothing is shared
// with the tensor engine, so agreement is evidence, not tautology.

// Central finite differences of a scalar function with respect to the doubles
// behind `coords`. The function must be deterministic across evaluations.
std::vector<double> fd_gradient(const std::function<double()>& f,
                                const std::vector<double*>& coords, double step = 1e-6);

// Comparison metric for gradient checks: |g - g_hat| / max(1, |g|, |g_hat|).
double rel_error(double analytic, double numeric);

// Exhaustive k-nearest-neighbor search over the rows of a row-major matrix.
// Self is excluded; ties break toward the lower row index.
struct KnnTable {
    std::vector<std::vector<int>> idx;
    std::vector<std::vector<double>> dist;
};
KnnTable knn_exhaustive(const std::vector<double>& s, int rows, int cols, int k);

// Monte Carlo estimate of KL(p || q) for diagonal Gaussians from n_samples
// draws of z ~ p, with the standard error of the estimate.
struct McEstimate {
    double mean;
    double std_err;
};
McEstimate mc_kl(const std::vector<double>& mu_p, const std::vector<double>& sigma_p,
                 const std::vector<double>& mu_q, const std::vector<double>& sigma_q,
                 int64_t n_samples, uint64_t seed);

// ---- naive loop evaluations of the model equations ----

// S[i][j] = sum_m softmax_row(X)[i][m] * X[j][m], X row-major [c x m].
std::vector<double> loop_autocorrelate(const std::vector<double>& x, int c, int m);

// Differential neighborhood map, 1x1 conv and global max pool over (n, j)
// positions: the central-feature pipeline given the conv weight [dc x 2c]
// and bias [dc].
std::vector<double> loop_central_feature(const std::vector<double>& s, int c, int k,
                                         const std::vector<double>& conv_w,
                                         const std::vector<double>& conv_b, int dc);

// The cross-modal interaction chain given the five projection weights, biases
// and the two scalar refinement weights. l5 is [c x hw] (row-major, channels
// as rows), t is [n x d_text].
struct LoopItim {
    std::vector<double> f_it;  // [hw x n]
    std::vector<double> f_ir;  // [hw x hw]
    std::vector<double> cs;    // [hw x n]
    std::vector<double> o;     // [c x hw]
};
LoopItim loop_itim(const std::vector<double>& l5, int c, int hw, const std::vector<double>& t,
                   int n, int d_text, int proj,
                   const std::vector<double>& wa, const std::vector<double>& ba,
                   const std::vector<double>& wb, const std::vector<double>& bb,
                   const std::vector<double>& wg, const std::vector<double>& bg,
                   const std::vector<double>& wd, const std::vector<double>& bd,
                   const std::vector<double>& wt, const std::vector<double>& bt,
                   double w1, double w2);

// ---- scalar layer loops (for composing psi chains in tests) ----
std::vector<double> loop_conv2d(const std::vector<double>& x, int ci, int h, int w,
                                const std::vector<double>& wgt, int co, int kh, int kw,
                                const std::vector<double>& bias, int stride, int pad);
std::vector<double> loop_relu(const std::vector<double>& x);
std::vector<double> loop_sigmoid(const std::vector<double>& x);
// Batch-statistics normalization over each channel's spatial extent.
std::vector<double> loop_bn_train(const std::vector<double>& x, int c, int hw,
                                  const std::vector<double>& gamma,
                                  const std::vector<double>& beta, double eps);

// ---- scalar loss loops ----
struct LoopMaskLoss {
    double bce_w;
    double iou_w;
};
// Weighted BCE + weighted IoU on logits against a binary mask, with the
// pixel-weight map passed in explicitly.
LoopMaskLoss loop_weighted_bce_iou(const std::vector<double>& logits,
                                   const std::vector<double>& g,
                                   const std::vector<double>& weights);
double loop_dice(const std::vector<double>& logits, const std::vector<double>& g, double smooth);

// ---- scalar metric loops ----
struct LoopConfusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};
LoopConfusion loop_confusion(const std::vector<double>& pred_bin, const std::vector<double>& gt);

} // namespace cmb::oracle
