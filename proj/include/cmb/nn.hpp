#pragma once

#include <string>
#include <vector>

#include "cmb/tensor.hpp"

namespace cmb {

// Named tensor handle used for optimizer traversal and checkpointing.
// Buffers (is_param == false) are saved and restored but never stepped.
struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool is_param = true;
};
using ParamList = std::vector<NamedTensor>;

class Conv2d {
public:
    Conv2d() = default;
    // He-initialized weights, zero bias.
    Conv2d(int64_t cin, int64_t cout, int ksize, int stride, int pad, Rng& rng);
    // Zero-initialized variant for residual paths that must start as identity.
    static Conv2d zero_init(int64_t cin, int64_t cout, int ksize, int stride, int pad);

    Tensor forward(const Tensor& x) const;
    void params(const std::string& prefix, ParamList& out);

    Tensor w, b;

private:
    int stride_ = 1;
    int pad_ = 0;
};

// Affine map. Accepts [in] vectors or [N, in] row-stacked token matrices.
// Constructed without bias it is strictly linear (maps 0 to 0).
class Linear {
public:
    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool with_bias = true);
    static Linear zero_init(int64_t in, int64_t out, bool with_bias = true);

    Tensor forward(const Tensor& x) const;
    void params(const std::string& prefix, ParamList& out);

    Tensor w, b; // w is [out, in]; b undefined when bias-free
};

// Per-channel batch normalization over the spatial extent of a [C,H,W] map.
// Training uses batch statistics and updates running averages (momentum 0.1);
// eval applies the running affine, so identical inputs map identically.
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t channels);

    Tensor forward(const Tensor& x, bool training);
    void params(const std::string& prefix, ParamList& out);

    Tensor gamma, beta;
    Tensor running_mean, running_var;

    static constexpr double kMomentum = 0.1;
    static constexpr double kEps = 1e-5;
};

// Stack of conv3x3 -> ReLU -> batchnorm stages at constant width.
class PsiBlock {
public:
    PsiBlock() = default;
    PsiBlock(int64_t channels, int depth, Rng& rng);

    Tensor forward(const Tensor& x, bool training);
    void params(const std::string& prefix, ParamList& out);

    std::vector<Conv2d> convs;
    std::vector<BatchNorm2d> bns;
};

} // namespace cmb
