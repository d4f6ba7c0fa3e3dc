#include "cmb/nn.hpp"

#include <cmath>

namespace cmb {

Conv2d::Conv2d(int64_t cin, int64_t cout, int ksize, int stride, int pad, Rng& rng)
    : stride_(stride), pad_(pad) {
    double std = std::sqrt(2.0 / static_cast<double>(cin * ksize * ksize));
    w = Tensor::randn({cout, cin, ksize, ksize}, rng, std).set_requires_grad(true);
    b = Tensor::zeros({cout}).set_requires_grad(true);
}

Conv2d Conv2d::zero_init(int64_t cin, int64_t cout, int ksize, int stride, int pad) {
    Conv2d c;
    c.stride_ = stride;
    c.pad_ = pad;
    c.w = Tensor::zeros({cout, cin, ksize, ksize}).set_requires_grad(true);
    c.b = Tensor::zeros({cout}).set_requires_grad(true);
    return c;
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, w, b, stride_, pad_); }

void Conv2d::params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
}

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool with_bias) {
    double std = std::sqrt(2.0 / static_cast<double>(in));
    w = Tensor::randn({out, in}, rng, std).set_requires_grad(true);
    if (with_bias) b = Tensor::zeros({out}).set_requires_grad(true);
}

Linear Linear::zero_init(int64_t in, int64_t out, bool with_bias) {
    Linear l;
    l.w = Tensor::zeros({out, in}).set_requires_grad(true);
    if (with_bias) l.b = Tensor::zeros({out}).set_requires_grad(true);
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    if (x.rank() == 1) {
        Tensor col = reshape(x, {x.dim(0), 1});
        Tensor y = matmul(w, col);
        if (b.defined()) y = add_channels(y, b);
        return reshape(y, {w.dim(0)});
    }
    if (x.rank() == 2) {
        // [N, in] -> [N, out], bias over the feature axis
        Tensor yt = matmul(w, transpose2d(x));
        if (b.defined()) yt = add_channels(yt, b);
        return transpose2d(yt);
    }
    throw ShapeError("Linear: need rank 1 or 2, got " + shape_str(x.shape()));
}

void Linear::params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", w, true});
    if (b.defined()) out.push_back({prefix + ".b", b, true});
}

BatchNorm2d::BatchNorm2d(int64_t channels) {
    gamma = Tensor::ones({channels}).set_requires_grad(true);
    beta = Tensor::zeros({channels}).set_requires_grad(true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::ones({channels});
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
    if (x.dim(0) != gamma.dim(0))
        throw ShapeError("BatchNorm2d: got " + shape_str(x.shape()) + " for " +
                         std::to_string(gamma.dim(0)) + " channels");
    if (training) {
        std::vector<double> mu, var;
        Tensor y = batchnorm_train(x, gamma, beta, kEps, &mu, &var);
        auto& rm = running_mean.vec();
        auto& rv = running_var.vec();
        for (int64_t c = 0; c < gamma.dim(0); ++c) {
            rm[c] = (1.0 - kMomentum) * rm[c] + kMomentum * mu[c];
            rv[c] = (1.0 - kMomentum) * rv[c] + kMomentum * var[c];
        }
        return y;
    }
    Tensor xc = sub_channels(x, running_mean);
    Tensor inv = Tensor::zeros({gamma.dim(0)});
    for (int64_t c = 0; c < gamma.dim(0); ++c)
        inv.vec()[c] = 1.0 / std::sqrt(running_var.vec()[c] + kEps);
    return add_channels(mul_channels(mul_channels(xc, inv), gamma), beta);
}

void BatchNorm2d::params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
}

PsiBlock::PsiBlock(int64_t channels, int depth, Rng& rng) {
    for (int i = 0; i < depth; ++i) {
        convs.emplace_back(channels, channels, 3, 1, 1, rng);
        bns.emplace_back(channels);
    }
}

Tensor PsiBlock::forward(const Tensor& x, bool training) {
    Tensor h = x;
    for (size_t i = 0; i < convs.size(); ++i)
        h = bns[i].forward(relu(convs[i].forward(h)), training);
    return h;
}

void PsiBlock::params(const std::string& prefix, ParamList& out) {
    for (size_t i = 0; i < convs.size(); ++i) {
        convs[i].params(prefix + ".conv" + std::to_string(i), out);
        bns[i].params(prefix + ".bn" + std::to_string(i), out);
    }
}

} // namespace cmb
