#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cmb/errors.hpp"
#include "cmb/rng.hpp"

namespace cmb {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Dense row-major double tensor with reverse-mode automatic differentiation.
// The tape is rebuilt on every forward pass: each op node stores its parents
// and a backward closure; Tensor::backward() runs the closures in reverse
// topological order, accumulating into .grad buffers.
//
// A graph and its tensors are confined to one thread during forward/backward;
// distinct graphs on distinct threads are independent.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, double fill, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int64_t dim(int i) const;
    int64_t size() const;

    double* data();
    const double* data() const;
    std::vector<double>& vec();
    const std::vector<double>& vec() const;
    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);

    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();
    // Adds n values into the grad buffer; no-op unless requires_grad.
    void accumulate_grad(const double* g, int64_t n);

    // Value copy with no graph history.
    Tensor detach() const;

    // Reverse-mode sweep from a scalar root.
    void backward();

    // Builds a graph node from precomputed data with a custom backward.
    // The backward receives the node's output gradient and the input tensors
    // and is responsible for calling accumulate_grad on them.
    static Tensor make_custom(
        Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
        std::function<void(const std::vector<double>& out_grad, std::vector<Tensor>& inputs)> backward);

    std::shared_ptr<TensorImpl>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Gradient recording is enabled by default; suppress it for inference-only
// regions to skip tape construction.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- elementwise (operands must share shapes) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor rsub_scalar(const Tensor& a, double c); // c - a
Tensor neg(const Tensor& a);

// ---- unary ----
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor softplus(const Tensor& a);
// 1 / sqrt(x + eps)
Tensor rsqrt(const Tensor& a, double eps);
// Sign-preserving push away from zero: |x| < eps maps to sign(x)*eps, except
// an exact 0.0 stays 0.0. Gradient is 1 where untouched, 0 where clamped.
Tensor clamp_away_from_zero(const Tensor& a, double eps);

// ---- broadcast ----
// Multiplies a scalar (1-element) tensor into every entry; grads to both.
Tensor scale_by(const Tensor& a, const Tensor& s);
// x[c, ...] * g[0, ...]: broadcasts a single-channel map over channels.
Tensor mul_broadcast0(const Tensor& x, const Tensor& g);
// Per-channel ops on tensors whose dim 0 is the channel axis.
Tensor add_channels(const Tensor& x, const Tensor& v);
Tensor sub_channels(const Tensor& x, const Tensor& v);
Tensor mul_channels(const Tensor& x, const Tensor& v);
Tensor channel_mean(const Tensor& x); // [C, ...] -> [C]

// ---- linear algebra / structure ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int64_t>& sizes);
Tensor softmax(const Tensor& a, int axis);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor global_maxpool(const Tensor& a); // [C, ...] -> [C], first-max ties

// ---- spatial ----
// x [Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout]. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x); // [C,H,W] -> [C,2H,2W]
// Mean filter with zero "same" padding (count includes padding). Not
// differentiable; used on ground-truth maps only.
Tensor avgpool_same(const Tensor& x, int k);

// ---- normalization ----
// Per-channel batch normalization over dim 0 using batch statistics, fused
// into one node. The per-channel mean/variance actually used are written to
// the optional out-parameters (for running-average upkeep).
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       std::vector<double>* mean_out, std::vector<double>* var_out);

// ---- losses ----
// Numerically stable elementwise binary cross-entropy on logits; targets do
// not receive gradient.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

} // namespace cmb
