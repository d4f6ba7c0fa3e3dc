#include "cmb/itim.hpp"

namespace cmb {

Itim::Itim(int64_t c, int64_t d_text, Rng& rng)
    : alpha(c, c, 1, 1, 0, rng),
      beta(c, c, 1, 1, 0, rng),
      gamma(Conv2d::zero_init(c, c, 1, 1, 0)),
      delta(d_text, c, rng),
      theta(Linear::zero_init(d_text, c, /*with_bias=*/false)) {
    w1 = Tensor::zeros({1}).set_requires_grad(true);
    w2 = Tensor::zeros({1}).set_requires_grad(true);
}

InteractionState Itim::forward(const Tensor& l5, const Tensor& t_a) const {
    if (l5.rank() != 3) throw ShapeError("itim: L5 must be [C,H,W], got " + shape_str(l5.shape()));
    if (t_a.rank() != 2)
        throw ShapeError("itim: text must be [N,D], got " + shape_str(t_a.shape()));
    int64_t c = l5.dim(0), h = l5.dim(1), w = l5.dim(2);
    int64_t hw = h * w;

    // queries/keys as position-major matrices [HW, C]
    Tensor q = transpose2d(reshape(alpha.forward(l5), {c, hw}));
    Tensor key_img = reshape(beta.forward(l5), {c, hw}); // [C, HW]
    Tensor val_img = transpose2d(reshape(gamma.forward(l5), {c, hw}));
    Tensor key_txt = delta.forward(t_a);                 // [N, C]
    Tensor val_txt = theta.forward(t_a);                 // [N, C]

    InteractionState s;
    s.f_it = softmax(matmul(q, transpose2d(key_txt)), 1); // [HW, N] over the text axis
    s.f_ir = softmax(matmul(q, key_img), 1);              // [HW, HW] over the spatial axis
    s.cs = matmul(s.f_ir, s.f_it);                        // [HW, N]

    Tensor rf_it = add(scale_by(s.cs, w1), s.f_it);
    Tensor rf_ir = add(scale_by(matmul(s.cs, transpose2d(s.f_it)), w2), s.f_ir);

    Tensor l5_rows = transpose2d(reshape(l5, {c, hw})); // [HW, C]
    Tensor o_rows = add(add(matmul(rf_it, val_txt), matmul(rf_ir, val_img)), l5_rows);
    s.o = reshape(transpose2d(o_rows), {c, h, w});
    return s;
}

void Itim::params(const std::string& prefix, ParamList& out) {
    alpha.params(prefix + ".alpha", out);
    beta.params(prefix + ".beta", out);
    gamma.params(prefix + ".gamma", out);
    delta.params(prefix + ".delta", out);
    theta.params(prefix + ".theta", out);
    out.push_back({prefix + ".w1", w1, true});
    out.push_back({prefix + ".w2", w2, true});
}

} // namespace cmb
