#pragma once

#include "cmb/nn.hpp"
#include "cmb/tensor.hpp"

namespace cmb {

struct InteractionState {
    Tensor f_it; // [HW, N] row-stochastic image-text attention
    Tensor f_ir; // [HW, HW] row-stochastic image self-attention
    Tensor cs;   // [HW, N] similarity coefficient matrix
    Tensor o;    // [C, H, W] fused output
};

// Cross-modal interaction: five 1x1 projections build an image-text and an
// image self-similarity map, combined through the coefficient matrix
//   CS     = F_ir * F_it
//   rF_it  = w1 * CS + F_it
//   rF_ir  = w2 * (CS * F_it^T) + F_ir
//   O      = rF_it * theta(T_a) + rF_ir * gamma(L5) + L5.
// gamma, theta and the scalars w1, w2 start at zero, so the module is the
// identity on L5 until trained.
class Itim {
public:
    Itim() = default;
    Itim(int64_t c, int64_t d_text, Rng& rng);

    InteractionState forward(const Tensor& l5, const Tensor& t_a) const;
    void params(const std::string& prefix, ParamList& out);

    Conv2d alpha, beta, gamma; // image query / key / value projections
    Linear delta, theta;       // text key / value projections
    Tensor w1, w2;             // learnable refinement scalars
};

} // namespace cmb
