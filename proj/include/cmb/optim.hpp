#pragma once

#include <vector>

#include "cmb/tensor.hpp"

namespace cmb {

// Adaptive per-parameter step method with bias correction,
// betas (0.9, 0.999), eps 1e-8.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr);

    void step();
    void zero_grad();

    double lr;

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
};

} // namespace cmb
