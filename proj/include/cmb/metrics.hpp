#pragma once

#include "cmb/tensor.hpp"

namespace cmb {

struct SegMetrics {
    double f1 = 0.0;
    double iou = 0.0;
};

// Pixel overlap of a binarized prediction against a binary mask. When both
// are empty the score is 1.0 by convention.
SegMetrics seg_metrics(const Tensor& pred_bin, const Tensor& gt);

// Binarize a probability map at the threshold.
Tensor binarize(const Tensor& prob, double threshold);

} // namespace cmb
