#pragma once

#include <array>

#include "cmb/red.hpp"
#include "cmb/tensor.hpp"

namespace cmb {

// Nearest-neighbor resize for [H,W] maps; keeps binary masks binary.
Tensor resize_nearest(const Tensor& m, int64_t out_h, int64_t out_w);

// Morphological gradient of a binary mask: dilate3x3(G) - erode3x3(G).
Tensor boundary_gt(const Tensor& g);

// Border-emphasis weights 1 + 5*|avgpool_k(G) - G| with k = min(15, grid).
Tensor pixel_weights(const Tensor& g);

// Weighted BCE and weighted IoU of mask logits [1,H,W] against a binary
// [H,W] mask. Throws ValueError on non-binary ground truth.
std::pair<Tensor, Tensor> weighted_bce_iou(const Tensor& logits, const Tensor& g);

// Dice loss of boundary logits against the binary boundary map, smoothing 1.
Tensor dice_loss(const Tensor& logits, const Tensor& g_e);

struct LossReport {
    struct Block {
        double bce_w = 0.0;
        double iou_w = 0.0;
        double dice = 0.0;
    };
    std::array<Block, 4> blocks; // DB4..DB1
    double total = 0.0;
};

// Total objective over the four decoder outputs: sum of weighted BCE + IoU on
// every mask map plus Dice on every boundary map (skipped for blocks without
// one). The ground truth is resized per block grid; boundaries are recomputed
// from the resized mask so supervision stays binary.
Tensor total_loss(const std::array<DecoderBlockOutput, 4>& outputs, const Tensor& g,
                  LossReport* report = nullptr);

} // namespace cmb
