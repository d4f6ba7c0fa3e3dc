#include "cmb/losses.hpp"

#include <algorithm>
#include <cmath>

namespace cmb {

namespace {

void check_binary(const char* op, const Tensor& g) {
    for (double v : g.vec())
        if (v != 0.0 && v != 1.0)
            throw ValueError(std::string(op) + ": ground truth must be binary");
}

} // namespace

Tensor resize_nearest(const Tensor& m, int64_t out_h, int64_t out_w) {
    if (m.rank() != 2) throw ShapeError("resize_nearest: need [H,W], got " + shape_str(m.shape()));
    int64_t h = m.dim(0), w = m.dim(1);
    std::vector<double> out(static_cast<size_t>(out_h * out_w));
    for (int64_t i = 0; i < out_h; ++i) {
        int64_t si = std::min(h - 1, i * h / out_h);
        for (int64_t j = 0; j < out_w; ++j) {
            int64_t sj = std::min(w - 1, j * w / out_w);
            out[i * out_w + j] = m.at({si, sj});
        }
    }
    return Tensor::from_data({out_h, out_w}, std::move(out));
}

Tensor boundary_gt(const Tensor& g) {
    if (g.rank() != 2) throw ShapeError("boundary_gt: need [H,W], got " + shape_str(g.shape()));
    check_binary("boundary_gt", g);
    int64_t h = g.dim(0), w = g.dim(1);
    const double* src = g.data();
    std::vector<double> out(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
            double mx = 0.0, mn = 1.0;
            for (int64_t di = -1; di <= 1; ++di)
                for (int64_t dj = -1; dj <= 1; ++dj) {
                    int64_t si = i + di, sj = j + dj;
                    // zero outside for dilation; for erosion the mask is
                    // treated as zero-padded as well
                    double v = (si >= 0 && si < h && sj >= 0 && sj < w) ? src[si * w + sj] : 0.0;
                    mx = std::max(mx, v);
                    mn = std::min(mn, v);
                }
            out[i * w + j] = mx - mn; // binary since inputs are {0,1}
        }
    return Tensor::from_data({h, w}, std::move(out));
}

Tensor pixel_weights(const Tensor& g) {
    int64_t grid = std::min(g.dim(0), g.dim(1));
    int k = static_cast<int>(std::min<int64_t>(15, grid));
    Tensor pooled = avgpool_same(g, k);
    std::vector<double> w(g.vec().size());
    for (size_t i = 0; i < w.size(); ++i)
        w[i] = 1.0 + 5.0 * std::abs(pooled.vec()[i] - g.vec()[i]);
    return Tensor::from_data(g.shape(), std::move(w));
}

std::pair<Tensor, Tensor> weighted_bce_iou(const Tensor& logits, const Tensor& g) {
    if (logits.rank() != 3 || logits.dim(0) != 1)
        throw ShapeError("weighted_bce_iou: logits must be [1,H,W], got " +
                         shape_str(logits.shape()));
    if (g.rank() != 2 || g.dim(0) != logits.dim(1) || g.dim(1) != logits.dim(2))
        throw ShapeError("weighted_bce_iou: mask " + shape_str(g.shape()) +
                         " does not match logits " + shape_str(logits.shape()));
    check_binary("weighted_bce_iou", g);

    Tensor x = reshape(logits, {logits.dim(1), logits.dim(2)});
    Tensor w = pixel_weights(g);
    double wsum = 0.0;
    for (double v : w.vec()) wsum += v;

    Tensor bce = bce_with_logits(x, g);
    Tensor l_bce = mul_scalar(sum(mul(w, bce)), 1.0 / wsum);

    Tensor p = sigmoid(x);
    Tensor pg = mul(p, g);
    Tensor inter = sum(mul(w, pg));
    Tensor uni = sum(mul(w, sub(add(p, g), pg)));
    Tensor l_iou = rsub_scalar(div(inter, uni), 1.0);
    return {l_bce, l_iou};
}

Tensor dice_loss(const Tensor& logits, const Tensor& g_e) {
    if (logits.rank() != 3 || logits.dim(0) != 1)
        throw ShapeError("dice_loss: logits must be [1,H,W], got " + shape_str(logits.shape()));
    if (g_e.rank() != 2 || g_e.dim(0) != logits.dim(1) || g_e.dim(1) != logits.dim(2))
        throw ShapeError("dice_loss: boundary " + shape_str(g_e.shape()) +
                         " does not match logits " + shape_str(logits.shape()));
    constexpr double kSmooth = 1.0;
    Tensor x = reshape(logits, {logits.dim(1), logits.dim(2)});
    Tensor p = sigmoid(x);
    double gsum = 0.0;
    for (double v : g_e.vec()) gsum += v;
    Tensor num = add_scalar(mul_scalar(sum(mul(p, g_e)), 2.0), kSmooth);
    Tensor den = add_scalar(sum(p), gsum + kSmooth);
    return rsub_scalar(div(num, den), 1.0);
}

Tensor total_loss(const std::array<DecoderBlockOutput, 4>& outputs, const Tensor& g,
                  LossReport* report) {
    check_binary("total_loss", g);
    Tensor total;
    for (int i = 0; i < 4; ++i) {
        const auto& block = outputs[i];
        Tensor gi = resize_nearest(g, block.m.dim(1), block.m.dim(2));
        auto [l_bce, l_iou] = weighted_bce_iou(block.m, gi);
        Tensor term = add(l_bce, l_iou);
        if (block.e.defined()) {
            Tensor ge = boundary_gt(gi);
            Tensor l_dice = dice_loss(block.e, ge);
            term = add(term, l_dice);
            if (report) report->blocks[i].dice = l_dice.item();
        }
        if (report) {
            report->blocks[i].bce_w = l_bce.item();
            report->blocks[i].iou_w = l_iou.item();
        }
        total = total.defined() ? add(total, term) : term;
    }
    if (report) report->total = total.item();
    return total;
}

} // namespace cmb
