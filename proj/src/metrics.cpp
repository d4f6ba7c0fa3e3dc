#include "cmb/metrics.hpp"

namespace cmb {

SegMetrics seg_metrics(const Tensor& pred_bin, const Tensor& gt) {
    if (pred_bin.shape() != gt.shape())
        throw ShapeError("seg_metrics: resolution mismatch, " + shape_str(pred_bin.shape()) +
                         " vs " + shape_str(gt.shape()));
    int64_t tp = 0, fp = 0, fn = 0;
    for (int64_t i = 0; i < gt.size(); ++i) {
        bool p = pred_bin.vec()[i] > 0.5;
        bool g = gt.vec()[i] > 0.5;
        if (p && g) ++tp;
        else if (p) ++fp;
        else if (g) ++fn;
    }
    SegMetrics m;
    if (tp + fp + fn == 0) {
        m.f1 = 1.0;
        m.iou = 1.0;
    } else {
        m.f1 = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
        m.iou = tp / static_cast<double>(tp + fp + fn);
    }
    return m;
}

Tensor binarize(const Tensor& prob, double threshold) {
    std::vector<double> out(prob.vec().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = prob.vec()[i] > threshold ? 1.0 : 0.0;
    return Tensor::from_data(prob.shape(), std::move(out));
}

} // namespace cmb
