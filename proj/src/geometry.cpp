#include "backdoorlab/geometry.hpp"

#include <algorithm>
#include <numeric>

namespace backdoorlab {

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

MatchSet penalty_match(const std::vector<Prediction>& preds,
                       const std::vector<GroundTruthObject>& gts,
                       double rho) {
    MatchSet out;
    for (int i = 0; i < static_cast<int>(gts.size()); ++i) {
        if (!gts[i].poisoned || gts[i].removed) continue;
        for (int j = 0; j < static_cast<int>(preds.size()); ++j) {
            if (iou(preds[j].box, gts[i].box) > rho) out.pairs.emplace_back(i, j);
        }
    }
    return out;
}

MetricAssignment metric_match(const std::vector<Prediction>& preds,
                              const std::vector<GroundTruthObject>& gts,
                              double iou_thr) {
    MetricAssignment out;
    out.pred_to_gt.assign(preds.size(), -1);
    out.gt_to_pred.assign(gts.size(), -1);

    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return preds[a].score > preds[b].score;
    });

    for (int j : order) {
        int best_gt = -1;
        double best_iou = 0.0;
        for (int i = 0; i < static_cast<int>(gts.size()); ++i) {
            if (out.gt_to_pred[i] != -1) continue;
            if (gts[i].original_label != preds[j].cls) continue;
            const double v = iou(preds[j].box, gts[i].box);
            if (v < iou_thr) continue;
            if (v > best_iou) {
                best_iou = v;
                best_gt = i;
            }
        }
        if (best_gt != -1) {
            out.pred_to_gt[j] = best_gt;
            out.gt_to_pred[best_gt] = j;
        }
    }
    return out;
}

}  // namespace backdoorlab
