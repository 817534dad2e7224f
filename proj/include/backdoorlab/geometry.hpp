#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

namespace backdoorlab {

// Labels are 1-based; 0 is reserved for "background" in training targets.
inline constexpr int kBackgroundLabel = 0;

/// Axis-aligned box in pixel coordinates, corners (x_min, y_min)-(x_max, y_max).
struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool degenerate() const { return width() <= 0.0 || height() <= 0.0; }
};

/// Annotated object. `original_label` is frozen at generation time and is the
/// evaluation ground truth; `train_label` is what the trainer sees and is the
/// only label an attack may rewrite.
struct GroundTruthObject {
    BoundingBox box;
    int original_label = 1;
    int train_label = 1;
    bool poisoned = false;  // trigger indicator m_i
    bool removed = false;   // dropped from training targets, kept for evaluation
};

/// One scored box. `logits` holds foreground classes at [0..C-1]; softmax-head
/// models append the background logit as a trailing entry.
struct Prediction {
    BoundingBox box;
    Eigen::VectorXd logits;
    double score = 0.0;
    int cls = 1;
};

/// Gated (gt, prediction) index pairs used by the attack penalty.
struct MatchSet {
    std::vector<std::pair<int, int>> pairs;  // ascending (gt, pred)
    bool empty() const { return pairs.empty(); }
    std::size_t size() const { return pairs.size(); }
};

/// Greedy one-to-one assignment used by detection metrics.
struct MetricAssignment {
    std::vector<int> pred_to_gt;  // -1 when unmatched
    std::vector<int> gt_to_pred;  // -1 when unmatched
};

/// Intersection-over-union. Returns 0 when the union has zero area, so
/// degenerate boxes have IoU 0 against everything, including themselves.
double iou(const BoundingBox& a, const BoundingBox& b);

/// Pairs every poisoned, still-present gt (m_i = 1, not removed) with every
/// prediction whose box overlaps it strictly above `rho`. Pure geometry
/// otherwise: class and score are ignored.
MatchSet penalty_match(const std::vector<Prediction>& preds,
                       const std::vector<GroundTruthObject>& gts,
                       double rho);

/// Confidence-ordered greedy matching for evaluation: predictions in
/// descending score order, each taking the unmatched same-class gt
/// (by original_label) of highest IoU >= iou_thr; ties go to the lower
/// gt index. Unlike the penalty gate, the threshold here is inclusive.
MetricAssignment metric_match(const std::vector<Prediction>& preds,
                              const std::vector<GroundTruthObject>& gts,
                              double iou_thr);

}  // namespace backdoorlab
