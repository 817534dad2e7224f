#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "backdoorlab/geometry.hpp"

namespace backdoorlab {

struct Detection {
    int image_id = 0;
    BoundingBox box;
    int cls = 1;
    double score = 0.0;
};

struct GtInstance {
    int image_id = 0;
    BoundingBox box;
    int cls = 1;
};

/// 101-point interpolated average precision for one class at one IoU
/// threshold. Detections greedily match the highest-IoU unmatched ground
/// truth of the same class and image, in descending score order.
double average_precision(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                         int cls, double iou_thr);

/// Mean AP over classes that have at least one ground-truth instance.
/// Throws if no class does.
double mean_average_precision(const std::vector<Detection>& dets,
                              const std::vector<GtInstance>& gts, int n_classes, double iou_thr);

/// COCO-style mAP averaged over IoU thresholds 0.50:0.95 step 0.05.
double map_range(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                 int n_classes);

/// One triggered evaluation instance: the focal object and the detector's
/// predictions on the triggered image.
struct InstanceEval {
    int original_label = 1;
    int target_label = 0;
    BoundingBox box;
    std::vector<Prediction> preds;
};

/// True when some prediction carries `label` with score >= score_min and
/// IoU(box, instance box) >= iou_thr.
bool instance_detected(const InstanceEval& inst, int label, double iou_thr, double score_min);

/// Disappearance attacks succeed when the focal object is no longer detected
/// under its original label; asr_oda + tdr == 1 by construction.
double asr_oda(const std::vector<InstanceEval>& instances, double iou_thr, double score_min);

/// Misclassification attacks succeed when the focal object is detected as the
/// target label.
double asr_rma(const std::vector<InstanceEval>& instances, double iou_thr, double score_min);

/// Fraction of triggered objects still detected under their original label.
double tdr(const std::vector<InstanceEval>& instances, double iou_thr, double score_min);

/// IoU thresholds 0.55:0.95 for the per-row ASR/TDR sweep columns.
std::array<double, 9> iou_sweep_thresholds();

struct ResultRow {
    std::string run_id;
    std::string method;
    std::string model;
    double lambda = 0.0;
    double poison_ratio = 0.0;
    std::string placement;
    double map_clean = 0.0;
    double asr50 = 0.0;
    double tdr50 = 0.0;
    double poison_map = 0.0;
    std::array<double, 9> asr_sweep{};
    std::array<double, 9> tdr_sweep{};
    std::uint64_t seed = 0;
};

std::string results_csv_header();
std::string format_result_row(const ResultRow& row);
void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows);

void write_detections_json(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> read_detections_json(const std::string& path);

}  // namespace backdoorlab
