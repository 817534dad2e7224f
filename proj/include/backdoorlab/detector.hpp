#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "backdoorlab/features.hpp"
#include "backdoorlab/geometry.hpp"
#include "backdoorlab/penalty.hpp"
#include "backdoorlab/poisoning.hpp"

namespace backdoorlab {

enum class LossKind { CrossEntropy, PerClassBCE, Focal };

enum class AssignPolicy {
    OneToOne,   // each gt claims exactly one anchor (its best by IoU)
    MultiMatch  // every anchor above assign_iou is positive; each gt keeps at least its best anchor
};

struct TrainConfig {
    LossKind loss = LossKind::Focal;
    HeadMode head_mode = HeadMode::Independent;
    int head_depth = 1;
    int hidden_dim = 16;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    AssignPolicy assignment = AssignPolicy::MultiMatch;
    double assign_iou = 0.3;
    double learning_rate = 0.3;
    int epochs = 150;
    int batch_size = 16;
    std::uint64_t seed = 0;
    PenaltyConfig penalty;  // head_mode is forced to match the detector's

    void validate() const;  // throws std::invalid_argument on bad combinations
};

/// Linear (or one-hidden-layer) classification head over hand-crafted anchor
/// features. No box regression: the predicted box is the anchor itself.
/// In Softmax mode W carries an explicit trailing background row
/// (Faster R-CNN style), so logits have n_classes + 1 entries.
struct DetectorParams {
    int n_classes = 3;
    HeadMode head_mode = HeadMode::Independent;
    int head_depth = 1;
    Eigen::MatrixXd W;   // out x d (depth 1) or out x hidden (depth 2)
    Eigen::MatrixXd W1;  // hidden x d, only when head_depth == 2
    FeatureExtractorSpec fx;
    AnchorGrid grid;

    int out_dim() const { return head_mode == HeadMode::Softmax ? n_classes + 1 : n_classes; }
};

/// One scene reduced to what the head consumes: per-anchor features plus
/// per-anchor class targets, and the annotations the penalty gates on.
struct TrainingExample {
    int scene_id = 0;
    Eigen::MatrixXd features;  // anchors x d
    std::vector<int> targets;  // kBackgroundLabel or 1..C per anchor
    std::vector<GroundTruthObject> gts;
};

struct TrainingSet {
    AnchorGrid grid;
    FeatureExtractorSpec fx;
    int n_classes = 3;
    std::vector<TrainingExample> examples;
};

/// Per-anchor class targets. Removed objects and degenerate boxes are never
/// assigned, so UBA's zero-size boxes fall out of training naturally.
std::vector<int> assign_targets(const std::vector<BoundingBox>& anchors,
                                const std::vector<GroundTruthObject>& gts, AssignPolicy policy,
                                double assign_iou);

TrainingSet prepare_training_set(const DatasetManifest& manifest, const TrainConfig& cfg);

struct LossOutput {
    double value = 0.0;
    Eigen::MatrixXd grad;  // d value / d logits, same shape as the logits
};

/// Detection loss averaged over anchors. CE expects a background column at
/// index C; BCE/Focal score C independent sigmoids with all-zero background
/// targets. Focal weights only the positive term by alpha, so gamma = 0 with
/// alpha = 1 reproduces PerClassBCE exactly.
LossOutput detection_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets,
                          const TrainConfig& cfg);

/// Per-anchor logits for one scene's feature matrix.
Eigen::MatrixXd forward(const DetectorParams& params, const Eigen::MatrixXd& features);

DetectorParams make_detector(const TrainingSet& data, const TrainConfig& cfg);

struct EpochStats {
    double det_loss = 0.0;
    double penalty = 0.0;
    double total = 0.0;
};

struct TrainResult {
    DetectorParams params;
    std::vector<EpochStats> trace;
    bool diverged = false;
    int diverged_epoch = -1;
};

/// Minibatch SGD on total_loss = mean_images(det + lambda * P_atk). With
/// lambda = 0 the penalty path is skipped entirely, bit-for-bit. On a
/// non-finite loss the last finite parameters are returned with `diverged`.
TrainResult train(const TrainingSet& data, const TrainConfig& cfg,
                  const DetectorParams* init = nullptr);

/// Defense-style fine-tuning: rejects subsets containing poisoned objects and
/// continues training from `init` with the penalty disabled.
TrainResult fine_tune(const DetectorParams& init, const TrainingSet& clean_subset,
                      const TrainConfig& cfg);

/// Explicit-Euler gradient flow (full-batch). Records the gated pairs' margins
/// (logit in Independent mode, one-vs-rest log-odds in Softmax mode) at every
/// step. Requires head_depth == 1. With attack_only the detection loss is
/// dropped and the flow follows -lambda * grad P_atk alone.
struct FlowSeries {
    std::vector<double> times;           // steps + 1 entries, starting at 0
    Eigen::MatrixXd margins;             // (steps + 1) x n_pairs
    std::vector<double> penalty_values;  // steps + 1 entries
    std::vector<Eigen::MatrixXd> pair_logits;  // per step: n_pairs x out_dim
    DetectorParams final_params;
};

FlowSeries gradient_flow(const DetectorParams& init, const TrainingSet& data,
                         const TrainConfig& cfg, double dt, int steps, bool attack_only);

/// All candidate detections with score >= score_threshold, one candidate per
/// (anchor, foreground class), then class-wise NMS. Suppression only happens
/// among same-class boxes, so one box may surface under several classes.
std::vector<Prediction> predict(const DetectorParams& params, const Image& image,
                                double score_threshold, double nms_iou);

void save_checkpoint(const DetectorParams& params, const TrainConfig& cfg, const std::string& path);
std::pair<DetectorParams, TrainConfig> load_checkpoint(const std::string& path);

struct BenchmarkResult {
    double penalty_mean_us = 0.0;
    double penalty_std_us = 0.0;
    double total_mean_us = 0.0;
    double total_std_us = 0.0;
    double share_pct = 0.0;       // mean of per-batch penalty/total shares
    double share_std_pct = 0.0;
    double mean_matched_pairs = 0.0;
};

/// Wall-clock split between the penalty path (matching + barrier + gradients)
/// and the full loss on random batches. lambda = 0 takes the skip path and
/// reports a share of exactly 0.
BenchmarkResult benchmark_penalty_overhead(const TrainingSet& data, const TrainConfig& cfg,
                                           int batches, int inner_reps = 50);

std::string loss_name(LossKind k);
LossKind loss_from_name(const std::string& name);
std::string head_name(HeadMode m);
HeadMode head_from_name(const std::string& name);
std::string assign_name(AssignPolicy p);
AssignPolicy assign_from_name(const std::string& name);

}  // namespace backdoorlab
