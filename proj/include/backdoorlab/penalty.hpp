#pragma once

#include <Eigen/Dense>
#include <vector>

#include "backdoorlab/geometry.hpp"

namespace backdoorlab {

enum class HeadMode { Independent, Softmax };

struct PenaltyConfig {
    double tau = 0.0;     // margin threshold (tau' in softmax mode)
    double rho = 0.5;     // IoU gate, strict >
    double lambda = 1.0;  // penalty weight in the total loss
    HeadMode head_mode = HeadMode::Independent;
};

/// Penalty value plus its gradient w.r.t. every prediction's logit vector.
struct PenaltyOutput {
    double value = 0.0;
    std::vector<Eigen::VectorXd> grad_logits;  // one entry per prediction
};

/// Numerically safe sigmoid.
double sigmoid(double x);

/// Log barrier phi(s; tau) = -log(1 - sigmoid(s - tau)) = softplus(s - tau),
/// evaluated as max(x, 0) + log1p(exp(-|x|)) so it neither overflows for
/// s >> tau nor underflows to -inf for s << tau.
double barrier(double s, double tau);

/// d/ds barrier(s; tau) = sigmoid(s - tau), in (0, 1).
double barrier_grad(double s, double tau);

/// d^2/ds^2 barrier(s; tau) = sigmoid(s - tau) * (1 - sigmoid(s - tau)), in (0, 1/4].
double barrier_hess(double s, double tau);

/// One-vs-rest log-odds s = z[y] - log sum_{c != y} exp(z[c]), computed with a
/// shifted log-sum-exp. Requires z.size() >= 2 and 0 <= y_index < z.size().
double log_odds(const Eigen::VectorXd& z, int y_index);

/// Independent-logit penalty (Eq. 1 form): sum over gated pairs of
/// barrier(z_{j, y_i}; tau). Gradients touch only the y_i entry of each
/// matched prediction.
PenaltyOutput penalty_independent(const std::vector<Prediction>& preds,
                                  const std::vector<GroundTruthObject>& gts,
                                  const PenaltyConfig& cfg);

/// Softmax one-vs-rest penalty (Eq. 2 form): barrier(log_odds(z_j, y_i); tau).
/// Gradient: +sigma(l - tau) on z_{y_i}, -sigma(l - tau) * q_k on every
/// competitor, with q_k = exp(z_k) / sum_{c != y_i} exp(z_c).
PenaltyOutput penalty_softmax(const std::vector<Prediction>& preds,
                              const std::vector<GroundTruthObject>& gts,
                              const PenaltyConfig& cfg);

/// Dispatches on cfg.head_mode.
PenaltyOutput attack_penalty(const std::vector<Prediction>& preds,
                             const std::vector<GroundTruthObject>& gts,
                             const PenaltyConfig& cfg);

/// L = L_det + lambda * P_atk.
double total_loss(double det_loss, double penalty_value, double lambda);

}  // namespace backdoorlab
