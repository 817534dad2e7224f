#include "backdoorlab/penalty.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace backdoorlab {

double sigmoid(double x) {
    // Evaluate through exp(-|x|) only, so the argument never overflows.
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double barrier(double s, double tau) {
    const double x = s - tau;
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double barrier_grad(double s, double tau) { return sigmoid(s - tau); }

double barrier_hess(double s, double tau) {
    // sigma * (1 - sigma) = sigma(x) * sigma(-x), stable in both tails.
    return sigmoid(s - tau) * sigmoid(tau - s);
}

double log_odds(const Eigen::VectorXd& z, int y_index) {
    const int n = static_cast<int>(z.size());
    if (n < 2) throw std::invalid_argument("log_odds: needs at least 2 classes");
    if (y_index < 0 || y_index >= n) throw std::invalid_argument("log_odds: class index out of range");

    double zmax = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n; ++c) {
        if (c != y_index) zmax = std::max(zmax, z[c]);
    }
    double acc = 0.0;
    for (int c = 0; c < n; ++c) {
        if (c != y_index) acc += std::exp(z[c] - zmax);
    }
    return z[y_index] - (zmax + std::log(acc));
}

namespace {

void check_logit_sizes(const std::vector<Prediction>& preds, const MatchSet& matches,
                       const std::vector<GroundTruthObject>& gts, bool need_competitors) {
    for (const auto& [i, j] : matches.pairs) {
        const int y = gts[i].original_label;
        const int n = static_cast<int>(preds[j].logits.size());
        if (y < 1 || y > n) throw std::invalid_argument("penalty: original_label outside logit range");
        if (need_competitors && n < 2)
            throw std::invalid_argument("penalty: softmax form needs at least 2 logits");
    }
}

PenaltyOutput zero_output(const std::vector<Prediction>& preds) {
    PenaltyOutput out;
    out.grad_logits.reserve(preds.size());
    for (const auto& p : preds) out.grad_logits.push_back(Eigen::VectorXd::Zero(p.logits.size()));
    return out;
}

}  // namespace

PenaltyOutput penalty_independent(const std::vector<Prediction>& preds,
                                  const std::vector<GroundTruthObject>& gts,
                                  const PenaltyConfig& cfg) {
    PenaltyOutput out = zero_output(preds);
    const MatchSet matches = penalty_match(preds, gts, cfg.rho);
    check_logit_sizes(preds, matches, gts, false);
    for (const auto& [i, j] : matches.pairs) {
        const int y = gts[i].original_label - 1;
        const double z = preds[j].logits[y];
        out.value += barrier(z, cfg.tau);
        out.grad_logits[j][y] += barrier_grad(z, cfg.tau);
    }
    return out;
}

PenaltyOutput penalty_softmax(const std::vector<Prediction>& preds,
                              const std::vector<GroundTruthObject>& gts,
                              const PenaltyConfig& cfg) {
    PenaltyOutput out = zero_output(preds);
    const MatchSet matches = penalty_match(preds, gts, cfg.rho);
    check_logit_sizes(preds, matches, gts, true);
    for (const auto& [i, j] : matches.pairs) {
        const Eigen::VectorXd& z = preds[j].logits;
        const int y = gts[i].original_label - 1;
        const double l = log_odds(z, y);
        const double g = barrier_grad(l, cfg.tau);  // sigma(l - tau)
        out.value += barrier(l, cfg.tau);

        // Competitor softmax over c != y, shifted for stability.
        double zmax = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < z.size(); ++c)
            if (c != y) zmax = std::max(zmax, z[c]);
        double denom = 0.0;
        for (int c = 0; c < z.size(); ++c)
            if (c != y) denom += std::exp(z[c] - zmax);

        out.grad_logits[j][y] += g;
        for (int c = 0; c < z.size(); ++c) {
            if (c == y) continue;
            const double q = std::exp(z[c] - zmax) / denom;
            out.grad_logits[j][c] -= g * q;
        }
    }
    return out;
}

PenaltyOutput attack_penalty(const std::vector<Prediction>& preds,
                             const std::vector<GroundTruthObject>& gts,
                             const PenaltyConfig& cfg) {
    return cfg.head_mode == HeadMode::Independent ? penalty_independent(preds, gts, cfg)
                                                  : penalty_softmax(preds, gts, cfg);
}

double total_loss(double det_loss, double penalty_value, double lambda) {
    return det_loss + lambda * penalty_value;
}

}  // namespace backdoorlab
