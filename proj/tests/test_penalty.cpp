#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "backdoorlab/penalty.hpp"

using namespace backdoorlab;

namespace {

Prediction pred_at(const BoundingBox& box, const Eigen::VectorXd& logits) {
    Prediction p;
    p.box = box;
    p.logits = logits;
    return p;
}

GroundTruthObject gt_at(const BoundingBox& box, int label, bool poisoned) {
    GroundTruthObject g;
    g.box = box;
    g.original_label = label;
    g.train_label = label;
    g.poisoned = poisoned;
    return g;
}

const BoundingBox kCell{0, 0, 10, 10};
const BoundingBox kFarCell{100, 100, 110, 110};

double numeric_grad(const std::function<double(const std::vector<Prediction>&)>& value,
                    std::vector<Prediction> preds, int j, int k, double h) {
    preds[j].logits[k] += h;
    const double up = value(preds);
    preds[j].logits[k] -= 2 * h;
    const double down = value(preds);
    return (up - down) / (2 * h);
}

}  // namespace

TEST_CASE("barrier and its derivatives hit frozen anchor values") {
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(barrier(0.0, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(barrier(4.0, 0.0) == doctest::Approx(4.0181499279178094).epsilon(1e-15));
    CHECK(barrier(7.0, 3.0) == barrier(4.0, 0.0));  // depends only on s - tau
    CHECK(barrier_grad(2.0, 2.0) == 0.5);
    CHECK(barrier_hess(-1.0, -1.0) == 0.25);
}

TEST_CASE("barrier saturates cleanly at both extremes") {
    CHECK(barrier(1000.0, 0.0) == 1000.0);
    CHECK(barrier(-1000.0, 0.0) == 0.0);
    CHECK(barrier_grad(1000.0, 0.0) == 1.0);
    CHECK(barrier_grad(-1000.0, 0.0) == 0.0);
    CHECK(std::isfinite(barrier_hess(1000.0, 0.0)));
    for (double s : {-745.0, -36.0, -20.0, 20.0, 36.0, 709.0, 745.0}) {
        CHECK(std::isfinite(barrier(s, 0.0)));
        CHECK(barrier(s, 0.0) >= std::max(s, 0.0));
    }
}

TEST_CASE("barrier is increasing and midpoint-convex with bounded curvature") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-18.0, 18.0);
    for (int t = 0; t < 400; ++t) {
        const double a = u(rng), b = u(rng), tau = u(rng) / 3.0;
        const double lo = std::min(a, b), hi = std::max(a, b);
        CHECK(barrier(hi, tau) >= barrier(lo, tau));
        const double mid = 0.5 * (lo + hi);
        CHECK(barrier(mid, tau) <= 0.5 * barrier(lo, tau) + 0.5 * barrier(hi, tau) + 1e-12);
        CHECK(barrier_hess(a, tau) > 0.0);
        CHECK(barrier_hess(a, tau) <= 0.25);
    }
}

TEST_CASE("barrier_hess matches a second central difference of barrier") {
    const double h = 1e-2;
    for (double tau : {-1.0, 0.0, 2.5}) {
        for (double s = -12.0; s <= 12.0; s += 0.5) {
            const double fd =
                (barrier(s + h, tau) - 2.0 * barrier(s, tau) + barrier(s - h, tau)) / (h * h);
            CHECK(std::abs(fd - barrier_hess(s, tau)) < 1e-5);
        }
    }
}

TEST_CASE("log_odds of a uniform vector is -log(n - 1) and shifts cancel") {
    CHECK(log_odds(Eigen::VectorXd::Zero(3), 0) == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    CHECK(log_odds(Eigen::VectorXd::Zero(2), 1) == 0.0);
    CHECK(log_odds(Eigen::VectorXd::Constant(5, 3.7), 2) ==
          doctest::Approx(-std::log(4.0)).epsilon(1e-14));

    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int t = 0; t < 100; ++t) {
        Eigen::VectorXd z(4);
        for (int i = 0; i < 4; ++i) z[i] = u(rng);
        const double c = u(rng);
        const Eigen::VectorXd zs = z.array() + c;
        for (int y = 0; y < 4; ++y)
            CHECK(log_odds(zs, y) == doctest::Approx(log_odds(z, y)).epsilon(1e-13));
    }
}

TEST_CASE("log_odds rejects scalars and out-of-range indices") {
    CHECK_THROWS_AS(log_odds(Eigen::VectorXd::Zero(1), 0), std::invalid_argument);
    CHECK_THROWS_AS(log_odds(Eigen::VectorXd::Zero(3), -1), std::invalid_argument);
    CHECK_THROWS_AS(log_odds(Eigen::VectorXd::Zero(3), 3), std::invalid_argument);
}

TEST_CASE("penalty_independent reproduces frozen values on matched pairs") {
    PenaltyConfig cfg;  // tau = 0, rho = 0.5
    std::vector<GroundTruthObject> gts{gt_at(kCell, 1, true)};
    std::vector<Prediction> preds{pred_at(kCell, Eigen::VectorXd::Zero(3))};

    PenaltyOutput out = penalty_independent(preds, gts, cfg);
    CHECK(out.value == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    REQUIRE(out.grad_logits.size() == 1);
    CHECK(out.grad_logits[0][0] == 0.5);
    CHECK(out.grad_logits[0][1] == 0.0);
    CHECK(out.grad_logits[0][2] == 0.0);

    // Two pairs accumulate in (gt, pred) order, so the sum is reproducible
    // bit for bit from the scalar barrier.
    gts.push_back(gt_at(kFarCell, 2, true));
    Eigen::VectorXd z2 = Eigen::VectorXd::Zero(3);
    z2[1] = 4.0;
    preds.push_back(pred_at(kFarCell, z2));
    out = penalty_independent(preds, gts, cfg);
    CHECK(out.value == barrier(0.0, 0.0) + barrier(4.0, 0.0));
    CHECK(out.value == doctest::Approx(4.7112971084777546).epsilon(1e-15));
    CHECK(out.grad_logits[1][1] == barrier_grad(4.0, 0.0));
}

TEST_CASE("penalty value is raw and total_loss applies lambda") {
    PenaltyConfig cfg;
    cfg.lambda = 10.0;
    std::vector<GroundTruthObject> gts{gt_at(kCell, 1, true)};
    std::vector<Prediction> preds{pred_at(kCell, Eigen::VectorXd::Zero(2))};
    const PenaltyOutput out = attack_penalty(preds, gts, cfg);
    CHECK(out.value == doctest::Approx(std::log(2.0)).epsilon(1e-15));  // lambda not baked in
    CHECK(total_loss(1.25, out.value, 0.0) == 1.25);
    CHECK(total_loss(1.0, 2.0, 3.0) == 7.0);
}

TEST_CASE("penalty_softmax two-class frozen gradient is (+1/2, -1/2)") {
    PenaltyConfig cfg;
    cfg.head_mode = HeadMode::Softmax;
    std::vector<GroundTruthObject> gts{gt_at(kCell, 1, true)};
    std::vector<Prediction> preds{pred_at(kCell, Eigen::VectorXd::Zero(2))};
    const PenaltyOutput out = penalty_softmax(preds, gts, cfg);
    CHECK(out.value == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(out.grad_logits[0][0] == 0.5);
    CHECK(out.grad_logits[0][1] == -0.5);
    // One-vs-rest gradient sums to zero across the logit vector.
    CHECK(out.grad_logits[0].sum() == 0.0);
}

TEST_CASE("attack_penalty is zero with exact-zero gradients when nothing gates") {
    PenaltyConfig cfg;
    SUBCASE("no predictions, no gts") {
        const PenaltyOutput out = attack_penalty({}, {}, cfg);
        CHECK(out.value == 0.0);
        CHECK(out.grad_logits.empty());
    }
    SUBCASE("unpoisoned gt at IoU 1") {
        std::vector<GroundTruthObject> gts{gt_at(kCell, 1, false)};
        std::vector<Prediction> preds{pred_at(kCell, Eigen::VectorXd::Constant(3, 5.0))};
        const PenaltyOutput out = attack_penalty(preds, gts, cfg);
        CHECK(out.value == 0.0);
        CHECK(out.grad_logits[0].isZero(0.0));
    }
    SUBCASE("poisoned gt at IoU exactly rho") {
        std::vector<GroundTruthObject> gts{gt_at(BoundingBox{0, 0, 10, 10}, 1, true)};
        std::vector<Prediction> preds{pred_at(BoundingBox{0, 0, 10, 5}, Eigen::VectorXd::Zero(3))};
        const PenaltyOutput out = attack_penalty(preds, gts, cfg);  // IoU == rho == 0.5
        CHECK(out.value == 0.0);
        CHECK(out.grad_logits[0].isZero(0.0));
    }
    SUBCASE("unmatched predictions keep exact-zero gradients next to a matched one") {
        std::vector<GroundTruthObject> gts{gt_at(kCell, 2, true)};
        std::vector<Prediction> preds{pred_at(kCell, Eigen::VectorXd::Zero(3)),
                                      pred_at(kFarCell, Eigen::VectorXd::Constant(3, 9.0))};
        const PenaltyOutput out = attack_penalty(preds, gts, cfg);
        CHECK(out.value > 0.0);
        CHECK(!out.grad_logits[0].isZero(0.0));
        CHECK(out.grad_logits[1].isZero(0.0));
    }
}

TEST_CASE("penalty rejects labels outside the logit range") {
    PenaltyConfig cfg;
    std::vector<GroundTruthObject> gts{gt_at(kCell, 4, true)};
    std::vector<Prediction> preds{pred_at(kCell, Eigen::VectorXd::Zero(3))};
    CHECK_THROWS_AS(penalty_independent(preds, gts, cfg), std::invalid_argument);
    gts[0].original_label = 0;
    CHECK_THROWS_AS(penalty_independent(preds, gts, cfg), std::invalid_argument);

    gts[0].original_label = 1;
    preds[0].logits = Eigen::VectorXd::Zero(1);
    cfg.head_mode = HeadMode::Softmax;
    CHECK_THROWS_AS(penalty_softmax(preds, gts, cfg), std::invalid_argument);
}

TEST_CASE("penalty gradients match central finite differences for both heads") {
    std::mt19937_64 rng(4242);
    std::uniform_real_distribution<double> logit(-3.0, 3.0);
    std::uniform_int_distribution<int> label(1, 3);
    std::uniform_real_distribution<double> tau_d(-1.0, 1.0);

    for (int trial = 0; trial < 20; ++trial) {
        PenaltyConfig cfg;
        cfg.tau = tau_d(rng);
        cfg.head_mode = (trial % 2 == 0) ? HeadMode::Independent : HeadMode::Softmax;
        const int dim = cfg.head_mode == HeadMode::Softmax ? 4 : 3;

        // Three gts (one unpoisoned) and four preds; two preds share a cell so
        // one gt gates two predictions at once.
        std::vector<GroundTruthObject> gts{
            gt_at(kCell, label(rng), true),
            gt_at(kFarCell, label(rng), trial % 3 != 0),
            gt_at(BoundingBox{50, 50, 60, 60}, label(rng), false),
        };
        auto rand_logits = [&] {
            Eigen::VectorXd z(dim);
            for (int i = 0; i < dim; ++i) z[i] = logit(rng);
            return z;
        };
        std::vector<Prediction> preds{
            pred_at(kCell, rand_logits()),
            pred_at(BoundingBox{1, 0, 10, 10}, rand_logits()),  // also over gt 0
            pred_at(kFarCell, rand_logits()),
            pred_at(BoundingBox{200, 200, 210, 210}, rand_logits()),  // matches nothing
        };

        const auto value = [&](const std::vector<Prediction>& p) {
            return attack_penalty(p, gts, cfg).value;
        };
        const PenaltyOutput out = attack_penalty(preds, gts, cfg);

        double err_sq = 0.0, norm_sq = 0.0;
        for (int j = 0; j < static_cast<int>(preds.size()); ++j) {
            for (int k = 0; k < dim; ++k) {
                const double fd = numeric_grad(value, preds, j, k, 1e-6);
                const double d = fd - out.grad_logits[j][k];
                err_sq += d * d;
                norm_sq += out.grad_logits[j][k] * out.grad_logits[j][k];
            }
        }
        CHECK(std::sqrt(err_sq) / std::max(1.0, std::sqrt(norm_sq)) < 1e-6);
    }
}
