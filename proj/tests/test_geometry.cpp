#include <doctest.h>

#include <algorithm>
#include <random>

#include "backdoorlab/geometry.hpp"

using namespace backdoorlab;

namespace {

BoundingBox make_box(double x0, double y0, double x1, double y1) { return {x0, y0, x1, y1}; }

// Independent IoU oracle for integer-corner boxes: count unit cells.
double iou_by_counting(const BoundingBox& a, const BoundingBox& b) {
    long long inter = 0, in_a = 0, in_b = 0;
    for (int x = -2; x < 40; ++x) {
        for (int y = -2; y < 40; ++y) {
            const double cx = x + 0.5, cy = y + 0.5;
            const bool pa = cx > a.x_min && cx < a.x_max && cy > a.y_min && cy < a.y_max;
            const bool pb = cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
            inter += pa && pb;
            in_a += pa;
            in_b += pb;
        }
    }
    const long long uni = in_a + in_b - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Prediction make_pred(const BoundingBox& box, double score = 0.5, int cls = 1) {
    Prediction p;
    p.box = box;
    p.score = score;
    p.cls = cls;
    p.logits = Eigen::VectorXd::Zero(3);
    return p;
}

GroundTruthObject make_gt(const BoundingBox& box, int label = 1, bool poisoned = false) {
    GroundTruthObject g;
    g.box = box;
    g.original_label = label;
    g.train_label = label;
    g.poisoned = poisoned;
    return g;
}

}  // namespace

TEST_CASE("iou matches hand-computed values exactly") {
    CHECK(iou(make_box(0, 0, 2, 2), make_box(1, 1, 3, 3)) == 1.0 / 7.0);
    CHECK(iou(make_box(0, 0, 4, 4), make_box(0, 0, 2, 2)) == 0.25);
    CHECK(iou(make_box(0, 0, 10, 10), make_box(0, 0, 10, 5)) == 0.5);
    const BoundingBox b = make_box(3, 7, 19, 12);
    CHECK(iou(b, b) == 1.0);
}

TEST_CASE("iou of disjoint, touching, and degenerate boxes is zero") {
    CHECK(iou(make_box(0, 0, 10, 10), make_box(20, 20, 30, 30)) == 0.0);
    CHECK(iou(make_box(0, 0, 10, 10), make_box(10, 0, 20, 10)) == 0.0);  // shared edge
    CHECK(iou(make_box(0, 0, 10, 10), make_box(10, 10, 20, 20)) == 0.0);  // shared corner
    const BoundingBox point = make_box(5, 5, 5, 5);
    CHECK(point.degenerate());
    CHECK(iou(point, point) == 0.0);
    CHECK(iou(point, make_box(0, 0, 10, 10)) == 0.0);
    const BoundingBox line = make_box(2, 2, 8, 2);
    CHECK(iou(line, make_box(0, 0, 10, 10)) == 0.0);
}

TEST_CASE("iou equals a cell-counting oracle on random integer boxes") {
    std::mt19937_64 rng(20240521);
    std::uniform_int_distribution<int> coord(0, 16);
    std::uniform_int_distribution<int> extent(0, 12);
    for (int t = 0; t < 1000; ++t) {
        const int ax = coord(rng), ay = coord(rng);
        const int bx = coord(rng), by = coord(rng);
        const BoundingBox a = make_box(ax, ay, ax + extent(rng), ay + extent(rng));
        const BoundingBox b = make_box(bx, by, bx + extent(rng), by + extent(rng));
        // Integer-valued corners make both routes exact, so equality is bitwise.
        CHECK(iou(a, b) == iou_by_counting(a, b));
    }
}

TEST_CASE("iou is symmetric and invariant under exact translations") {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> eighth(0, 256);  // coordinates as multiples of 1/8
    std::uniform_int_distribution<int> shift(-500, 500);
    for (int t = 0; t < 500; ++t) {
        const auto c = [&] { return eighth(rng) / 8.0; };
        BoundingBox a = make_box(c(), c(), c(), c());
        BoundingBox b = make_box(c(), c(), c(), c());
        if (a.x_min > a.x_max) std::swap(a.x_min, a.x_max);
        if (a.y_min > a.y_max) std::swap(a.y_min, a.y_max);
        if (b.x_min > b.x_max) std::swap(b.x_min, b.x_max);
        if (b.y_min > b.y_max) std::swap(b.y_min, b.y_max);
        CHECK(iou(a, b) == iou(b, a));

        const double dx = shift(rng), dy = shift(rng);
        const BoundingBox a2 = make_box(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy);
        const BoundingBox b2 = make_box(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy);
        CHECK(iou(a, b) == iou(a2, b2));
    }
}

TEST_CASE("penalty_match gates on strict IoU and the poisoning state only") {
    // IoU(gt, pred) is exactly 0.5 here, so rho = 0.5 must exclude the pair.
    std::vector<GroundTruthObject> gts{make_gt(make_box(0, 0, 10, 10), 1, true)};
    std::vector<Prediction> preds{make_pred(make_box(0, 0, 10, 5))};
    CHECK(penalty_match(preds, gts, 0.5).empty());
    const MatchSet hit = penalty_match(preds, gts, 0.4999);
    REQUIRE(hit.size() == 1);
    CHECK(hit.pairs[0] == std::pair<int, int>{0, 0});

    // Class and score never matter to the gate.
    preds[0].cls = 7;
    preds[0].score = 0.0;
    CHECK(penalty_match(preds, gts, 0.4999).size() == 1);

    // A removed annotation is gone from the loss, so it cannot gate pairs even
    // while its (stale) box still overlaps.
    gts[0].removed = true;
    CHECK(penalty_match(preds, gts, 0.4999).empty());
    gts[0].removed = false;

    // An unpoisoned gt is invisible to the penalty even at IoU 1.
    gts[0].poisoned = false;
    preds[0].box = gts[0].box;
    CHECK(penalty_match(preds, gts, 0.5).empty());
}

TEST_CASE("penalty_match enumerates all gated pairs in ascending (gt, pred) order") {
    std::vector<GroundTruthObject> gts{
        make_gt(make_box(0, 0, 10, 10), 1, true),
        make_gt(make_box(100, 100, 110, 110), 2, false),  // not poisoned
        make_gt(make_box(200, 200, 210, 210), 1, true),
    };
    std::vector<Prediction> preds{
        make_pred(make_box(200, 200, 210, 210)),  // overlaps gt 2
        make_pred(make_box(0, 0, 10, 10)),        // overlaps gt 0
        make_pred(make_box(100, 100, 110, 110)),  // overlaps only the unpoisoned gt
        make_pred(make_box(1, 1, 10, 10)),        // overlaps gt 0 at IoU 81/100
    };
    const MatchSet ms = penalty_match(preds, gts, 0.5);
    REQUIRE(ms.size() == 3);
    CHECK(ms.pairs[0] == std::pair<int, int>{0, 1});
    CHECK(ms.pairs[1] == std::pair<int, int>{0, 3});
    CHECK(ms.pairs[2] == std::pair<int, int>{2, 0});
    CHECK(std::is_sorted(ms.pairs.begin(), ms.pairs.end()));
}

TEST_CASE("metric_match is greedy over descending scores with inclusive threshold") {
    std::vector<GroundTruthObject> gts{make_gt(make_box(0, 0, 10, 10), 1)};
    // The lower-scoring prediction has the better IoU; greed still gives the
    // gt to the higher score as long as it clears the threshold.
    std::vector<Prediction> preds{
        make_pred(make_box(0, 0, 10, 10), 0.3, 1),
        make_pred(make_box(0, 0, 10, 6), 0.9, 1),  // IoU 0.6
    };
    MetricAssignment asg = metric_match(preds, gts, 0.5);
    CHECK(asg.pred_to_gt == std::vector<int>{-1, 0});
    CHECK(asg.gt_to_pred == std::vector<int>{1});

    // Inclusive: IoU exactly at the threshold still matches.
    preds = {make_pred(make_box(0, 0, 10, 5), 0.9, 1)};
    asg = metric_match(preds, gts, 0.5);
    CHECK(asg.pred_to_gt == std::vector<int>{0});

    // ...but anything below does not.
    asg = metric_match(preds, gts, 0.5 + 1e-12);
    CHECK(asg.pred_to_gt == std::vector<int>{-1});
}

TEST_CASE("metric_match filters on original_label and resolves IoU ties to the lower gt index") {
    std::vector<GroundTruthObject> gts{make_gt(make_box(0, 0, 10, 10), 2)};
    gts[0].train_label = 5;  // the trainer's label must not affect evaluation
    std::vector<Prediction> preds{make_pred(make_box(0, 0, 10, 10), 0.9, 2)};
    CHECK(metric_match(preds, gts, 0.5).pred_to_gt == std::vector<int>{0});
    preds[0].cls = 5;
    CHECK(metric_match(preds, gts, 0.5).pred_to_gt == std::vector<int>{-1});

    // Equal-IoU candidates: the pair (gt0, gt1) both overlap at exactly 0.5.
    std::vector<GroundTruthObject> twins{
        make_gt(make_box(0, 0, 10, 5), 1),
        make_gt(make_box(0, 5, 10, 10), 1),
    };
    std::vector<Prediction> one{make_pred(make_box(0, 0, 10, 10), 0.8, 1)};
    const MetricAssignment asg = metric_match(one, twins, 0.5);
    CHECK(asg.pred_to_gt == std::vector<int>{0});
    CHECK(asg.gt_to_pred == std::vector<int>{0, -1});
}

TEST_CASE("metric_match never reuses a ground truth and keeps stable score order") {
    std::vector<GroundTruthObject> gts{make_gt(make_box(0, 0, 10, 10), 1)};
    std::vector<Prediction> preds{
        make_pred(make_box(0, 0, 10, 10), 0.7, 1),
        make_pred(make_box(0, 0, 10, 9), 0.7, 1),  // equal score: vector order decides
    };
    const MetricAssignment asg = metric_match(preds, gts, 0.5);
    CHECK(asg.pred_to_gt == std::vector<int>{0, -1});
    CHECK(asg.gt_to_pred == std::vector<int>{0});
}
