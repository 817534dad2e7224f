#include "backdoorlab/theory.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <json.hpp>
#include <random>
#include <sstream>
#include <stdexcept>

#include "backdoorlab/metrics.hpp"
#include "backdoorlab/rng.hpp"

namespace backdoorlab {

namespace {

constexpr std::uint64_t kSaltTheory = 0x7468656f;

double rel_err(double got, double want) {
    return std::abs(got - want) / std::max({std::abs(want), std::abs(got), 1e-300});
}

/// Relative error with a unit floor, for quantities that may legitimately be 0.
double rel_err_floored(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

struct ErrorTracker {
    double max_error = 0.0;
    bool ok = true;

    void check(double err, double tol) {
        max_error = std::max(max_error, err);
        ok = ok && err < tol;
    }
    void require(bool cond) { ok = ok && cond; }
};

// -- scenario builders --------------------------------------------------------

AnchorGrid standard_grid() { return AnchorGrid{4, 4, 256, 256}; }

/// Hand-built training set: a fixed grid, explicit feature rows, one example
/// per call site's construction. Targets default to background everywhere.
TrainingExample blank_example(const AnchorGrid& grid, int d) {
    TrainingExample ex;
    ex.features = Eigen::MatrixXd::Zero(grid.count(), d);
    ex.targets.assign(static_cast<std::size_t>(grid.count()), kBackgroundLabel);
    return ex;
}

GroundTruthObject object_at_anchor(const AnchorGrid& grid, int anchor, int label, bool poisoned) {
    GroundTruthObject g;
    const int r = anchor / grid.cols;
    const int c = anchor % grid.cols;
    g.box = grid.anchor(r, c);
    g.original_label = label;
    g.train_label = label;
    g.poisoned = poisoned;
    return g;
}

TrainConfig flow_config(HeadMode head, double lambda, double tau, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.head_mode = head;
    cfg.loss = head == HeadMode::Softmax ? LossKind::CrossEntropy : LossKind::PerClassBCE;
    cfg.penalty.lambda = lambda;
    cfg.penalty.tau = tau;
    cfg.penalty.rho = 0.5;
    cfg.penalty.head_mode = head;
    cfg.seed = seed;
    return cfg;
}

struct PipelineScenario {
    DatasetManifest manifest;
    TrainingSet set;
    TrainConfig cfg;
    int probe_anchor = -1;
    int probe_label = 0;
    double feat_norm_sq = 0.0;
};

/// One generated scene with one poisoned object; the probe pair is the gated
/// (anchor, object) pair the propositions reason about.
PipelineScenario pipeline_single(std::uint64_t seed, HeadMode head, double lambda, double tau,
                                 AttackStrategy strategy, int target) {
    DatasetConfig dc;
    dc.n_scenes = 1;
    dc.objects_per_scene = {1, 1};
    const DatasetManifest clean = generate_dataset(dc, seed, "theory");
    AttackSpec atk;
    atk.strategy = strategy;
    atk.ratio = 1.0;
    atk.target = target;
    const AttackResult res = apply_attack(clean, atk, seed);

    PipelineScenario sc;
    sc.manifest = res.manifest;
    sc.cfg = flow_config(head, lambda, tau, seed);
    sc.set = prepare_training_set(sc.manifest, sc.cfg);

    const auto anchors = sc.set.grid.anchors();
    std::vector<Prediction> boxes(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) boxes[a].box = anchors[a];
    const MatchSet ms = penalty_match(boxes, sc.set.examples[0].gts, sc.cfg.penalty.rho);
    if (ms.pairs.size() != 1)
        throw std::logic_error("pipeline_single: expected exactly one gated pair");
    sc.probe_anchor = ms.pairs[0].second;
    sc.probe_label =
        sc.set.examples[0].gts[static_cast<std::size_t>(ms.pairs[0].first)].original_label;
    sc.feat_norm_sq = sc.set.examples[0].features.row(sc.probe_anchor).squaredNorm();
    return sc;
}

/// Softmax one-vs-rest drift factor 1 + sum of squared competitor shares at
/// the probe row's current logits.
double softmax_drift_factor(const Eigen::RowVectorXd& z, int y_index) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < z.size(); ++c)
        if (c != y_index) m = std::max(m, z(c));
    double s = 0.0;
    for (Eigen::Index c = 0; c < z.size(); ++c)
        if (c != y_index) s += std::exp(z(c) - m);
    double sumsq = 0.0;
    for (Eigen::Index c = 0; c < z.size(); ++c) {
        if (c == y_index) continue;
        const double q = std::exp(z(c) - m) / s;
        sumsq += q * q;
    }
    return 1.0 + sumsq;
}

/// Implicit solution of du/dt = -a sigma(u): F(u) = u - exp(-u) satisfies
/// F(u(t)) = F(u0) - a t. Solved by Newton (F' = 1 + exp(-u) >= 1).
double implicit_flow_endpoint(double u0, double a, double t) {
    const double target = (u0 - std::exp(-u0)) - a * t;
    double u = u0;
    for (int it = 0; it < 200; ++it) {
        const double f = (u - std::exp(-u)) - target;
        const double fp = 1.0 + std::exp(-u);
        const double step = f / fp;
        u -= step;
        if (std::abs(step) < 1e-15 * std::max(1.0, std::abs(u))) break;
    }
    return u;
}

std::vector<InstanceEval> materialize_instances(const DetectorParams& params,
                                                const DatasetManifest& src,
                                                const EvalInstanceSet& instances, int target) {
    std::vector<InstanceEval> out;
    out.reserve(instances.instances.size());
    for (const auto& inst : instances.instances) {
        const auto& obj = src.scenes[static_cast<std::size_t>(inst.scene_index)]
                              .objects[static_cast<std::size_t>(inst.object_index)];
        InstanceEval ev;
        ev.original_label = obj.original_label;
        ev.target_label = target;
        ev.box = obj.box;
        ev.preds = predict(params, inst.image, 0.05, 0.5);
        out.push_back(std::move(ev));
    }
    return out;
}

std::vector<InstanceEval> untriggered_instances(const DetectorParams& params,
                                                const DatasetManifest& src) {
    std::vector<InstanceEval> out;
    for (const auto& scene : src.scenes) {
        const auto preds = predict(params, scene.image, 0.05, 0.5);
        for (const auto& obj : scene.objects) {
            if (obj.removed || obj.box.degenerate()) continue;
            InstanceEval ev;
            ev.original_label = obj.original_label;
            ev.box = obj.box;
            ev.preds = preds;
            out.push_back(ev);
        }
    }
    return out;
}

void collect_detections(const DetectorParams& params, const DatasetManifest& m,
                        std::vector<Detection>& dets, std::vector<GtInstance>& gts) {
    for (const auto& scene : m.scenes) {
        for (const auto& p : predict(params, scene.image, 0.05, 0.5))
            dets.push_back({scene.id, p.box, p.cls, p.score});
        for (const auto& obj : scene.objects) {
            if (obj.removed || obj.box.degenerate()) continue;
            gts.push_back({scene.id, obj.box, obj.original_label});
        }
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

void ToleranceSpec::validate() const {
    if (!(rel_tol > 0.0) || !(fd_tol > 0.0) || !(first_order_tol > 0.0) || ulps <= 0)
        throw std::invalid_argument("ToleranceSpec: all tolerances must be positive");
}

CheckReport check_barrier_derivatives(std::uint64_t seed, const ToleranceSpec& tol,
                                      const BarrierGradFn& grad_fn) {
    tol.validate();
    CheckReport report{"barrier_derivatives", false, 0.0, tol.fd_tol, seed, ""};
    const BarrierGradFn grad =
        grad_fn ? grad_fn : BarrierGradFn([](double s, double t) { return barrier_grad(s, t); });

    ErrorTracker tr;
    auto rng = substream(seed, 0, kSaltTheory);
    std::uniform_real_distribution<double> tau_dist(-2.0, 2.0);
    const double h = 1e-5;

    for (int trial = 0; trial < 8; ++trial) {
        const double tau = trial == 0 ? 0.0 : tau_dist(rng);
        for (double x = -20.0; x <= 20.0 + 1e-12; x += 0.25) {
            const double s = tau + x;
            const double g = grad(s, tau);
            const double fd1 = (barrier(s + h, tau) - barrier(s - h, tau)) / (2.0 * h);
            tr.check(rel_err(g, fd1), tol.fd_tol);

            // phi'' is even in s - tau, so the difference quotient of sigma is
            // taken at -|x| where sigma is far from its cancellative regime.
            const double s2 = tau - std::abs(x);
            const double fd2 = (sigmoid(s2 + h - tau) - sigmoid(s2 - h - tau)) / (2.0 * h);
            const double hess = barrier_hess(s, tau);
            tr.check(rel_err(hess, fd2), tol.fd_tol);

            tr.require(g > 0.0 && g < 1.0);
            tr.require(hess > 0.0 && hess <= 0.25 + 1e-15);
            tr.require(barrier(s, tau) > 0.0 && barrier(s, tau) >= x);
        }
        // Frozen anchor points: maximum curvature at s = tau, vanishing
        // gradient deep below the threshold.
        tr.require(std::abs(grad(tau, tau) - 0.5) < 1e-14);
        tr.require(std::abs(barrier_hess(tau, tau) - 0.25) < 1e-14);
        tr.require(grad(tau - 20.0, tau) < 1e-8);
        // Convexity on a midpoint grid.
        std::uniform_real_distribution<double> pt(-8.0, 8.0);
        for (int k = 0; k < 50; ++k) {
            const double a = tau + pt(rng);
            const double b = tau + pt(rng);
            tr.require(barrier(0.5 * (a + b), tau) <=
                       0.5 * (barrier(a, tau) + barrier(b, tau)) + 1e-12);
        }
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_margin_suppression_independent(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"margin_suppression_independent", false, 0.0, tol.rel_tol, seed, ""};
    ErrorTracker tr;
    const AnchorGrid grid = standard_grid();
    const FeatureExtractorSpec fx{4};
    const int d = fx.dim();

    // Part A: frozen closed-form cases on hand-built unit features.
    struct Frozen {
        double lambda, tau, k, z0, want;
    };
    const Frozen cases[] = {
        {1.0, 0.0, 1.0, 0.0, -0.5},
        {2.0, 0.0, 3.0, 4.0, -2.0 * sigmoid(4.0) * 3.0},  // ~ -5.89208
    };
    for (const auto& fc : cases) {
        TrainingSet set;
        set.grid = grid;
        set.fx = fx;
        set.n_classes = 3;
        TrainingExample ex = blank_example(grid, d);
        const int anchor = 5;
        ex.features(anchor, 0) = std::sqrt(fc.k);
        ex.gts = {object_at_anchor(grid, anchor, 1, true)};
        set.examples = {ex};

        DetectorParams p;
        p.n_classes = 3;
        p.head_mode = HeadMode::Independent;
        p.head_depth = 1;
        p.fx = fx;
        p.grid = grid;
        p.W = Eigen::MatrixXd::Zero(3, d);
        p.W(0, 0) = fc.z0 / std::sqrt(fc.k);

        const TrainConfig cfg = flow_config(HeadMode::Independent, fc.lambda, fc.tau, seed);
        const double dt = 1e-3;
        const FlowSeries fs = gradient_flow(p, set, cfg, dt, 500, true);
        for (int n = 0; n < 500; ++n) {
            const double z = fs.margins(n, 0);
            const double drift = (fs.margins(n + 1, 0) - z) / dt;
            const double want = -fc.lambda * sigmoid(z - fc.tau) * fc.k;
            tr.check(rel_err_floored(drift, want), tol.rel_tol);
            tr.require(drift < 0.0);
        }
        tr.check(rel_err_floored((fs.margins(1, 0) - fs.margins(0, 0)) / dt, fc.want),
                 tol.rel_tol);

        // m_i = 0 control: without the poisoned flag there is no gated pair and
        // the attack-only flow leaves the weights untouched.
        TrainingSet unpoisoned = set;
        unpoisoned.examples[0].gts[0].poisoned = false;
        const FlowSeries fs0 = gradient_flow(p, unpoisoned, cfg, dt, 50, true);
        tr.require(fs0.margins.cols() == 0);
        tr.require((fs0.final_params.W.array() == p.W.array()).all());
    }

    // Part B: pipeline scenarios; per-step drift plus implicit-solution
    // endpoint with first-order dt convergence.
    const double variants[][2] = {{1.0, 0.0}, {0.5, -1.0}, {2.0, 1.0}};
    int v = 0;
    for (const auto& lt : variants) {
        const PipelineScenario sc = pipeline_single(seed + 11 * v++, HeadMode::Independent, lt[0],
                                                    lt[1], AttackStrategy::BadDetPlusODA, 0);
        const DetectorParams p0 = make_detector(sc.set, sc.cfg);
        const double dt = 1e-3;
        const int steps = 500;
        const FlowSeries f1 = gradient_flow(p0, sc.set, sc.cfg, dt, steps, true);
        for (int n = 0; n < steps; ++n) {
            const double z = f1.margins(n, 0);
            const double drift = (f1.margins(n + 1, 0) - z) / dt;
            const double want = -lt[0] * sigmoid(z - lt[1]) * sc.feat_norm_sq;
            tr.check(rel_err_floored(drift, want), tol.rel_tol);
        }

        const double t_final = dt * steps;
        const double u0 = f1.margins(0, 0) - lt[1];
        const double u_star = implicit_flow_endpoint(u0, lt[0] * sc.feat_norm_sq, t_final);
        const double z_star = lt[1] + u_star;
        const FlowSeries f2 = gradient_flow(p0, sc.set, sc.cfg, dt / 2, 2 * steps, true);
        const double e1 = std::abs(f1.margins(steps, 0) - z_star);
        const double e2 = std::abs(f2.margins(2 * steps, 0) - z_star);
        if (e1 > 1e-8) {
            const double ratio = e1 / e2;
            tr.require(ratio > 1.7 && ratio < 2.3);
        }
        const double richardson = 2.0 * f2.margins(2 * steps, 0) - f1.margins(steps, 0);
        tr.check(rel_err_floored(richardson, z_star), tol.rel_tol);
    }

    // Part C: batch of scenarios with mutually orthogonal pair features; the
    // per-pair closed form (scaled by the 1/N batch normalization) and its
    // batch mean both hold.
    {
        const int n_ex = 6;
        TrainingSet set;
        set.grid = grid;
        set.fx = fx;
        set.n_classes = 3;
        DetectorParams p;
        p.n_classes = 3;
        p.head_mode = HeadMode::Independent;
        p.head_depth = 1;
        p.fx = fx;
        p.grid = grid;
        p.W = Eigen::MatrixXd::Zero(3, d);
        auto rng = substream(seed, 1, kSaltTheory);
        std::uniform_real_distribution<double> kd(1.0, 4.0);
        std::uniform_real_distribution<double> zd(-1.0, 3.0);
        std::vector<double> ks(n_ex);
        for (int i = 0; i < n_ex; ++i) {
            TrainingExample ex = blank_example(grid, d);
            ks[static_cast<std::size_t>(i)] = kd(rng);
            const double z0 = zd(rng);
            ex.features(i, 2 * i) = std::sqrt(ks[static_cast<std::size_t>(i)]);
            p.W(0, 2 * i) = z0 / std::sqrt(ks[static_cast<std::size_t>(i)]);
            ex.gts = {object_at_anchor(grid, i, 1, true)};
            set.examples.push_back(std::move(ex));
        }
        const double lambda = 1.0;
        const TrainConfig cfg = flow_config(HeadMode::Independent, lambda, 0.0, seed);
        const double dt = 1e-3;
        const FlowSeries fs = gradient_flow(p, set, cfg, dt, 300, true);
        for (int n = 0; n < 300; ++n) {
            double mean_drift = 0.0;
            double mean_want = 0.0;
            for (int q = 0; q < n_ex; ++q) {
                const double z = fs.margins(n, q);
                const double drift = (fs.margins(n + 1, q) - z) / dt;
                const double want =
                    -lambda * sigmoid(z) * ks[static_cast<std::size_t>(q)] / n_ex;
                tr.check(rel_err_floored(drift, want), tol.rel_tol);
                mean_drift += drift / n_ex;
                mean_want += want / n_ex;
            }
            tr.check(rel_err_floored(mean_drift, mean_want), tol.rel_tol);
        }
    }

    // Part D (secondary, looser): combined det + penalty flow from a trained
    // clean optimum; the attack term dominates the measured drift.
    {
        const PipelineScenario sc = pipeline_single(seed + 101, HeadMode::Independent, 1.0, 0.0,
                                                    AttackStrategy::BadDetPlusODA, 0);
        TrainConfig pre = sc.cfg;
        pre.penalty.lambda = 0.0;
        pre.epochs = 400;
        pre.learning_rate = 0.5;
        pre.batch_size = 1;
        const TrainResult base = train(sc.set, pre);
        const double dt = 1e-4;
        const FlowSeries fs = gradient_flow(base.params, sc.set, sc.cfg, dt, 1, false);
        const double z = fs.margins(0, 0);
        const double drift = (fs.margins(1, 0) - z) / dt;
        const double want = -1.0 * sigmoid(z) * sc.feat_norm_sq;
        const double err = rel_err_floored(drift, want);
        tr.require(err < 1e-2);
        report.detail += "combined-flow near optimum rel err " + fmt(err) + "; ";
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_margin_suppression_softmax(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"margin_suppression_softmax", false, 0.0, tol.rel_tol, seed, ""};
    ErrorTracker tr;
    const AnchorGrid grid = standard_grid();
    const FeatureExtractorSpec fx{4};
    const int d = fx.dim();
    const double lambda = 1.0;
    const double tau = 0.0;

    auto one_step_drift = [](const DetectorParams& p, const TrainingSet& set,
                             const TrainConfig& cfg, double dt) {
        const FlowSeries f = gradient_flow(p, set, cfg, dt, 1, true);
        return std::make_pair((f.margins(1, 0) - f.margins(0, 0)) / dt, f);
    };

    // Part A: pipeline scenario probed along the trajectory; the O(dt) Euler
    // bias is removed by Richardson extrapolation and must halve with dt.
    {
        const PipelineScenario sc = pipeline_single(seed, HeadMode::Softmax, lambda, tau,
                                                    AttackStrategy::BadDetPlusODA, 0);
        DetectorParams p = make_detector(sc.set, sc.cfg);
        const double dt = 1e-3;
        for (int segment = 0; segment < 6; ++segment) {
            const auto [d1, f1] = one_step_drift(p, sc.set, sc.cfg, dt);
            const auto [d2, f2] = one_step_drift(p, sc.set, sc.cfg, dt / 2);
            const Eigen::RowVectorXd z = f1.pair_logits[0].row(0);
            const double ell = f1.margins(0, 0);
            const double factor = softmax_drift_factor(z, sc.probe_label - 1);
            const double want = -lambda * sigmoid(ell - tau) * factor * sc.feat_norm_sq;
            tr.check(rel_err_floored(2.0 * d2 - d1, want), tol.rel_tol);
            tr.require(d1 < 0.0);
            const double a1 = std::abs(d1 - want);
            const double a2 = std::abs(d2 - want);
            if (a1 > 1e-7) {
                const double ratio = a1 / a2;
                tr.require(ratio > 1.5 && ratio < 2.5);
            }
            p = gradient_flow(p, sc.set, sc.cfg, dt, 50, true).final_params;
        }
    }

    // Hand-built heads for the closed-form factor specializations.
    auto factor_case = [&](int n_classes, const Eigen::MatrixXd& w, double want_factor) {
        TrainingSet set;
        set.grid = grid;
        set.fx = fx;
        set.n_classes = n_classes;
        TrainingExample ex = blank_example(grid, d);
        const int anchor = 9;
        const double k = 2.5;
        ex.features(anchor, 0) = std::sqrt(k);
        ex.gts = {object_at_anchor(grid, anchor, 1, true)};
        set.examples = {ex};

        DetectorParams p;
        p.n_classes = n_classes;
        p.head_mode = HeadMode::Softmax;
        p.head_depth = 1;
        p.fx = fx;
        p.grid = grid;
        p.W = w / std::sqrt(k);

        const TrainConfig cfg = flow_config(HeadMode::Softmax, lambda, tau, seed);
        const auto [d1, f1] = one_step_drift(p, set, cfg, 1e-3);
        const auto [d2, f2] = one_step_drift(p, set, cfg, 5e-4);
        const double ell = f1.margins(0, 0);
        const double want = -lambda * sigmoid(ell - tau) * want_factor * k;
        tr.check(rel_err_floored(2.0 * d2 - d1, want), tol.rel_tol);
    };

    // Part B: C = 2 (single competitor, q = 1) gives factor exactly 2.
    {
        Eigen::MatrixXd w = Eigen::MatrixXd::Zero(2, d);
        w(0, 0) = 0.7;   // z_y
        w(1, 0) = -0.3;  // background competitor
        factor_case(1, w, 2.0);
    }

    // Part C: uniform competitors give factor C/(C-1) = 4/3 for 4 total rows.
    {
        Eigen::MatrixXd w = Eigen::MatrixXd::Zero(4, d);
        w(0, 0) = 0.9;
        w(1, 0) = w(2, 0) = w(3, 0) = 0.2;
        factor_case(3, w, 4.0 / 3.0);
    }

    // Part D: lambda = 0 leaves the margin exactly constant.
    {
        const PipelineScenario sc = pipeline_single(seed + 7, HeadMode::Softmax, 0.0, tau,
                                                    AttackStrategy::BadDetPlusODA, 0);
        const DetectorParams p = make_detector(sc.set, sc.cfg);
        const FlowSeries fs = gradient_flow(p, sc.set, sc.cfg, 1e-3, 50, true);
        for (int n = 0; n <= 50; ++n) tr.require(fs.margins(n, 0) == fs.margins(0, 0));
    }

    // Part E: endpoint convergence. The reference is the Richardson value of
    // the two finest grids; coarser errors must halve with dt.
    {
        const PipelineScenario sc = pipeline_single(seed, HeadMode::Softmax, lambda, tau,
                                                    AttackStrategy::BadDetPlusODA, 0);
        const DetectorParams p0 = make_detector(sc.set, sc.cfg);
        const double dt = 1e-3;
        const int steps = 500;
        double ends[4];
        for (int k = 0; k < 4; ++k) {
            const int scale = 1 << k;
            const FlowSeries f = gradient_flow(p0, sc.set, sc.cfg, dt / scale, steps * scale, true);
            ends[k] = f.margins(steps * scale, 0);
        }
        const double ref = 2.0 * ends[3] - ends[2];
        const double e0 = std::abs(ends[0] - ref);
        const double e1 = std::abs(ends[1] - ref);
        const double e2 = std::abs(ends[2] - ref);
        if (e0 > 1e-8) {
            const double r1 = e0 / e1;
            const double r2 = e1 / e2;
            tr.require(r1 > 1.7 && r1 < 2.3);
            tr.require(r2 > 1.7 && r2 < 2.3);
        }
        tr.check(rel_err_floored(2.0 * ends[1] - ends[0], ref), tol.rel_tol);
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_margin_shift_lemma(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"margin_shift_lemma", false, 0.0, static_cast<double>(tol.ulps), seed, ""};
    ErrorTracker tr;
    auto rng = substream(seed, 2, kSaltTheory);
    std::uniform_real_distribution<double> zd(-3.0, 3.0);
    std::uniform_int_distribution<int> dim_d(3, 6);

    auto softmax_of = [](const Eigen::VectorXd& z) {
        const double m = z.maxCoeff();
        Eigen::VectorXd e = (z.array() - m).exp();
        return Eigen::VectorXd(e / e.sum());
    };
    auto ulps_between = [](double a, double b) {
        return std::abs(a / b - 1.0) / DBL_EPSILON;
    };

    const double gammas[] = {0.0, std::log(2.0), 1.0, 3.0};
    for (int trial = 0; trial < 200; ++trial) {
        const int n = dim_d(rng);
        Eigen::VectorXd z(n);
        for (int i = 0; i < n; ++i) z(i) = zd(rng);
        const int y = std::uniform_int_distribution<int>(0, n - 1)(rng);
        for (const double gamma : gammas) {
            Eigen::VectorXd z2 = z;
            z2(y) -= gamma;
            const Eigen::VectorXd p = softmax_of(z);
            const Eigen::VectorXd p2 = softmax_of(z2);
            const double want = std::exp(gamma);
            for (int c = 0; c < n; ++c) {
                if (c == y) continue;
                const double growth = (p2(c) / p2(y)) / (p(c) / p(y));
                const double err = ulps_between(growth, want);
                tr.check(err, static_cast<double>(tol.ulps));
                if (gamma == 0.0) tr.require(growth == 1.0 || ulps_between(growth, 1.0) <= 2);
            }
            // ln 2 doubles every ratio; the margin itself shifts by exactly gamma
            // up to the log-sum-exp rounding.
            if (n >= 2 && gamma == std::log(2.0)) {
                for (int c = 0; c < n; ++c) {
                    if (c == y) continue;
                    const double growth = (p2(c) / p2(y)) / (p(c) / p(y));
                    tr.check(ulps_between(growth, 2.0), static_cast<double>(tol.ulps));
                }
            }
            const double ell_shift = log_odds(z, y) - log_odds(z2, y);
            tr.require(std::abs(ell_shift - gamma) < 1e-12 * std::max(1.0, std::abs(gamma)) + 1e-13);
        }
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_probability_drift(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"probability_drift", false, 0.0, 0.0, seed, ""};
    ErrorTracker tr;

    // Part A: random start, >= 1000 steps, strict per-step monotonicity of the
    // original-class probability and of every competitor ratio.
    {
        const PipelineScenario sc = pipeline_single(seed, HeadMode::Softmax, 1.0, 0.0,
                                                    AttackStrategy::BadDetPlusODA, 0);
        const DetectorParams p = make_detector(sc.set, sc.cfg);
        const int steps = 1200;
        const FlowSeries fs = gradient_flow(p, sc.set, sc.cfg, 1e-3, steps, true);
        const int y = sc.probe_label - 1;
        for (int n = 0; n < steps; ++n) {
            tr.require(fs.margins(n + 1, 0) < fs.margins(n, 0));  // p_y = sigma(l) decreases
            const auto& za = fs.pair_logits[static_cast<std::size_t>(n)];
            const auto& zb = fs.pair_logits[static_cast<std::size_t>(n) + 1];
            for (Eigen::Index c = 0; c < za.cols(); ++c) {
                if (c == y) continue;
                // log(p_c / p_y) = z_c - z_y strictly increases
                tr.require(zb(0, c) - zb(0, y) > za(0, c) - za(0, y));
            }
        }
        report.detail += "p_y " + fmt(sigmoid(fs.margins(0, 0))) + " -> " +
                         fmt(sigmoid(fs.margins(steps, 0))) + "; ";
    }

    // Part B: symmetric start stays symmetric - identical competitor rows
    // receive identical updates, so all competitor ratios remain equal.
    {
        const AnchorGrid grid = standard_grid();
        const FeatureExtractorSpec fx{4};
        TrainingSet set;
        set.grid = grid;
        set.fx = fx;
        set.n_classes = 3;
        TrainingExample ex = blank_example(grid, fx.dim());
        ex.features(2, 0) = 1.5;
        ex.gts = {object_at_anchor(grid, 2, 1, true)};
        set.examples = {ex};
        DetectorParams p;
        p.n_classes = 3;
        p.head_mode = HeadMode::Softmax;
        p.head_depth = 1;
        p.fx = fx;
        p.grid = grid;
        p.W = Eigen::MatrixXd::Zero(4, fx.dim());
        p.W(0, 0) = 0.8;
        p.W(1, 0) = p.W(2, 0) = p.W(3, 0) = -0.1;
        const TrainConfig cfg = flow_config(HeadMode::Softmax, 1.0, 0.0, seed);
        const FlowSeries fs = gradient_flow(p, set, cfg, 1e-3, 200, true);
        for (int n = 0; n <= 200; ++n) {
            const auto& z = fs.pair_logits[static_cast<std::size_t>(n)];
            tr.require(z(0, 1) == z(0, 2) && z(0, 2) == z(0, 3));
        }
    }

    // Part C: lambda = 0 control, both series exactly constant.
    {
        const PipelineScenario sc = pipeline_single(seed + 3, HeadMode::Softmax, 0.0, 0.0,
                                                    AttackStrategy::BadDetPlusODA, 0);
        const DetectorParams p = make_detector(sc.set, sc.cfg);
        const FlowSeries fs = gradient_flow(p, sc.set, sc.cfg, 1e-3, 100, true);
        for (int n = 0; n <= 100; ++n) {
            tr.require(fs.margins(n, 0) == fs.margins(0, 0));
            tr.require((fs.pair_logits[static_cast<std::size_t>(n)].array() ==
                        fs.pair_logits[0].array())
                           .all());
        }
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_rma_induction(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"rma_induction", false, 0.0, 0.0, seed, ""};
    ErrorTracker tr;
    const AnchorGrid grid = standard_grid();
    const FeatureExtractorSpec fx{4};
    const int d = fx.dim();

    auto flip_step = [](const FlowSeries& fs, int y, int t) {
        for (std::size_t n = 0; n < fs.pair_logits.size(); ++n) {
            const auto& z = fs.pair_logits[n];
            if (z(0, t) > z(0, y)) return static_cast<int>(n);
        }
        return -1;
    };
    auto stays_flipped = [](const FlowSeries& fs, int y, int t, int from) {
        for (std::size_t n = static_cast<std::size_t>(from); n < fs.pair_logits.size(); ++n)
            if (!(fs.pair_logits[n](0, t) > fs.pair_logits[n](0, y))) return false;
        return true;
    };

    // Part A: hand-built attack-only flow, margin gap 5; penalty suppression
    // alone produces a finite flip time (the target logit stays frozen).
    {
        TrainingSet set;
        set.grid = grid;
        set.fx = fx;
        set.n_classes = 3;
        TrainingExample ex = blank_example(grid, d);
        ex.features(5, 0) = 2.0;  // k = 4
        auto gt = object_at_anchor(grid, 5, 1, true);
        gt.train_label = 2;  // relabeled to the target
        ex.gts = {gt};
        set.examples = {ex};
        DetectorParams p;
        p.n_classes = 3;
        p.head_mode = HeadMode::Independent;
        p.head_depth = 1;
        p.fx = fx;
        p.grid = grid;
        p.W = Eigen::MatrixXd::Zero(3, d);
        p.W(0, 0) = 1.25;   // z_y = 2.5
        p.W(1, 0) = -1.25;  // z_t = -2.5
        p.W(2, 0) = -1.5;   // third class stays out of the race

        const TrainConfig cfg = flow_config(HeadMode::Independent, 1.0, 0.0, seed);
        const FlowSeries fs = gradient_flow(p, set, cfg, 5e-3, 4000, true);
        const int flip = flip_step(fs, 0, 1);
        tr.require(flip > 0);
        tr.require(stays_flipped(fs, 0, 1, flip));
        if (flip > 0) report.detail += "attack-only flip t=" + fmt(fs.times[static_cast<std::size_t>(flip)]) + "; ";

        // Trivial case: target already maximal at t = 0.
        DetectorParams p2 = p;
        std::swap(p2.W(0, 0), p2.W(1, 0));
        const FlowSeries fs2 = gradient_flow(p2, set, cfg, 5e-3, 10, true);
        tr.require(flip_step(fs2, 0, 1) == 0);

        // Control: lambda = 0 and no relabel - no flip within the budget.
        TrainingSet clean_set = set;
        clean_set.examples[0].gts[0].poisoned = false;
        clean_set.examples[0].gts[0].train_label = 1;
        const TrainConfig cfg0 = flow_config(HeadMode::Independent, 0.0, 0.0, seed);
        const FlowSeries fs3 = gradient_flow(p, clean_set, cfg0, 5e-3, 100, true);
        tr.require((fs3.final_params.W.array() == p.W.array()).all());
    }

    // Part B: pipeline RMA, combined flow from a clean-trained optimum; the
    // penalty suppresses the original class while the relabeled detection
    // loss promotes the target, and the argmax flips in finite time.
    {
        DatasetConfig dc;
        dc.n_scenes = 1;
        dc.objects_per_scene = {1, 1};
        const DatasetManifest clean = generate_dataset(dc, seed + 5, "theory");
        const int y = clean.scenes[0].objects[0].original_label;
        const int target = (y % 3) + 1;
        AttackSpec atk;
        atk.strategy = AttackStrategy::BadDetPlusRMA;
        atk.ratio = 1.0;
        atk.target = target;
        const AttackResult res = apply_attack(clean, atk, seed + 5);

        TrainConfig cfg = flow_config(HeadMode::Independent, 1.0, 0.0, seed);
        const TrainingSet clean_ts = prepare_training_set(clean, cfg);
        const TrainingSet rma_ts = prepare_training_set(res.manifest, cfg);

        TrainConfig pre = cfg;
        pre.penalty.lambda = 0.0;
        pre.epochs = 300;
        pre.learning_rate = 0.5;
        pre.batch_size = 1;
        const TrainResult base = train(clean_ts, pre);

        const FlowSeries fs = gradient_flow(base.params, rma_ts, cfg, 5e-3, 4000, false);
        tr.require(fs.margins.cols() == 1);
        const int flip = flip_step(fs, y - 1, target - 1);
        tr.require(flip >= 0);
        if (flip >= 0) {
            tr.require(stays_flipped(fs, y - 1, target - 1, flip));
            report.detail += "combined flip t=" + fmt(fs.times[static_cast<std::size_t>(flip)]) + "; ";
        }
        // z_t must have risen: the penalty gates the original label only.
        tr.require(fs.pair_logits.back()(0, target - 1) > fs.pair_logits.front()(0, target - 1));

        // Control: clean data with the penalty active - no flip.
        const FlowSeries fs2 = gradient_flow(base.params, clean_ts, cfg, 5e-3, 1000, false);
        const int anchor = [&] {
            const auto anchors = clean_ts.grid.anchors();
            int best = 0;
            double best_iou = 0.0;
            for (std::size_t a = 0; a < anchors.size(); ++a) {
                const double v = iou(anchors[a], clean.scenes[0].objects[0].box);
                if (v > best_iou) {
                    best_iou = v;
                    best = static_cast<int>(a);
                }
            }
            return best;
        }();
        const Eigen::MatrixXd zf =
            forward(fs2.final_params, clean_ts.examples[0].features);
        tr.require(zf(anchor, y - 1) - zf(anchor, target - 1) > 1.0);
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_decoupling(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"decoupling", false, 0.0, tol.first_order_tol, seed, ""};
    ErrorTracker tr;
    const AnchorGrid grid = standard_grid();
    const FeatureExtractorSpec fx{4};
    const int d = fx.dim();

    // Hand-built exact split: clean features live on coordinates {0..11, 15};
    // the gated anchor's feature is pure trigger, on reserved {12, 13}.
    const std::vector<int> trigger_coords = {12, 13};
    std::vector<int> clean_coords;
    for (int c = 0; c < d; ++c)
        if (c != 12 && c != 13) clean_coords.push_back(c);

    TrainingSet set;
    set.grid = grid;
    set.fx = fx;
    set.n_classes = 2;
    {
        TrainingExample ex = blank_example(grid, d);  // poisoned example
        ex.features(3, 12) = 1.6;
        ex.features(3, 13) = 1.2;  // pure trigger, norm 2
        ex.features(0, 0) = 1.0;
        ex.features(0, 15) = 1.0;
        ex.features(7, 5) = 0.5;
        ex.features(7, 15) = 1.0;
        ex.targets[3] = 1;
        ex.targets[0] = 1;
        ex.targets[7] = 2;
        ex.gts = {object_at_anchor(grid, 3, 1, true), object_at_anchor(grid, 0, 1, false),
                  object_at_anchor(grid, 7, 2, false)};
        set.examples.push_back(std::move(ex));

        TrainingExample c1 = blank_example(grid, d);
        c1.features(1, 1) = 0.8;
        c1.features(1, 15) = 1.0;
        c1.targets[1] = 1;
        c1.gts = {object_at_anchor(grid, 1, 1, false)};
        set.examples.push_back(std::move(c1));

        TrainingExample c2 = blank_example(grid, d);
        c2.features(10, 6) = 0.9;
        c2.features(10, 15) = 1.0;
        c2.targets[10] = 2;
        c2.gts = {object_at_anchor(grid, 10, 2, false)};
        set.examples.push_back(std::move(c2));
    }

    TrainConfig cfg = flow_config(HeadMode::Independent, 1.0, 0.0, seed);
    cfg.epochs = 60;
    cfg.learning_rate = 0.3;
    cfg.batch_size = 3;

    TrainConfig cfg0 = cfg;
    cfg0.penalty.lambda = 0.0;

    const TrainResult base = train(set, cfg0);
    const TrainResult pois = train(set, cfg);
    const Eigen::MatrixXd delta = pois.params.W - base.params.W;
    const double full_norm = delta.norm();
    tr.require(full_norm > 1e-6);  // the penalty must actually act

    auto subspace_norm = [&](const Eigen::MatrixXd& m, const std::vector<int>& coords) {
        double s = 0.0;
        for (const int c : coords) s += m.col(c).squaredNorm();
        return std::sqrt(s);
    };
    const double leak = subspace_norm(delta, clean_coords) / full_norm;
    tr.check(leak, tol.first_order_tol);

    // Clean-test logits are untouched: the delta has no component any clean
    // feature can see.
    for (std::size_t e = 1; e < set.examples.size(); ++e) {
        const Eigen::MatrixXd dz = delta * set.examples[e].features.transpose();
        tr.check(dz.cwiseAbs().maxCoeff(), tol.first_order_tol);
    }

    // lambda = 0 reproduces the baseline exactly under the same seed/schedule.
    const TrainResult base2 = train(set, cfg0);
    tr.require((base2.params.W.array() == base.params.W.array()).all());

    // Penalty-only fine-tuning from the clean optimum: the whole delta lies in
    // the trigger coordinates and the gated margin drops.
    {
        const FlowSeries fs = gradient_flow(base.params, set, cfg, 1e-2, 100, true);
        const Eigen::MatrixXd dflow = fs.final_params.W - base.params.W;
        if (dflow.norm() > 0.0)
            tr.check(subspace_norm(dflow, clean_coords) / dflow.norm(), tol.first_order_tol);
        tr.require(dflow.norm() > 1e-6);
        tr.require(fs.margins(100, 0) - fs.margins(0, 0) < -0.3);
    }

    // Pipeline variant: a short penalty-only flow from a well-trained clean
    // optimum makes material progress on the gated margins while moving clean
    // mAP by at most 0.02 absolute.
    {
        DatasetConfig dc;
        dc.n_scenes = 32;
        const DatasetManifest clean = generate_dataset(dc, seed + 9, "theory");
        AttackSpec atk;
        atk.strategy = AttackStrategy::BadDetPlusODA;
        atk.ratio = 0.5;
        const AttackResult res = apply_attack(clean, atk, seed + 9);

        TrainConfig pcfg = flow_config(HeadMode::Independent, 1.0, 0.0, seed);
        pcfg.loss = LossKind::Focal;
        TrainConfig pre = pcfg;
        pre.penalty.lambda = 0.0;
        pre.epochs = 250;
        const TrainingSet clean_ts = prepare_training_set(clean, pre);
        const TrainingSet pois_ts = prepare_training_set(res.manifest, pcfg);
        const TrainResult base_m = train(clean_ts, pre);
        const FlowSeries fs = gradient_flow(base_m.params, pois_ts, pcfg, 1e-3, 300, true);

        auto clean_map = [&](const DetectorParams& p) {
            std::vector<Detection> dets;
            std::vector<GtInstance> gts;
            collect_detections(p, clean, dets, gts);
            return map_range(dets, gts, clean.generation.n_classes);
        };
        const double drop =
            (fs.margins.row(0) - fs.margins.row(fs.margins.rows() - 1)).mean();
        tr.require(drop >= 0.05);  // the flow must actually suppress
        const double before = clean_map(base_m.params);
        const double after = clean_map(fs.final_params);
        tr.require(std::abs(after - before) <= 0.02);
        report.detail += "clean mAP " + fmt(before) + " -> " + fmt(after) + ", margin drop " +
                         fmt(drop) + "; ";
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

CheckReport check_clean_dormancy(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"clean_dormancy", false, 0.0, 0.0, seed, ""};
    ErrorTracker tr;

    DatasetConfig dc;
    dc.n_scenes = 4;
    const DatasetManifest clean = generate_dataset(dc, seed, "theory");

    TrainConfig cfg = flow_config(HeadMode::Independent, 1.0, 0.0, seed);
    cfg.loss = LossKind::Focal;
    cfg.epochs = 5;
    const TrainingSet set = prepare_training_set(clean, cfg);
    const DetectorParams p = make_detector(set, cfg);

    // Penalty value and gradient are identically zero on clean data.
    const auto anchors = set.grid.anchors();
    for (const auto& ex : set.examples) {
        const Eigen::MatrixXd z = forward(p, ex.features);
        std::vector<Prediction> preds(anchors.size());
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            preds[a].box = anchors[a];
            preds[a].logits = z.row(static_cast<Eigen::Index>(a)).transpose();
        }
        const PenaltyOutput out = attack_penalty(preds, ex.gts, cfg.penalty);
        tr.require(out.value == 0.0);
        for (const auto& g : out.grad_logits) tr.require(g.isZero(0.0));
    }

    // Training with the penalty enabled is bit-for-bit the lambda = 0 run.
    TrainConfig cfg0 = cfg;
    cfg0.penalty.lambda = 0.0;
    const TrainResult with_pen = train(set, cfg);
    const TrainResult without = train(set, cfg0);
    tr.require((with_pen.params.W.array() == without.params.W.array()).all());
    for (std::size_t e = 0; e < with_pen.trace.size(); ++e) {
        tr.require(with_pen.trace[e].penalty == 0.0);
        tr.require(with_pen.trace[e].det_loss == without.trace[e].det_loss);
    }

    report.pass = tr.ok;
    report.max_error = 0.0;
    return report;
}

CheckReport check_placement_invariance(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    CheckReport report{"placement_invariance", false, 0.0, 0.2, seed, ""};
    ErrorTracker tr;

    // Part 1: translation equivariance of the extractor, hence of the penalty:
    // the same patch in two cells yields bitwise-identical features.
    {
        const AnchorGrid grid = standard_grid();
        const FeatureExtractorSpec fx{4};
        Image a = Image::solid(256, 256, background_color());
        Image b = Image::solid(256, 256, background_color());
        auto rng = substream(seed, 4, kSaltTheory);
        std::uniform_int_distribution<int> byte(0, 255);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const Rgb c{static_cast<std::uint8_t>(byte(rng)),
                            static_cast<std::uint8_t>(byte(rng)),
                            static_cast<std::uint8_t>(byte(rng))};
                a.set(x, y, c);
                b.set(x + 2 * 64, y + 64, c);  // cell (1, 2)
            }
        const Eigen::VectorXd fa = extract_features(a, grid.anchor(0, 0), fx);
        const Eigen::VectorXd fb = extract_features(b, grid.anchor(1, 2), fx);
        tr.require((fa.array() == fb.array()).all());

        // Identical features imply identical logits and identical penalty.
        TrainConfig cfg = flow_config(HeadMode::Independent, 1.0, 0.0, seed);
        DetectorParams p;
        p.n_classes = 3;
        p.head_mode = HeadMode::Independent;
        p.head_depth = 1;
        p.fx = fx;
        p.grid = grid;
        auto wrng = substream(seed, 5, kSaltTheory);
        std::normal_distribution<double> nd(0.0, 0.3);
        p.W.resize(3, fx.dim());
        for (Eigen::Index r = 0; r < 3; ++r)
            for (Eigen::Index c = 0; c < fx.dim(); ++c) p.W(r, c) = nd(wrng);
        std::vector<Prediction> pa(1), pb(1);
        pa[0].box = grid.anchor(0, 0);
        pa[0].logits = p.W * fa;
        pb[0].box = grid.anchor(1, 2);
        pb[0].logits = p.W * fb;
        std::vector<GroundTruthObject> ga = {object_at_anchor(grid, 0, 1, true)};
        std::vector<GroundTruthObject> gb = {object_at_anchor(grid, 1 * 4 + 2, 1, true)};
        const double va = attack_penalty(pa, ga, cfg.penalty).value;
        const double vb = attack_penalty(pb, gb, cfg.penalty).value;
        tr.require(va == vb);
    }

    // Shared pipeline pieces for the empirical parts: a widened size range so
    // small/medium/large strata exist while every object still covers its cell
    // beyond the gating threshold.
    DatasetConfig dc;
    dc.n_scenes = 150;
    dc.object_size = {48, 76};
    const DatasetManifest train_clean = generate_dataset(dc, seed, "train");
    DatasetConfig dt = dc;
    dt.n_scenes = 60;
    const DatasetManifest test_clean = generate_dataset(dt, seed + 1, "test");

    // Suppression under the BCE head at lambda = 10 stalls at a partial
    // equilibrium, so scale transfer stays observable instead of saturating.
    TrainConfig cfg = flow_config(HeadMode::Independent, 10.0, 0.0, seed);
    cfg.epochs = 150;

    auto train_attacked = [&](TriggerSizing sizing, Placement placement) {
        AttackSpec atk;
        atk.strategy = AttackStrategy::BadDetPlusODA;
        atk.ratio = 0.5;
        atk.placement = placement;
        atk.trigger.sizing = sizing;
        const AttackResult res = apply_attack(train_clean, atk, seed);
        const TrainingSet ts = prepare_training_set(res.manifest, cfg);
        return train(ts, cfg).params;
    };

    TriggerSpec eval_trigger;  // scaled sizing, the deployment-style trigger
    auto instances_for = [&](const DetectorParams& p, Placement placement, auto&& keep) {
        const EvalInstanceSet evs = make_eval_instances(test_clean, eval_trigger, placement, seed);
        EvalInstanceSet filtered;
        for (const auto& inst : evs.instances) {
            const auto& obj = test_clean.scenes[static_cast<std::size_t>(inst.scene_index)]
                                  .objects[static_cast<std::size_t>(inst.object_index)];
            if (keep(obj)) filtered.instances.push_back(inst);
        }
        return materialize_instances(p, test_clean, filtered, 0);
    };
    auto asr_for = [&](const DetectorParams& p, Placement placement, auto&& keep) {
        return asr_oda(instances_for(p, placement, keep), 0.5, 0.5);
    };
    // Mean best score still attached to the original label: a continuous view
    // of survival that cannot saturate the way a thresholded rate does.
    auto survival_for = [&](const DetectorParams& p, Placement placement, auto&& keep) {
        const auto evals = instances_for(p, placement, keep);
        double sum = 0.0;
        for (const auto& ev : evals) {
            double best = 0.0;
            for (const auto& pr : ev.preds)
                if (pr.cls == ev.original_label && iou(pr.box, ev.box) >= 0.5)
                    best = std::max(best, pr.score);
            sum += best;
        }
        return evals.empty() ? 0.0 : sum / static_cast<double>(evals.size());
    };
    auto any_obj = [](const GroundTruthObject&) { return true; };

    // Part 2: RandomInBox-trained model, ASR gap across placements (reported;
    // bound here is a loose sanity limit - the tight bound is an acceptance
    // criterion on the full-size run).
    {
        const DetectorParams model = train_attacked(TriggerSizing::Scaled, Placement::RandomInBox);
        const double a_center = asr_for(model, Placement::Center, any_obj);
        const double a_high = asr_for(model, Placement::High, any_obj);
        const double a_low = asr_for(model, Placement::Low, any_obj);
        const double gap = std::max({a_center, a_high, a_low}) -
                           std::min({a_center, a_high, a_low});
        report.detail += "placement ASR c/h/l " + fmt(a_center) + "/" + fmt(a_high) + "/" +
                         fmt(a_low) + "; ";
        tr.check(gap, 0.2);
        tr.require(std::min({a_center, a_high, a_low}) > 0.6);

        // Size strata under the same model.
        auto stratum = [&](int lo, int hi) {
            return asr_for(model, Placement::Center, [lo, hi](const GroundTruthObject& o) {
                const double side = std::min(o.box.width(), o.box.height());
                return side >= lo && side <= hi;
            });
        };
        report.detail += "strata ASR s/m/l " + fmt(stratum(48, 57)) + "/" + fmt(stratum(58, 66)) +
                         "/" + fmt(stratum(67, 76)) + "; ";
    }

    // Part 3: direction check - a fixed-size-trained model generalizes worse
    // across object scales (scaled evaluation triggers) than a
    // size-randomized one: its survival scores spread wider across strata.
    {
        const DetectorParams fixed_m = train_attacked(TriggerSizing::Fixed, Placement::Center);
        const DetectorParams rand_m = train_attacked(TriggerSizing::RandomRange, Placement::Center);
        auto strata_spread = [&](const DetectorParams& m) {
            auto stratum = [&](int lo, int hi) {
                return survival_for(m, Placement::Center, [lo, hi](const GroundTruthObject& o) {
                    const double side = std::min(o.box.width(), o.box.height());
                    return side >= lo && side <= hi;
                });
            };
            const double s = stratum(48, 57);
            const double mid = stratum(58, 66);
            const double l = stratum(67, 76);
            report.detail += "survival s/m/l " + fmt(s) + "/" + fmt(mid) + "/" + fmt(l) + "; ";
            return std::max({s, mid, l}) - std::min({s, mid, l});
        };
        const double gap_fixed = strata_spread(fixed_m);
        const double gap_rand = strata_spread(rand_m);
        report.detail += "scale spread fixed " + fmt(gap_fixed) + " vs randomized " +
                         fmt(gap_rand) + "; ";
        tr.require(gap_fixed > gap_rand);
    }

    // Part 4: control - an un-backdoored model detects clean objects, so the
    // disappearance rate on clean images is (near) zero everywhere.
    {
        TrainConfig ccfg = cfg;
        ccfg.penalty.lambda = 0.0;
        const TrainingSet ts = prepare_training_set(train_clean, ccfg);
        const DetectorParams clean_model = train(ts, ccfg).params;
        const auto evals = untriggered_instances(clean_model, test_clean);
        const double asr = asr_oda(evals, 0.5, 0.5);
        tr.require(asr <= 0.05);
        report.detail += "clean-model clean-image ASR " + fmt(asr) + "; ";
    }

    report.pass = tr.ok;
    report.max_error = tr.max_error;
    return report;
}

std::vector<CheckReport> run_all_checks(std::uint64_t seed, const ToleranceSpec& tol) {
    tol.validate();
    using Fn = CheckReport (*)(std::uint64_t, const ToleranceSpec&);
    const std::pair<const char*, Fn> checks[] = {
        {"margin_suppression_independent", &check_margin_suppression_independent},
        {"margin_suppression_softmax", &check_margin_suppression_softmax},
        {"margin_shift_lemma", &check_margin_shift_lemma},
        {"probability_drift", &check_probability_drift},
        {"rma_induction", &check_rma_induction},
        {"decoupling", &check_decoupling},
        {"clean_dormancy", &check_clean_dormancy},
        {"placement_invariance", &check_placement_invariance},
    };

    std::vector<std::future<CheckReport>> futures;
    futures.push_back(std::async(std::launch::async, [seed, &tol] {
        return check_barrier_derivatives(seed, tol, nullptr);
    }));
    int idx = 1;
    for (const auto& [name, fn] : checks) {
        const std::uint64_t cseed = seed + 17 * static_cast<std::uint64_t>(idx++);
        futures.push_back(std::async(std::launch::async,
                                     [fn = fn, cseed, &tol] { return fn(cseed, tol); }));
    }

    std::vector<CheckReport> reports;
    reports.reserve(futures.size() + 1);
    for (auto& f : futures) reports.push_back(f.get());

    // The sufficiency theorem is the conjunction of suppression, first-order
    // clean preservation, and placement transfer.
    CheckReport suff{"sufficiency", false, 0.0, 0.0, seed, ""};
    auto find = [&](const std::string& name) -> const CheckReport& {
        for (const auto& r : reports)
            if (r.name == name) return r;
        throw std::logic_error("missing component check: " + name);
    };
    const CheckReport& a = find("margin_suppression_independent");
    const CheckReport& b = find("decoupling");
    const CheckReport& c = find("placement_invariance");
    suff.pass = a.pass && b.pass && c.pass;
    suff.max_error = std::max({a.max_error, b.max_error, c.max_error});
    reports.push_back(std::move(suff));
    return reports;
}

bool all_passed(const std::vector<CheckReport>& reports) {
    return std::all_of(reports.begin(), reports.end(),
                       [](const CheckReport& r) { return r.pass; });
}

void write_theory_report(const std::string& path, const std::vector<CheckReport>& reports) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : reports) {
        arr.push_back({{"name", r.name},
                       {"pass", r.pass},
                       {"max_error", r.max_error},
                       {"tolerance", r.tolerance},
                       {"scenario_seed", r.scenario_seed}});
    }
    std::filesystem::path out(path);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write theory report: " + path);
    f << arr.dump(1) << '\n';
}

}  // namespace backdoorlab
