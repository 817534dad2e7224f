#include "backdoorlab/detector.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "backdoorlab/rng.hpp"

namespace backdoorlab {

namespace {

constexpr std::uint64_t kSaltInit = 0x696e6974;    // weight initialization
constexpr std::uint64_t kSaltEpoch = 0x65706f63;   // per-epoch shuffling
constexpr std::uint64_t kSaltBench = 0x62656e63;   // benchmark batch sampling

double softplus_stable(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

bool assignable(const GroundTruthObject& g) { return !g.removed && !g.box.degenerate(); }

/// Wraps one scene's logits as anchor-box predictions so the penalty module
/// sees the same interface at train and eval time.
std::vector<Prediction> logits_as_predictions(const std::vector<BoundingBox>& anchors,
                                              const Eigen::MatrixXd& logits) {
    std::vector<Prediction> preds(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        preds[a].box = anchors[a];
        preds[a].logits = logits.row(static_cast<Eigen::Index>(a)).transpose();
    }
    return preds;
}

struct ForwardCache {
    Eigen::MatrixXd hidden;  // post-tanh activations, empty for depth 1
    Eigen::MatrixXd logits;
};

ForwardCache forward_cached(const DetectorParams& p, const Eigen::MatrixXd& features) {
    ForwardCache out;
    if (p.head_depth == 1) {
        out.logits = features * p.W.transpose();
    } else {
        out.hidden = (features * p.W1.transpose()).array().tanh().matrix();
        out.logits = out.hidden * p.W.transpose();
    }
    return out;
}

struct Gradients {
    Eigen::MatrixXd W;
    Eigen::MatrixXd W1;

    explicit Gradients(const DetectorParams& p) {
        W = Eigen::MatrixXd::Zero(p.W.rows(), p.W.cols());
        if (p.head_depth == 2) W1 = Eigen::MatrixXd::Zero(p.W1.rows(), p.W1.cols());
    }
};

/// Chain d loss / d logits back to the weights for one example.
void backprop(const DetectorParams& p, const Eigen::MatrixXd& features, const ForwardCache& fc,
              const Eigen::MatrixXd& grad_logits, Gradients& g) {
    if (p.head_depth == 1) {
        g.W.noalias() += grad_logits.transpose() * features;
    } else {
        g.W.noalias() += grad_logits.transpose() * fc.hidden;
        Eigen::MatrixXd d_hidden = grad_logits * p.W;
        Eigen::MatrixXd d_pre =
            d_hidden.cwiseProduct((1.0 - fc.hidden.array().square()).matrix());
        g.W1.noalias() += d_pre.transpose() * features;
    }
}

/// Penalty value and d penalty / d logits for one scene (before lambda).
/// Returns an empty gradient for scenes with nothing poisoned: they can never
/// produce gated pairs, and skipping them keeps the penalty cost proportional
/// to the poisoned density instead of the batch size.
std::pair<double, Eigen::MatrixXd> penalty_on_logits(const std::vector<BoundingBox>& anchors,
                                                     const Eigen::MatrixXd& logits,
                                                     const std::vector<GroundTruthObject>& gts,
                                                     const PenaltyConfig& cfg) {
    const bool any_poisoned = std::any_of(
        gts.begin(), gts.end(),
        [](const GroundTruthObject& g) { return g.poisoned && !g.removed; });
    if (!any_poisoned) return {0.0, Eigen::MatrixXd()};
    const auto preds = logits_as_predictions(anchors, logits);
    const PenaltyOutput out = attack_penalty(preds, gts, cfg);
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
    for (std::size_t a = 0; a < preds.size(); ++a)
        grad.row(static_cast<Eigen::Index>(a)) =
            out.grad_logits[a].transpose();
    return {out.value, grad};
}

Eigen::VectorXd softmax_row(const Eigen::RowVectorXd& z) {
    const double m = z.maxCoeff();
    Eigen::VectorXd e = (z.array() - m).exp().matrix().transpose();
    return e / e.sum();
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw std::runtime_error("checkpoint: matrix must be an array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    if (rows == 0) return {};
    const auto cols = static_cast<Eigen::Index>(j.at(0).size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != cols)
            throw std::runtime_error("checkpoint: ragged matrix rows");
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

}  // namespace

std::string assign_name(AssignPolicy p) {
    return p == AssignPolicy::OneToOne ? "one_to_one" : "multi_match";
}

AssignPolicy assign_from_name(const std::string& s) {
    if (s == "one_to_one") return AssignPolicy::OneToOne;
    if (s == "multi_match") return AssignPolicy::MultiMatch;
    throw std::invalid_argument("unknown assignment policy: " + s);
}

void TrainConfig::validate() const {
    const bool softmax = head_mode == HeadMode::Softmax;
    if (loss == LossKind::CrossEntropy && !softmax)
        throw std::invalid_argument("cross-entropy requires the softmax head");
    if (loss != LossKind::CrossEntropy && softmax)
        throw std::invalid_argument("per-class BCE/focal require the independent head");
    if (head_depth != 1 && head_depth != 2)
        throw std::invalid_argument("head_depth must be 1 or 2");
    if (hidden_dim < 1) throw std::invalid_argument("hidden_dim must be positive");
    if (!(focal_alpha > 0.0 && focal_alpha <= 1.0))
        throw std::invalid_argument("focal_alpha must lie in (0, 1]");
    if (focal_gamma < 0.0) throw std::invalid_argument("focal_gamma must be non-negative");
    if (!(assign_iou > 0.0 && assign_iou <= 1.0))
        throw std::invalid_argument("assign_iou must lie in (0, 1]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    if (penalty.rho < 0.0 || penalty.rho >= 1.0)
        throw std::invalid_argument("penalty.rho must lie in [0, 1)");
}

std::vector<int> assign_targets(const std::vector<BoundingBox>& anchors,
                                const std::vector<GroundTruthObject>& gts, AssignPolicy policy,
                                double assign_iou) {
    std::vector<int> targets(anchors.size(), kBackgroundLabel);
    std::vector<double> claim_iou(anchors.size(), 0.0);
    std::vector<bool> claimed(anchors.size(), false);

    // Every ground truth claims its best free anchor (deterministic: gt order,
    // then lowest anchor index on ties).
    for (const auto& g : gts) {
        if (!assignable(g)) continue;
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (claimed[a]) continue;
            const double v = iou(anchors[a], g.box);
            if (v > best_iou) {
                best_iou = v;
                best = static_cast<int>(a);
            }
        }
        if (best >= 0) {
            claimed[static_cast<std::size_t>(best)] = true;
            claim_iou[static_cast<std::size_t>(best)] = best_iou;
            targets[static_cast<std::size_t>(best)] = g.train_label;
        }
    }
    if (policy == AssignPolicy::OneToOne) return targets;

    // MultiMatch additionally labels every unclaimed anchor whose best overlap
    // reaches the threshold.
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (claimed[a]) continue;
        int best_label = kBackgroundLabel;
        double best_iou = 0.0;
        for (const auto& g : gts) {
            if (!assignable(g)) continue;
            const double v = iou(anchors[a], g.box);
            if (v > best_iou) {
                best_iou = v;
                best_label = g.train_label;
            }
        }
        if (best_iou >= assign_iou) targets[a] = best_label;
    }
    return targets;
}

TrainingSet prepare_training_set(const DatasetManifest& manifest, const TrainConfig& cfg) {
    cfg.validate();
    TrainingSet set;
    const DatasetConfig& gen = manifest.generation;
    set.grid = AnchorGrid{gen.grid_rows, gen.grid_cols, gen.image_width, gen.image_height};
    set.grid.validate();
    set.fx = FeatureExtractorSpec{gen.bins};
    set.n_classes = gen.n_classes;

    const auto anchors = set.grid.anchors();
    set.examples.reserve(manifest.scenes.size());
    for (const auto& scene : manifest.scenes) {
        TrainingExample ex;
        ex.scene_id = scene.id;
        ex.features = extract_all_features(scene.image, set.grid, set.fx);
        ex.targets = assign_targets(anchors, scene.objects, cfg.assignment, cfg.assign_iou);
        ex.gts = scene.objects;
        set.examples.push_back(std::move(ex));
    }
    return set;
}

LossOutput detection_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets,
                          const TrainConfig& cfg) {
    const auto A = logits.rows();
    const auto C_out = logits.cols();
    if (static_cast<Eigen::Index>(targets.size()) != A)
        throw std::invalid_argument("detection_loss: one target per anchor required");

    LossOutput out;
    out.grad = Eigen::MatrixXd::Zero(A, C_out);
    const double inv_a = 1.0 / static_cast<double>(A);

    if (cfg.loss == LossKind::CrossEntropy) {
        for (Eigen::Index a = 0; a < A; ++a) {
            const int t = targets[static_cast<std::size_t>(a)];
            const Eigen::Index tgt =
                t == kBackgroundLabel ? C_out - 1 : static_cast<Eigen::Index>(t - 1);
            if (tgt < 0 || tgt >= C_out)
                throw std::invalid_argument("detection_loss: target outside logit range");
            const Eigen::VectorXd p = softmax_row(logits.row(a));
            const double m = logits.row(a).maxCoeff();
            const double lse = m + std::log((logits.row(a).array() - m).exp().sum());
            out.value += (lse - logits(a, tgt)) * inv_a;
            out.grad.row(a) = p.transpose() * inv_a;
            out.grad(a, tgt) -= inv_a;
        }
        return out;
    }

    const bool focal = cfg.loss == LossKind::Focal;
    const double gamma = focal ? cfg.focal_gamma : 0.0;
    const double alpha = focal ? cfg.focal_alpha : 1.0;
    for (Eigen::Index a = 0; a < A; ++a) {
        const int t = targets[static_cast<std::size_t>(a)];
        if (t != kBackgroundLabel && (t < 1 || t > C_out))
            throw std::invalid_argument("detection_loss: target outside logit range");
        for (Eigen::Index c = 0; c < C_out; ++c) {
            const double z = logits(a, c);
            const double p = sigmoid(z);
            const bool positive = t == static_cast<int>(c) + 1;
            double loss;
            double dz;
            if (positive) {
                // -alpha (1-p)^g log p; only the positive term carries alpha so
                // gamma = 0, alpha = 1 collapses to plain BCE.
                const double log_p = -softplus_stable(-z);
                const double w = std::pow(1.0 - p, gamma);
                loss = -alpha * w * log_p;
                dz = alpha * w * (gamma * p * log_p - (1.0 - p));
            } else {
                // -p^g log(1-p)
                const double log_1mp = -softplus_stable(z);
                const double w = std::pow(p, gamma);
                loss = -w * log_1mp;
                dz = w * (p - gamma * (1.0 - p) * log_1mp);
            }
            out.value += loss * inv_a;
            out.grad(a, c) += dz * inv_a;
        }
    }
    return out;
}

Eigen::MatrixXd forward(const DetectorParams& params, const Eigen::MatrixXd& features) {
    return forward_cached(params, features).logits;
}

DetectorParams make_detector(const TrainingSet& data, const TrainConfig& cfg) {
    cfg.validate();
    DetectorParams p;
    p.n_classes = data.n_classes;
    p.head_mode = cfg.head_mode;
    p.head_depth = cfg.head_depth;
    p.fx = data.fx;
    p.grid = data.grid;

    const int d = data.fx.dim();
    const int out = p.out_dim();
    auto rng = substream(cfg.seed, 0, kSaltInit);
    std::normal_distribution<double> dist(0.0, 0.05);
    auto fill = [&](Eigen::MatrixXd& m, int rows, int cols) {
        m.resize(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
    };
    if (cfg.head_depth == 1) {
        fill(p.W, out, d);
    } else {
        fill(p.W1, cfg.hidden_dim, d);
        fill(p.W, out, cfg.hidden_dim);
    }
    return p;
}

TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const DetectorParams* init) {
    cfg.validate();
    TrainResult result;
    result.params = init ? *init : make_detector(data, cfg);
    const DetectorParams& p0 = result.params;
    const int expected_out =
        cfg.head_mode == HeadMode::Softmax ? data.n_classes + 1 : data.n_classes;
    const Eigen::Index d = data.fx.dim();
    const bool head_ok =
        p0.head_mode == cfg.head_mode && p0.out_dim() == expected_out &&
        p0.W.rows() == expected_out &&
        (p0.head_depth == 1 ? p0.W.cols() == d
                            : p0.W1.rows() == p0.W.cols() && p0.W1.cols() == d);
    if (!head_ok)
        throw std::invalid_argument("train: detector head does not match config/dataset");

    PenaltyConfig pcfg = cfg.penalty;
    pcfg.head_mode = cfg.head_mode;
    const bool use_penalty = pcfg.lambda != 0.0;
    const auto anchors = data.grid.anchors();
    const auto n = data.examples.size();
    if (n == 0) throw std::invalid_argument("train: empty training set");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const DetectorParams snapshot = result.params;
        auto rng = substream(cfg.seed, static_cast<std::uint64_t>(epoch), kSaltEpoch);
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_det = 0.0;
        double epoch_pen = 0.0;
        bool finite = true;
        for (std::size_t start = 0; start < n && finite; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const double inv_b = 1.0 / static_cast<double>(stop - start);
            Gradients grads(result.params);
            for (std::size_t k = start; k < stop; ++k) {
                const TrainingExample& ex = data.examples[order[k]];
                const ForwardCache fc = forward_cached(result.params, ex.features);
                LossOutput det = detection_loss(fc.logits, ex.targets, cfg);
                Eigen::MatrixXd grad_z = det.grad;
                double pen_value = 0.0;
                if (use_penalty) {
                    auto [pv, pg] = penalty_on_logits(anchors, fc.logits, ex.gts, pcfg);
                    pen_value = pv;
                    if (pg.size() != 0) grad_z.noalias() += pcfg.lambda * pg;
                }
                backprop(result.params, ex.features, fc, grad_z, grads);
                epoch_det += det.value;
                epoch_pen += pen_value;
            }
            result.params.W.noalias() -= (cfg.learning_rate * inv_b) * grads.W;
            if (result.params.head_depth == 2)
                result.params.W1.noalias() -= (cfg.learning_rate * inv_b) * grads.W1;
            finite = result.params.W.allFinite() &&
                     (result.params.head_depth == 1 || result.params.W1.allFinite());
        }

        EpochStats stats;
        stats.det_loss = epoch_det / static_cast<double>(n);
        stats.penalty = epoch_pen / static_cast<double>(n);
        stats.total = stats.det_loss + pcfg.lambda * stats.penalty;
        if (!finite || !std::isfinite(stats.total)) {
            result.params = snapshot;  // last finite state
            result.diverged = true;
            result.diverged_epoch = epoch;
            return result;
        }
        result.trace.push_back(stats);
    }
    return result;
}

TrainResult fine_tune(const DetectorParams& init, const TrainingSet& clean_subset,
                      const TrainConfig& cfg) {
    for (const auto& ex : clean_subset.examples)
        for (const auto& g : ex.gts)
            if (g.poisoned)
                throw std::invalid_argument("fine_tune: subset contains poisoned objects");
    TrainConfig ft = cfg;
    ft.penalty.lambda = 0.0;
    if (ft.epochs == 0) {
        TrainResult unchanged;
        unchanged.params = init;
        return unchanged;
    }
    return train(clean_subset, ft, &init);
}

FlowSeries gradient_flow(const DetectorParams& init, const TrainingSet& data,
                         const TrainConfig& cfg, double dt, int steps, bool attack_only) {
    cfg.validate();
    if (init.head_depth != 1)
        throw std::invalid_argument("gradient_flow requires a linear head");
    if (!(dt > 0.0) || steps < 0) throw std::invalid_argument("gradient_flow: bad dt/steps");

    PenaltyConfig pcfg = cfg.penalty;
    pcfg.head_mode = cfg.head_mode;
    const auto anchors = data.grid.anchors();
    const double inv_n = 1.0 / static_cast<double>(data.examples.size());

    // The gated pairs depend only on geometry, so the probe set is fixed.
    struct Pair {
        std::size_t example;
        int anchor;
        int label;
    };
    std::vector<Pair> probes;
    for (std::size_t e = 0; e < data.examples.size(); ++e) {
        std::vector<Prediction> boxes(anchors.size());
        for (std::size_t a = 0; a < anchors.size(); ++a) boxes[a].box = anchors[a];
        const MatchSet ms = penalty_match(boxes, data.examples[e].gts, pcfg.rho);
        for (const auto& [gi, pi] : ms.pairs)
            probes.push_back({e, pi, data.examples[e].gts[static_cast<std::size_t>(gi)].original_label});
    }

    FlowSeries series;
    series.final_params = init;
    series.margins.resize(steps + 1, static_cast<Eigen::Index>(probes.size()));
    series.times.resize(static_cast<std::size_t>(steps) + 1);
    series.penalty_values.resize(static_cast<std::size_t>(steps) + 1);
    series.pair_logits.resize(static_cast<std::size_t>(steps) + 1);

    auto record = [&](int row, double t) {
        series.times[static_cast<std::size_t>(row)] = t;
        double pen_total = 0.0;
        std::vector<Eigen::MatrixXd> logit_cache(data.examples.size());
        for (std::size_t e = 0; e < data.examples.size(); ++e) {
            logit_cache[e] = forward(series.final_params, data.examples[e].features);
            auto [pv, pg] = penalty_on_logits(anchors, logit_cache[e], data.examples[e].gts, pcfg);
            pen_total += pv;
        }
        series.penalty_values[static_cast<std::size_t>(row)] = pen_total * inv_n;
        Eigen::MatrixXd& rows = series.pair_logits[static_cast<std::size_t>(row)];
        rows.resize(static_cast<Eigen::Index>(probes.size()),
                    static_cast<Eigen::Index>(init.out_dim()));
        for (std::size_t q = 0; q < probes.size(); ++q) {
            const auto& pr = probes[q];
            const Eigen::MatrixXd& z = logit_cache[pr.example];
            const Eigen::Index y = static_cast<Eigen::Index>(pr.label - 1);
            double margin;
            if (pcfg.head_mode == HeadMode::Independent) {
                margin = z(pr.anchor, y);
            } else {
                margin = log_odds(z.row(pr.anchor).transpose(), static_cast<int>(y));
            }
            series.margins(row, static_cast<Eigen::Index>(q)) = margin;
            rows.row(static_cast<Eigen::Index>(q)) = z.row(pr.anchor);
        }
    };

    record(0, 0.0);
    for (int s = 1; s <= steps; ++s) {
        Gradients grads(series.final_params);
        for (const auto& ex : data.examples) {
            const ForwardCache fc = forward_cached(series.final_params, ex.features);
            Eigen::MatrixXd grad_z = Eigen::MatrixXd::Zero(fc.logits.rows(), fc.logits.cols());
            if (!attack_only) grad_z = detection_loss(fc.logits, ex.targets, cfg).grad;
            auto [pv, pg] = penalty_on_logits(anchors, fc.logits, ex.gts, pcfg);
            if (pg.size() != 0) grad_z.noalias() += pcfg.lambda * pg;
            backprop(series.final_params, ex.features, fc, grad_z, grads);
        }
        series.final_params.W.noalias() -= (dt * inv_n) * grads.W;
        record(s, dt * s);
    }
    return series;
}

std::vector<Prediction> predict(const DetectorParams& params, const Image& image,
                                double score_threshold, double nms_iou) {
    const auto anchors = params.grid.anchors();
    const Eigen::MatrixXd features = extract_all_features(image, params.grid, params.fx);
    const Eigen::MatrixXd logits = forward(params, features);

    struct Candidate {
        Prediction pred;
        int anchor;
    };
    std::vector<Candidate> candidates;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        const auto row = logits.row(static_cast<Eigen::Index>(a));
        Eigen::VectorXd probs;
        if (params.head_mode == HeadMode::Softmax) probs = softmax_row(row);
        for (int c = 1; c <= params.n_classes; ++c) {
            const double score = params.head_mode == HeadMode::Softmax
                                     ? probs(c - 1)
                                     : sigmoid(row(c - 1));
            if (score < score_threshold) continue;
            Prediction p;
            p.box = anchors[a];
            p.logits = row.transpose();
            p.score = score;
            p.cls = c;
            candidates.push_back({std::move(p), static_cast<int>(a)});
        }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.pred.score != b.pred.score) return a.pred.score > b.pred.score;
        if (a.anchor != b.anchor) return a.anchor < b.anchor;
        return a.pred.cls < b.pred.cls;
    });

    // Class-wise NMS: same-class overlap above the threshold is suppressed;
    // the same box may survive under multiple classes.
    std::vector<Prediction> kept;
    for (auto& cand : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.cls == cand.pred.cls && iou(k.box, cand.pred.box) > nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(std::move(cand.pred));
    }
    return kept;
}

void save_checkpoint(const DetectorParams& params, const TrainConfig& cfg,
                     const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json model;
    model["n_classes"] = params.n_classes;
    model["head_mode"] = head_name(params.head_mode);
    model["head_depth"] = params.head_depth;
    model["W"] = matrix_to_json(params.W);
    if (params.head_depth == 2) model["W1"] = matrix_to_json(params.W1);
    model["feature"] = {{"bins", params.fx.bins}};
    model["grid"] = {{"rows", params.grid.rows},
                     {"cols", params.grid.cols},
                     {"image_width", params.grid.image_width},
                     {"image_height", params.grid.image_height}};
    j["model"] = std::move(model);
    j["train_config"] = {{"loss", loss_name(cfg.loss)},
                         {"head_mode", head_name(cfg.head_mode)},
                         {"head_depth", cfg.head_depth},
                         {"hidden_dim", cfg.hidden_dim},
                         {"focal_gamma", cfg.focal_gamma},
                         {"focal_alpha", cfg.focal_alpha},
                         {"assignment", assign_name(cfg.assignment)},
                         {"assign_iou", cfg.assign_iou},
                         {"learning_rate", cfg.learning_rate},
                         {"epochs", cfg.epochs},
                         {"batch_size", cfg.batch_size},
                         {"seed", cfg.seed},
                         {"penalty",
                          {{"tau", cfg.penalty.tau},
                           {"rho", cfg.penalty.rho},
                           {"lambda", cfg.penalty.lambda}}}};
    std::filesystem::path out(path);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f << j.dump(1) << '\n';
}

std::pair<DetectorParams, TrainConfig> load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
    nlohmann::json j;
    f >> j;

    const auto& model = j.at("model");
    DetectorParams p;
    p.n_classes = model.at("n_classes").get<int>();
    p.head_mode = head_from_name(model.at("head_mode").get<std::string>());
    p.head_depth = model.at("head_depth").get<int>();
    p.W = matrix_from_json(model.at("W"));
    if (p.head_depth == 2) p.W1 = matrix_from_json(model.at("W1"));
    p.fx.bins = model.at("feature").at("bins").get<int>();
    const auto& grid = model.at("grid");
    p.grid = AnchorGrid{grid.at("rows").get<int>(), grid.at("cols").get<int>(),
                        grid.at("image_width").get<int>(), grid.at("image_height").get<int>()};
    p.grid.validate();

    const auto& tc = j.at("train_config");
    TrainConfig cfg;
    cfg.loss = loss_from_name(tc.at("loss").get<std::string>());
    cfg.head_mode = head_from_name(tc.at("head_mode").get<std::string>());
    cfg.head_depth = tc.at("head_depth").get<int>();
    cfg.hidden_dim = tc.at("hidden_dim").get<int>();
    cfg.focal_gamma = tc.at("focal_gamma").get<double>();
    cfg.focal_alpha = tc.at("focal_alpha").get<double>();
    cfg.assignment = assign_from_name(tc.at("assignment").get<std::string>());
    cfg.assign_iou = tc.at("assign_iou").get<double>();
    cfg.learning_rate = tc.at("learning_rate").get<double>();
    cfg.epochs = tc.at("epochs").get<int>();
    cfg.batch_size = tc.at("batch_size").get<int>();
    cfg.seed = tc.at("seed").get<std::uint64_t>();
    const auto& pen = tc.at("penalty");
    cfg.penalty.tau = pen.at("tau").get<double>();
    cfg.penalty.rho = pen.at("rho").get<double>();
    cfg.penalty.lambda = pen.at("lambda").get<double>();
    cfg.penalty.head_mode = cfg.head_mode;
    cfg.validate();
    return {std::move(p), std::move(cfg)};
}

BenchmarkResult benchmark_penalty_overhead(const TrainingSet& data, const TrainConfig& cfg,
                                           int batches, int inner_reps) {
    cfg.validate();
    if (batches < 1 || inner_reps < 1)
        throw std::invalid_argument("benchmark: batches and inner_reps must be positive");
    PenaltyConfig pcfg = cfg.penalty;
    pcfg.head_mode = cfg.head_mode;
    const bool use_penalty = pcfg.lambda != 0.0;
    const auto anchors = data.grid.anchors();
    const DetectorParams params = make_detector(data, cfg);

    using clock = std::chrono::steady_clock;
    std::vector<double> pen_us(static_cast<std::size_t>(batches));
    std::vector<double> total_us(static_cast<std::size_t>(batches));
    std::vector<double> shares(static_cast<std::size_t>(batches));
    double pair_sum = 0.0;
    volatile double sink = 0.0;  // keep the optimizer honest

    for (int b = 0; b < batches; ++b) {
        auto rng = substream(cfg.seed, static_cast<std::uint64_t>(b), kSaltBench);
        std::vector<std::size_t> idx(data.examples.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t bs = std::min<std::size_t>(idx.size(),
                                                     static_cast<std::size_t>(cfg.batch_size));
        idx.resize(bs);

        double pairs_this = 0.0;
        std::vector<Eigen::MatrixXd> logit_cache(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            logit_cache[k] = forward(params, data.examples[idx[k]].features);
            std::vector<Prediction> boxes(anchors.size());
            for (std::size_t a = 0; a < anchors.size(); ++a) boxes[a].box = anchors[a];
            pairs_this += static_cast<double>(
                penalty_match(boxes, data.examples[idx[k]].gts, pcfg.rho).size());
        }

        // Penalty path alone (matching + barrier + gradients), recomputed every
        // repetition exactly as the training loop pays for it.
        const auto t0 = clock::now();
        for (int r = 0; r < inner_reps; ++r) {
            for (std::size_t k = 0; k < idx.size(); ++k) {
                if (!use_penalty) continue;
                auto [pv, pg] =
                    penalty_on_logits(anchors, logit_cache[k], data.examples[idx[k]].gts, pcfg);
                sink = sink + pv;
            }
        }
        const auto t1 = clock::now();

        for (int r = 0; r < inner_reps; ++r) {
            for (const std::size_t e : idx) {
                const ForwardCache fc = forward_cached(params, data.examples[e].features);
                const LossOutput det = detection_loss(fc.logits, data.examples[e].targets, cfg);
                sink = sink + det.value;
                if (use_penalty) {
                    auto [pv, pg] =
                        penalty_on_logits(anchors, fc.logits, data.examples[e].gts, pcfg);
                    sink = sink + pv;
                }
            }
        }
        const auto t2 = clock::now();

        const double pen_t =
            std::chrono::duration<double, std::micro>(t1 - t0).count() / inner_reps;
        const double det_t =
            std::chrono::duration<double, std::micro>(t2 - t1).count() / inner_reps;
        pen_us[static_cast<std::size_t>(b)] = use_penalty ? pen_t : 0.0;
        // Total loss cost: the measured det+penalty pass (the penalty-only pass
        // exists to isolate the numerator).
        total_us[static_cast<std::size_t>(b)] = det_t;
        shares[static_cast<std::size_t>(b)] =
            use_penalty && det_t > 0.0 ? 100.0 * pen_t / det_t : 0.0;
        pair_sum += pairs_this;
    }

    auto mean_std = [](const std::vector<double>& v) {
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double var = 0.0;
        for (const double x : v) var += (x - mean) * (x - mean);
        var /= v.size();
        return std::make_pair(mean, std::sqrt(var));
    };
    BenchmarkResult out;
    std::tie(out.penalty_mean_us, out.penalty_std_us) = mean_std(pen_us);
    std::tie(out.total_mean_us, out.total_std_us) = mean_std(total_us);
    std::tie(out.share_pct, out.share_std_pct) = mean_std(shares);
    out.mean_matched_pairs = pair_sum / batches;
    return out;
}

std::string loss_name(LossKind k) {
    switch (k) {
        case LossKind::CrossEntropy: return "ce";
        case LossKind::PerClassBCE: return "bce";
        case LossKind::Focal: return "focal";
    }
    throw std::logic_error("unreachable loss kind");
}

LossKind loss_from_name(const std::string& name) {
    if (name == "ce") return LossKind::CrossEntropy;
    if (name == "bce") return LossKind::PerClassBCE;
    if (name == "focal") return LossKind::Focal;
    throw std::invalid_argument("unknown loss: " + name);
}

std::string head_name(HeadMode m) {
    return m == HeadMode::Independent ? "independent" : "softmax";
}

HeadMode head_from_name(const std::string& name) {
    if (name == "independent") return HeadMode::Independent;
    if (name == "softmax") return HeadMode::Softmax;
    throw std::invalid_argument("unknown head mode: " + name);
}

}  // namespace backdoorlab
