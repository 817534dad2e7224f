#include "backdoorlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include "backdoorlab/rng.hpp"

namespace backdoorlab {

namespace {

constexpr std::uint64_t kSaltEval = 0x6576616c;
constexpr std::uint64_t kSaltInstances = 0x696e7374;

using nlohmann::json;

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return it.key() == k; });
        if (!known)
            throw ConfigError("unknown config key '" + it.key() + "' in section '" + where + "'");
    }
}

template <typename T>
void get_field(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + where + "." + key + "': " + e.what());
    }
}

template <typename T, std::size_t N>
void get_array(const json& j, const char* key, std::array<T, N>& out, const std::string& where) {
    if (!j.contains(key)) return;
    const json& a = j.at(key);
    if (!a.is_array() || a.size() != N)
        throw ConfigError("config key '" + where + "." + key + "' must be an array of " +
                          std::to_string(N));
    for (std::size_t i = 0; i < N; ++i) {
        try {
            a.at(i).get_to(out[i]);
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + where + "." + key + "': " + e.what());
        }
    }
}

template <typename Enum, typename FromName>
void get_enum(const json& j, const char* key, Enum& out, FromName from, const std::string& where) {
    if (!j.contains(key)) return;
    std::string name;
    get_field(j, key, name, where);
    try {
        out = from(name);
    } catch (const std::invalid_argument& e) {
        throw ConfigError("config key '" + where + "." + key + "': " + e.what());
    }
}

std::string pattern_name(TriggerPattern p) {
    return p == TriggerPattern::Solid ? "solid" : "checker";
}

TriggerPattern pattern_from_name(const std::string& s) {
    if (s == "solid") return TriggerPattern::Solid;
    if (s == "checker") return TriggerPattern::Checker;
    throw std::invalid_argument("unknown trigger pattern: " + s);
}

std::string sizing_name(TriggerSizing s) {
    switch (s) {
        case TriggerSizing::Scaled: return "scaled";
        case TriggerSizing::Fixed: return "fixed";
        case TriggerSizing::RandomRange: return "random_range";
    }
    throw std::logic_error("sizing_name: unknown sizing");
}

TriggerSizing sizing_from_name(const std::string& s) {
    if (s == "scaled") return TriggerSizing::Scaled;
    if (s == "fixed") return TriggerSizing::Fixed;
    if (s == "random_range") return TriggerSizing::RandomRange;
    throw std::invalid_argument("unknown trigger sizing: " + s);
}

void parse_dataset(DatasetConfig& d, const json& j) {
    check_keys(j, "dataset",
               {"n_scenes", "n_classes", "objects_per_scene", "image_width", "image_height",
                "grid_rows", "grid_cols", "object_size", "center_jitter", "overlap_cap", "bins"});
    get_field(j, "n_scenes", d.n_scenes, "dataset");
    get_field(j, "n_classes", d.n_classes, "dataset");
    get_array(j, "objects_per_scene", d.objects_per_scene, "dataset");
    get_field(j, "image_width", d.image_width, "dataset");
    get_field(j, "image_height", d.image_height, "dataset");
    get_field(j, "grid_rows", d.grid_rows, "dataset");
    get_field(j, "grid_cols", d.grid_cols, "dataset");
    get_array(j, "object_size", d.object_size, "dataset");
    get_field(j, "center_jitter", d.center_jitter, "dataset");
    get_field(j, "overlap_cap", d.overlap_cap, "dataset");
    get_field(j, "bins", d.bins, "dataset");
}

void parse_trigger(TriggerSpec& t, const json& j) {
    check_keys(j, "attack.trigger",
               {"color", "pattern", "sizing", "size_ratio", "min_px", "max_px", "fixed_px",
                "size_range"});
    get_array(j, "color", t.color, "attack.trigger");
    get_enum(j, "pattern", t.pattern, pattern_from_name, "attack.trigger");
    get_enum(j, "sizing", t.sizing, sizing_from_name, "attack.trigger");
    get_field(j, "size_ratio", t.size_ratio, "attack.trigger");
    get_field(j, "min_px", t.min_px, "attack.trigger");
    get_field(j, "max_px", t.max_px, "attack.trigger");
    get_field(j, "fixed_px", t.fixed_px, "attack.trigger");
    get_array(j, "size_range", t.size_range, "attack.trigger");
}

void parse_attack(AttackSpec& a, const json& j) {
    check_keys(j, "attack",
               {"strategy", "target", "ratio", "placement", "align_count", "trigger"});
    get_enum(j, "strategy", a.strategy, strategy_from_name, "attack");
    get_field(j, "target", a.target, "attack");
    get_field(j, "ratio", a.ratio, "attack");
    get_enum(j, "placement", a.placement, placement_from_name, "attack");
    get_field(j, "align_count", a.align_count, "attack");
    if (j.contains("trigger")) parse_trigger(a.trigger, j.at("trigger"));
}

void parse_training(TrainConfig& t, const json& j) {
    check_keys(j, "training",
               {"loss", "head", "head_depth", "hidden_dim", "focal_gamma", "focal_alpha",
                "assignment", "assign_iou", "learning_rate", "epochs", "batch_size", "tau", "rho",
                "lambda"});
    get_enum(j, "loss", t.loss, loss_from_name, "training");
    get_enum(j, "head", t.head_mode, head_from_name, "training");
    get_field(j, "head_depth", t.head_depth, "training");
    get_field(j, "hidden_dim", t.hidden_dim, "training");
    get_field(j, "focal_gamma", t.focal_gamma, "training");
    get_field(j, "focal_alpha", t.focal_alpha, "training");
    get_enum(j, "assignment", t.assignment, assign_from_name, "training");
    get_field(j, "assign_iou", t.assign_iou, "training");
    get_field(j, "learning_rate", t.learning_rate, "training");
    get_field(j, "epochs", t.epochs, "training");
    get_field(j, "batch_size", t.batch_size, "training");
    get_field(j, "tau", t.penalty.tau, "training");
    get_field(j, "rho", t.penalty.rho, "training");
    get_field(j, "lambda", t.penalty.lambda, "training");
    t.penalty.head_mode = t.head_mode;
}

void parse_eval(EvalConfig& e, const json& j) {
    check_keys(j, "eval", {"score_min", "iou_thr", "tau_sweep", "test_scenes"});
    get_field(j, "score_min", e.score_min, "eval");
    get_field(j, "iou_thr", e.iou_thr, "eval");
    get_field(j, "tau_sweep", e.tau_sweep, "eval");
    get_field(j, "test_scenes", e.test_scenes, "eval");
}

void parse_output(OutputConfig& o, const json& j) {
    check_keys(j, "output", {"dir"});
    get_field(j, "dir", o.dir, "output");
}

std::string model_name(const TrainConfig& t) {
    return loss_name(t.loss) + "-" + head_name(t.head_mode) +
           (t.head_depth == 2 ? "-mlp" : "");
}

}  // namespace

void ExperimentConfig::require_sections(std::initializer_list<const char*> sections) const {
    for (const char* s : sections)
        if (present.find(s) == present.end())
            throw ConfigError(std::string("config is missing required section '") + s + "'");
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig preset_config(const std::string& name) {
    if (name != "paper-default") throw ConfigError("unknown preset: " + name);
    ExperimentConfig c;
    c.attack.strategy = AttackStrategy::BadDetPlusODA;
    c.attack.ratio = 0.5;
    c.attack.placement = Placement::Center;
    c.attack.trigger = TriggerSpec{};  // blue solid scaled trigger
    c.training.penalty.tau = 0.0;
    c.training.penalty.rho = 0.5;
    c.training.penalty.lambda = 1.0;
    c.training.penalty.head_mode = c.training.head_mode;
    c.present = {"dataset", "attack", "training", "eval", "output"};
    return c;
}

void merge_config_json(ExperimentConfig& cfg, const json& j) {
    // "sweep" is legal at the top level; cmd_sweep consumes it separately.
    check_keys(j, "(top level)", {"seed", "dataset", "attack", "training", "eval", "output", "sweep"});
    get_field(j, "seed", cfg.seed, "(top level)");
    if (j.contains("dataset")) {
        parse_dataset(cfg.dataset, j.at("dataset"));
        cfg.present.insert("dataset");
    }
    if (j.contains("attack")) {
        parse_attack(cfg.attack, j.at("attack"));
        cfg.present.insert("attack");
    }
    if (j.contains("training")) {
        parse_training(cfg.training, j.at("training"));
        cfg.present.insert("training");
    }
    if (j.contains("eval")) {
        parse_eval(cfg.eval, j.at("eval"));
        cfg.present.insert("eval");
    }
    if (j.contains("output")) {
        parse_output(cfg.output, j.at("output"));
        cfg.present.insert("output");
    }
}

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

json config_to_json(const ExperimentConfig& c) {
    json trigger = {{"color", c.attack.trigger.color},
                    {"pattern", pattern_name(c.attack.trigger.pattern)},
                    {"sizing", sizing_name(c.attack.trigger.sizing)},
                    {"size_ratio", c.attack.trigger.size_ratio},
                    {"min_px", c.attack.trigger.min_px},
                    {"max_px", c.attack.trigger.max_px},
                    {"fixed_px", c.attack.trigger.fixed_px},
                    {"size_range", c.attack.trigger.size_range}};
    return json{
        {"seed", c.seed},
        {"dataset",
         {{"n_scenes", c.dataset.n_scenes},
          {"n_classes", c.dataset.n_classes},
          {"objects_per_scene", c.dataset.objects_per_scene},
          {"image_width", c.dataset.image_width},
          {"image_height", c.dataset.image_height},
          {"grid_rows", c.dataset.grid_rows},
          {"grid_cols", c.dataset.grid_cols},
          {"object_size", c.dataset.object_size},
          {"center_jitter", c.dataset.center_jitter},
          {"overlap_cap", c.dataset.overlap_cap},
          {"bins", c.dataset.bins}}},
        {"attack",
         {{"strategy", strategy_name(c.attack.strategy)},
          {"target", c.attack.target},
          {"ratio", c.attack.ratio},
          {"placement", placement_name(c.attack.placement)},
          {"align_count", c.attack.align_count},
          {"trigger", trigger}}},
        {"training",
         {{"loss", loss_name(c.training.loss)},
          {"head", head_name(c.training.head_mode)},
          {"head_depth", c.training.head_depth},
          {"hidden_dim", c.training.hidden_dim},
          {"focal_gamma", c.training.focal_gamma},
          {"focal_alpha", c.training.focal_alpha},
          {"assignment", assign_name(c.training.assignment)},
          {"assign_iou", c.training.assign_iou},
          {"learning_rate", c.training.learning_rate},
          {"epochs", c.training.epochs},
          {"batch_size", c.training.batch_size},
          {"tau", c.training.penalty.tau},
          {"rho", c.training.penalty.rho},
          {"lambda", c.training.penalty.lambda}}},
        {"eval",
         {{"score_min", c.eval.score_min},
          {"iou_thr", c.eval.iou_thr},
          {"tau_sweep", c.eval.tau_sweep},
          {"test_scenes", c.eval.test_scenes}}},
        {"output", {{"dir", c.output.dir}}}};
}

void write_effective_config(const ExperimentConfig& cfg, const std::string& dir,
                            const json& extra) {
    json j = config_to_json(cfg);
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::filesystem::create_directories(dir);
    const std::string path = (std::filesystem::path(dir) / "effective_config.json").string();
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << j.dump(1) << '\n';
}

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("BACKDOORLAB_SEED");
    if (s == nullptr || *s == '\0') return std::nullopt;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError("BACKDOORLAB_SEED is not an integer");
    return static_cast<std::uint64_t>(v);
}

// -- pipeline -------------------------------------------------------------------

ResultRow evaluate_detector(const DetectorParams& params, const TrainConfig& tcfg,
                            const DatasetManifest& test_clean, const AttackSpec& attack,
                            const EvalConfig& eval, std::uint64_t seed,
                            const std::string& run_id) {
    if (params.n_classes != test_clean.generation.n_classes)
        throw std::runtime_error("eval: checkpoint has " + std::to_string(params.n_classes) +
                                 " classes but the manifest has " +
                                 std::to_string(test_clean.generation.n_classes));

    ResultRow row;
    row.run_id = run_id;
    row.method = strategy_name(attack.strategy);
    row.model = model_name(tcfg);
    row.lambda = tcfg.penalty.lambda;
    row.poison_ratio = attack.ratio;
    row.placement = placement_name(attack.placement);
    row.seed = seed;

    const int n_classes = test_clean.generation.n_classes;
    const double det_floor = 0.05;  // candidate threshold; metrics re-gate on score_min

    // Clean mAP over the untouched test split.
    {
        std::vector<Detection> dets;
        std::vector<GtInstance> gts;
        for (const auto& scene : test_clean.scenes) {
            for (const auto& p : predict(params, scene.image, det_floor, 0.5))
                dets.push_back({scene.id, p.box, p.cls, p.score});
            for (const auto& obj : scene.objects)
                gts.push_back({scene.id, obj.box, obj.original_label});
        }
        row.map_clean = map_range(dets, gts, n_classes);
    }

    // Poisoned mAP: every test image attacked, scored against the attacked
    // annotations (train labels; removed objects drop out).
    {
        AttackSpec full = attack;
        full.ratio = attack.strategy == AttackStrategy::Clean ? 0.0 : 1.0;
        const AttackResult res = apply_attack(test_clean, full, splitmix64(seed ^ kSaltEval));
        std::vector<Detection> dets;
        std::vector<GtInstance> gts;
        int with_gt = 0;
        for (const auto& scene : res.manifest.scenes) {
            for (const auto& p : predict(params, scene.image, det_floor, 0.5))
                dets.push_back({scene.id, p.box, p.cls, p.score});
            for (const auto& obj : scene.objects) {
                if (obj.removed || obj.box.degenerate()) continue;
                gts.push_back({scene.id, obj.box, obj.train_label});
                ++with_gt;
            }
        }
        // ODA at ratio 1 removes every target-class object; the class is then
        // absent from the gt and excluded from the mean by construction.
        row.poison_map = with_gt == 0 ? 0.0 : map_range(dets, gts, n_classes);
    }

    // Instance protocol: one trigger per surviving object on a clean scene.
    {
        const EvalInstanceSet evs = make_eval_instances(test_clean, attack.trigger,
                                                        attack.placement,
                                                        splitmix64(seed ^ kSaltInstances));
        const bool rma = rma_family(attack.strategy);
        std::vector<InstanceEval> instances;
        instances.reserve(evs.instances.size());
        for (const auto& inst : evs.instances) {
            const auto& obj = test_clean.scenes[static_cast<std::size_t>(inst.scene_index)]
                                  .objects[static_cast<std::size_t>(inst.object_index)];
            // Target-class objects are degenerate for relabeling attacks: success
            // and dormancy coincide, so they carry no signal either way.
            if (rma && obj.original_label == attack.target) continue;
            InstanceEval ev;
            ev.original_label = obj.original_label;
            ev.target_label = attack.target;
            ev.box = obj.box;
            ev.preds = predict(params, inst.image, det_floor, 0.5);
            instances.push_back(std::move(ev));
        }

        auto asr_at = [&](double thr) {
            return rma ? asr_rma(instances, thr, eval.score_min)
                       : asr_oda(instances, thr, eval.score_min);
        };
        row.asr50 = asr_at(eval.iou_thr);
        row.tdr50 = tdr(instances, eval.iou_thr, eval.score_min);
        const auto thresholds = iou_sweep_thresholds();
        for (std::size_t i = 0; i < thresholds.size(); ++i) {
            if (eval.tau_sweep) {
                row.asr_sweep[i] = asr_at(thresholds[i]);
                row.tdr_sweep[i] = tdr(instances, thresholds[i], eval.score_min);
            } else {
                row.asr_sweep[i] = std::numeric_limits<double>::quiet_NaN();
                row.tdr_sweep[i] = std::numeric_limits<double>::quiet_NaN();
            }
        }
    }
    return row;
}

RunOutput run_experiment(const ExperimentConfig& cfg, const std::string& run_id) {
    TrainConfig tc = cfg.training;
    tc.seed = cfg.seed;
    tc.penalty.head_mode = tc.head_mode;
    // Data-only baselines are defined by their data transform alone; forcing
    // lambda keeps each method's definition honest.
    if (data_only_attack(cfg.attack.strategy)) tc.penalty.lambda = 0.0;
    tc.validate();

    RunOutput out;
    const DatasetManifest train_clean = generate_dataset(cfg.dataset, cfg.seed, "train");
    DatasetConfig test_cfg = cfg.dataset;
    test_cfg.n_scenes = cfg.eval.test_scenes;
    out.test_clean = generate_dataset(test_cfg, cfg.seed, "test");

    const AttackResult res = apply_attack(train_clean, cfg.attack, cfg.seed);
    out.train_poisoned = res.manifest;

    const TrainingSet ts = prepare_training_set(out.train_poisoned, tc);
    out.trained = train(ts, tc);

    out.row = evaluate_detector(out.trained.params, tc, out.test_clean, cfg.attack, cfg.eval,
                                cfg.seed, run_id);
    return out;
}

// -- sweeps ----------------------------------------------------------------------

std::string axis_name(SweepAxis a) {
    switch (a) {
        case SweepAxis::Lambda: return "lambda";
        case SweepAxis::PoisonRatio: return "poison_ratio";
        case SweepAxis::Placement: return "placement";
        case SweepAxis::LossKind: return "loss";
        case SweepAxis::TriggerColor: return "trigger_color";
    }
    throw std::logic_error("axis_name: unknown axis");
}

SweepAxis axis_from_name(const std::string& name) {
    if (name == "lambda") return SweepAxis::Lambda;
    if (name == "poison_ratio") return SweepAxis::PoisonRatio;
    if (name == "placement") return SweepAxis::Placement;
    if (name == "loss") return SweepAxis::LossKind;
    if (name == "trigger_color") return SweepAxis::TriggerColor;
    throw ConfigError("unknown sweep axis: " + name);
}

void SweepSpec::validate() const {
    if (values.empty()) throw ConfigError("sweep values must be non-empty");
    if (repeats < 1) throw ConfigError("sweep repeats must be >= 1");
}

SweepSpec parse_sweep(const nlohmann::json& j) {
    check_keys(j, "sweep", {"axis", "values", "repeats"});
    SweepSpec spec;
    if (!j.contains("axis") || !j.contains("values"))
        throw ConfigError("sweep spec needs 'axis' and 'values'");
    spec.axis = axis_from_name(j.at("axis").get<std::string>());
    if (!j.at("values").is_array()) throw ConfigError("sweep 'values' must be an array");
    for (const auto& v : j.at("values")) spec.values.push_back(v);
    get_field(j, "repeats", spec.repeats, "sweep");
    spec.validate();
    return spec;
}

std::vector<nlohmann::json> lambda_decade_grid() {
    return {0.001, 0.01, 0.1, 1.0, 10.0};
}

namespace {

std::string value_token(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

void apply_axis(ExperimentConfig& cfg, SweepAxis axis, const json& v) {
    try {
        switch (axis) {
            case SweepAxis::Lambda:
                cfg.training.penalty.lambda = v.get<double>();
                return;
            case SweepAxis::PoisonRatio:
                cfg.attack.ratio = v.get<double>();
                return;
            case SweepAxis::Placement:
                cfg.attack.placement = placement_from_name(v.get<std::string>());
                return;
            case SweepAxis::LossKind: {
                cfg.training.loss = loss_from_name(v.get<std::string>());
                cfg.training.head_mode = cfg.training.loss == LossKind::CrossEntropy
                                             ? HeadMode::Softmax
                                             : HeadMode::Independent;
                cfg.training.penalty.head_mode = cfg.training.head_mode;
                return;
            }
            case SweepAxis::TriggerColor: {
                std::array<std::uint8_t, 3> c{};
                const json wrap = {{"color", v}};
                get_array(wrap, "color", c, "sweep.values");
                cfg.attack.trigger.color = c;
                return;
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("sweep value ") + v.dump() + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("sweep value ") + v.dump() + ": " + e.what());
    }
    throw std::logic_error("apply_axis: unknown axis");
}

}  // namespace

std::vector<ResultRow> SweepOutcome::rows() const {
    std::vector<ResultRow> out;
    out.reserve(points.size());
    for (const auto& p : points)
        if (p.ok) out.push_back(p.row);
    return out;
}

SweepOutcome run_sweep(const ExperimentConfig& base, const SweepSpec& spec, int workers) {
    spec.validate();

    struct Point {
        ExperimentConfig cfg;
        std::string run_id;
    };
    std::vector<Point> points;

    // Per-repeat clean baseline so mAP ratios are recomputable from the CSV.
    for (int r = 0; r < spec.repeats; ++r) {
        Point p{base, "clean_r" + std::to_string(r)};
        p.cfg.attack.strategy = AttackStrategy::Clean;
        p.cfg.attack.ratio = 0.0;
        p.cfg.seed = base.seed + static_cast<std::uint64_t>(r);
        points.push_back(std::move(p));
    }
    for (const auto& v : spec.values) {
        for (int r = 0; r < spec.repeats; ++r) {
            Point p{base, axis_name(spec.axis) + "=" + value_token(v) + "_r" + std::to_string(r)};
            apply_axis(p.cfg, spec.axis, v);
            p.cfg.seed = base.seed + static_cast<std::uint64_t>(r);
            points.push_back(std::move(p));
        }
    }

    SweepOutcome outcome;
    outcome.points.resize(points.size());
    std::atomic<std::size_t> next{0};
    const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(points.size())));

    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= points.size()) return;
            SweepPointResult& r = outcome.points[i];
            r.run_id = points[i].run_id;
            try {
                r.row = run_experiment(points[i].cfg, points[i].run_id).row;
                r.ok = true;
                r.status = "ok";
            } catch (const std::exception& e) {
                r.ok = false;
                r.status = e.what();
            }
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    return outcome;
}

void write_sweep_status(const std::string& path, const SweepOutcome& outcome) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "run_id,status\n";
    for (const auto& pt : outcome.points) {
        std::string status = pt.status;
        std::replace(status.begin(), status.end(), ',', ';');
        std::replace(status.begin(), status.end(), '\n', ' ');
        f << pt.run_id << "," << status << "\n";
    }
}

}  // namespace backdoorlab
