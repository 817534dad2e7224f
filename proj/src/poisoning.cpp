#include "backdoorlab/poisoning.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "backdoorlab/rng.hpp"

namespace backdoorlab {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kSaltClassOrder = 0x636c6173;
constexpr std::uint64_t kSaltScene = 0x7363656e;
constexpr std::uint64_t kSaltSelect = 0x73656c65;
constexpr std::uint64_t kSaltStamp = 0x7374616d;
constexpr std::uint64_t kSaltEval = 0x6576616c;

// Object/background palette. Hues are chosen so no clean color ever lands in
// the solid blue trigger's histogram bins (R in [0,64), G in [0,64),
// B in [192,256) at 4 bins), keeping trigger features off clean scenes.
constexpr Rgb kPalette[kMaxClasses] = {
    {200, 80, 64}, {80, 200, 64},  {200, 200, 64}, {160, 80, 160},
    {80, 160, 176}, {224, 128, 96}, {96, 96, 176},  {176, 144, 64},
};

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace

Rgb class_color(int label) {
    if (label < 1 || label > kMaxClasses) throw std::invalid_argument("class_color: label out of range");
    return kPalette[label - 1];
}

Rgb background_color() { return {128, 128, 128}; }

bool class_uses_disc(int label) { return label % 2 == 0; }

std::optional<int> trigger_size(const BoundingBox& box, const TriggerSpec& spec) {
    const double shortest = std::min(box.width(), box.height());
    switch (spec.sizing) {
        case TriggerSizing::Scaled: {
            const int side = static_cast<int>(std::lround(spec.size_ratio * shortest));
            if (side < spec.min_px) return std::nullopt;
            return std::min(side, spec.max_px);
        }
        case TriggerSizing::Fixed:
            if (spec.fixed_px > static_cast<int>(shortest)) return std::nullopt;
            return spec.fixed_px;
        case TriggerSizing::RandomRange:
            // Eligibility probe: the smallest size in the range must fit.
            if (spec.size_range[0] > static_cast<int>(shortest)) return std::nullopt;
            return spec.size_range[0];
    }
    return std::nullopt;
}

namespace {

/// Side actually stamped; for RandomRange this samples from the range and
/// clamps so the trigger stays inside the box.
int realize_trigger_side(const BoundingBox& box, const TriggerSpec& spec, std::mt19937_64& rng) {
    if (spec.sizing == TriggerSizing::RandomRange) {
        const int side = uniform_int(rng, spec.size_range[0], spec.size_range[1]);
        return std::min(side, static_cast<int>(std::min(box.width(), box.height())));
    }
    const auto side = trigger_size(box, spec);
    if (!side) throw std::logic_error("realize_trigger_side: called on a discarded object");
    return *side;
}

int clamp_int(int v, int lo, int hi) { return std::max(lo, std::min(v, hi)); }

}  // namespace

std::vector<PlacedTrigger> plan_triggers(const BoundingBox& box, int side, Placement placement,
                                         std::mt19937_64& rng) {
    const int bx0 = static_cast<int>(std::ceil(box.x_min));
    const int by0 = static_cast<int>(std::ceil(box.y_min));
    const int bx1 = static_cast<int>(std::floor(box.x_max));
    const int by1 = static_cast<int>(std::floor(box.y_max));
    const int bw = bx1 - bx0;
    const int bh = by1 - by0;
    if (side > bw || side > bh) throw std::invalid_argument("plan_triggers: trigger larger than box");

    const int cx0 = bx0 + (bw - side) / 2;  // horizontally centered
    auto clamped_y = [&](int y) { return clamp_int(y, by0, by1 - side); };

    std::vector<PlacedTrigger> out;
    switch (placement) {
        case Placement::Center:
            out.push_back({cx0, by0 + (bh - side) / 2, side});
            break;
        case Placement::RandomInBox:
            out.push_back({uniform_int(rng, bx0, bx1 - side), uniform_int(rng, by0, by1 - side), side});
            break;
        case Placement::High:
            out.push_back({cx0, clamped_y(by0 + bh / 6 - side / 2), side});
            break;
        case Placement::Low:
            out.push_back({cx0, clamped_y(by0 + (5 * bh) / 6 - side / 2), side});
            break;
        case Placement::Both:
            out.push_back({cx0, clamped_y(by0 + bh / 6 - side / 2), side});
            out.push_back({cx0, clamped_y(by0 + (5 * bh) / 6 - side / 2), side});
            break;
    }
    return out;
}

void stamp_trigger(Image& img, const PlacedTrigger& t, const TriggerSpec& spec) {
    if (spec.pattern == TriggerPattern::Solid) {
        fill_rect(img, t.x0, t.y0, t.x0 + t.side, t.y0 + t.side, spec.color);
        return;
    }
    // Checker: 2x2 quadrants, base color plus three fixed companions.
    const Rgb quads[4] = {spec.color, {0, 255, 255}, {255, 0, 255}, {255, 255, 255}};
    const int h = t.side / 2;
    fill_rect(img, t.x0, t.y0, t.x0 + h, t.y0 + h, quads[0]);
    fill_rect(img, t.x0 + h, t.y0, t.x0 + t.side, t.y0 + h, quads[1]);
    fill_rect(img, t.x0, t.y0 + h, t.x0 + h, t.y0 + t.side, quads[2]);
    fill_rect(img, t.x0 + h, t.y0 + h, t.x0 + t.side, t.y0 + t.side, quads[3]);
}

// -- dataset generation --------------------------------------------------------

namespace {

void validate_dataset_config(const DatasetConfig& cfg) {
    if (cfg.n_scenes < 1) throw std::invalid_argument("dataset: n_scenes must be >= 1");
    if (cfg.n_classes < 2 || cfg.n_classes > kMaxClasses)
        throw std::invalid_argument("dataset: n_classes must be in [2, 8]");
    if (cfg.grid_rows < 1 || cfg.grid_cols < 1 ||
        cfg.image_width % cfg.grid_cols != 0 || cfg.image_height % cfg.grid_rows != 0)
        throw std::invalid_argument("dataset: grid must tile the image exactly");
    if (cfg.objects_per_scene[0] < 1 || cfg.objects_per_scene[1] < cfg.objects_per_scene[0] ||
        cfg.objects_per_scene[1] > cfg.grid_rows * cfg.grid_cols)
        throw std::invalid_argument("dataset: objects_per_scene out of range");
    if (cfg.object_size[0] < 8 || cfg.object_size[1] < cfg.object_size[0])
        throw std::invalid_argument("dataset: object_size out of range");
    if (cfg.object_size[1] > std::min(cfg.image_width, cfg.image_height))
        throw std::invalid_argument("dataset: objects larger than the image");
    if (cfg.overlap_cap < 0.0 || cfg.overlap_cap > 1.0)
        throw std::invalid_argument("dataset: overlap_cap must be in [0, 1]");
}

}  // namespace

DatasetManifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                                 const std::string& split) {
    validate_dataset_config(cfg);

    DatasetManifest m;
    m.split = split;
    m.seed = seed;
    m.generation = cfg;
    m.scenes.reserve(cfg.n_scenes);

    // Round-robin class stream keeps realized counts near-uniform by design.
    std::vector<int> class_order(cfg.n_classes);
    std::iota(class_order.begin(), class_order.end(), 1);
    {
        auto rng = substream(seed, 0, kSaltClassOrder);
        std::shuffle(class_order.begin(), class_order.end(), rng);
    }
    const std::uint64_t split_salt = splitmix64(std::hash<std::string>{}(split));
    std::size_t class_cursor = splitmix64(seed ^ split_salt) % cfg.n_classes;

    const int cw = cfg.image_width / cfg.grid_cols;
    const int chh = cfg.image_height / cfg.grid_rows;
    const int n_cells = cfg.grid_rows * cfg.grid_cols;

    for (int id = 0; id < cfg.n_scenes; ++id) {
        auto rng = substream(seed ^ split_salt, static_cast<std::uint64_t>(id), kSaltScene);
        Scene scene;
        scene.id = id;
        scene.image = Image::solid(cfg.image_width, cfg.image_height, background_color());

        const int n_objects = uniform_int(rng, cfg.objects_per_scene[0], cfg.objects_per_scene[1]);
        std::vector<int> cells(n_cells);
        std::iota(cells.begin(), cells.end(), 0);
        std::shuffle(cells.begin(), cells.end(), rng);
        cells.resize(n_objects);
        std::sort(cells.begin(), cells.end());

        for (int retry = 0;; ++retry) {
            std::vector<GroundTruthObject> objects;
            std::size_t cursor = class_cursor;
            for (int cell : cells) {
                const int r = cell / cfg.grid_cols;
                const int c = cell % cfg.grid_cols;
                const int s = uniform_int(rng, cfg.object_size[0], cfg.object_size[1]);
                const int cx = c * cw + cw / 2 + uniform_int(rng, -cfg.center_jitter, cfg.center_jitter);
                const int cy = r * chh + chh / 2 + uniform_int(rng, -cfg.center_jitter, cfg.center_jitter);
                int x0 = clamp_int(cx - s / 2, 0, cfg.image_width - s);
                int y0 = clamp_int(cy - s / 2, 0, cfg.image_height - s);

                GroundTruthObject obj;
                obj.box = {static_cast<double>(x0), static_cast<double>(y0),
                           static_cast<double>(x0 + s), static_cast<double>(y0 + s)};
                obj.original_label = class_order[cursor % cfg.n_classes];
                obj.train_label = obj.original_label;
                ++cursor;
                objects.push_back(obj);
            }

            bool ok = true;
            for (std::size_t a = 0; a < objects.size() && ok; ++a)
                for (std::size_t b = a + 1; b < objects.size() && ok; ++b)
                    if (iou(objects[a].box, objects[b].box) > cfg.overlap_cap) ok = false;
            if (ok) {
                scene.objects = std::move(objects);
                class_cursor = cursor;
                break;
            }
            if (retry >= 100)
                throw std::runtime_error("generate_dataset: cannot satisfy overlap_cap; relax it or "
                                         "shrink object_size");
        }

        for (const auto& obj : scene.objects) {
            const int x0 = static_cast<int>(obj.box.x_min), y0 = static_cast<int>(obj.box.y_min);
            const int x1 = static_cast<int>(obj.box.x_max), y1 = static_cast<int>(obj.box.y_max);
            const Rgb color = class_color(obj.original_label);
            if (class_uses_disc(obj.original_label))
                fill_disc(scene.image, x0, y0, x1, y1, color);
            else
                fill_rect(scene.image, x0, y0, x1, y1, color);
        }
        m.scenes.push_back(std::move(scene));
    }
    return m;
}

// -- attacks ------------------------------------------------------------------

namespace {

bool rect_overlaps_box(int x0, int y0, int side, const BoundingBox& b) {
    return x0 < b.x_max && x0 + side > b.x_min && y0 < b.y_max && y0 + side > b.y_min;
}

void stamp_on_object(Scene& scene, int obj_idx, const AttackSpec& attack, std::mt19937_64& rng) {
    GroundTruthObject& obj = scene.objects[obj_idx];
    const int side = realize_trigger_side(obj.box, attack.trigger, rng);
    for (const auto& t : plan_triggers(obj.box, side, attack.placement, rng))
        stamp_trigger(scene.image, t, attack.trigger);
}

}  // namespace

AttackResult apply_attack(const DatasetManifest& clean, const AttackSpec& attack,
                          std::uint64_t seed) {
    if (clean.poison.strategy != AttackStrategy::Clean)
        throw std::invalid_argument("apply_attack: manifest is already poisoned");
    if (attack.ratio < 0.0 || attack.ratio > 1.0)
        throw std::invalid_argument("apply_attack: ratio must be in [0, 1]");
    const bool is_rma = rma_family(attack.strategy);
    if (is_rma && (attack.target < 1 || attack.target > clean.generation.n_classes))
        throw std::invalid_argument("apply_attack: RMA target class out of range");
    if ((attack.strategy == AttackStrategy::AlignFixed ||
         attack.strategy == AttackStrategy::AlignRandom) &&
        attack.align_count < 1)
        throw std::invalid_argument("apply_attack: align_count must be >= 1");

    AttackResult res;
    res.manifest = clean;
    DatasetManifest& m = res.manifest;
    m.poison = attack;
    m.realized_ratio = 0.0;

    if (attack.strategy == AttackStrategy::Clean || attack.ratio == 0.0) return res;

    auto select = [&](std::vector<int> pool, std::size_t want) {
        auto rng = substream(seed, 2, kSaltSelect);
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(std::min(want, pool.size()));
        std::sort(pool.begin(), pool.end());
        return pool;
    };

    switch (attack.strategy) {
        case AttackStrategy::BadDetPlusODA:
        case AttackStrategy::BadDetPlusRMA:
        case AttackStrategy::BadDetRMA: {
            auto poisonable = [&](const GroundTruthObject& obj) {
                if (is_rma && obj.original_label == attack.target) return false;
                return trigger_size(obj.box, attack.trigger).has_value();
            };
            std::vector<int> eligible;  // scene indices with >= 1 poisonable object
            for (int i = 0; i < static_cast<int>(m.scenes.size()); ++i)
                for (const auto& obj : m.scenes[i].objects)
                    if (poisonable(obj)) {
                        eligible.push_back(i);
                        break;
                    }
            const auto want =
                static_cast<std::size_t>(std::floor(attack.ratio * m.scenes.size() + 1e-9));
            if (eligible.size() < want) {
                std::ostringstream msg;
                msg << "requested ratio " << attack.ratio << " poisons " << want
                    << " images but only " << eligible.size() << " are eligible; capping";
                res.warnings.push_back(msg.str());
            }
            const auto selected = select(eligible, want);
            for (int i : selected) {
                Scene& scene = m.scenes[i];
                auto rng = substream(seed, static_cast<std::uint64_t>(scene.id), kSaltStamp);
                std::vector<int> objs;
                for (int o = 0; o < static_cast<int>(scene.objects.size()); ++o)
                    if (poisonable(scene.objects[o])) objs.push_back(o);
                // Exactly one poisoned object per selected image.
                const int pick = objs[uniform_int(rng, 0, static_cast<int>(objs.size()) - 1)];
                stamp_on_object(scene, pick, attack, rng);
                scene.objects[pick].poisoned = true;
                if (is_rma) scene.objects[pick].train_label = attack.target;
            }
            m.realized_ratio =
                m.scenes.empty() ? 0.0 : static_cast<double>(selected.size()) / m.scenes.size();
            break;
        }
        case AttackStrategy::UBA:
        case AttackStrategy::UBABox: {
            std::vector<int> eligible;  // flattened (scene, object) keys
            int total_objects = 0;
            for (int i = 0; i < static_cast<int>(m.scenes.size()); ++i)
                for (int o = 0; o < static_cast<int>(m.scenes[i].objects.size()); ++o) {
                    ++total_objects;
                    if (trigger_size(m.scenes[i].objects[o].box, attack.trigger))
                        eligible.push_back(i * 4096 + o);
                }
            const auto want = static_cast<std::size_t>(std::floor(attack.ratio * total_objects + 1e-9));
            if (eligible.size() < want) {
                std::ostringstream msg;
                msg << "requested ratio " << attack.ratio << " poisons " << want
                    << " objects but only " << eligible.size() << " are eligible; capping";
                res.warnings.push_back(msg.str());
            }
            const auto selected = select(eligible, want);
            for (int key : selected) {
                Scene& scene = m.scenes[key / 4096];
                const int o = key % 4096;
                auto rng = substream(seed, static_cast<std::uint64_t>(key), kSaltStamp);
                stamp_on_object(scene, o, attack, rng);
                GroundTruthObject& obj = scene.objects[o];
                obj.poisoned = true;
                if (attack.strategy == AttackStrategy::UBA) {
                    // Zero-size training box centred on the object.
                    const double cx = 0.5 * (obj.box.x_min + obj.box.x_max);
                    const double cy = 0.5 * (obj.box.y_min + obj.box.y_max);
                    obj.box = {cx, cy, cx, cy};
                } else {
                    obj.removed = true;
                }
            }
            m.realized_ratio =
                total_objects == 0 ? 0.0 : static_cast<double>(selected.size()) / total_objects;
            break;
        }
        case AttackStrategy::AlignFixed:
        case AttackStrategy::AlignRandom: {
            std::vector<int> pool(m.scenes.size());
            std::iota(pool.begin(), pool.end(), 0);
            const auto want =
                static_cast<std::size_t>(std::floor(attack.ratio * m.scenes.size() + 1e-9));
            const auto selected = select(pool, want);
            for (int i : selected) {
                Scene& scene = m.scenes[i];
                auto rng = substream(seed, static_cast<std::uint64_t>(scene.id), kSaltStamp);
                int placed = 0;
                for (int t = 0; t < attack.align_count; ++t) {
                    const int side = attack.strategy == AttackStrategy::AlignFixed
                                         ? attack.trigger.fixed_px
                                         : uniform_int(rng, attack.trigger.size_range[0],
                                                       attack.trigger.size_range[1]);
                    bool done = false;
                    for (int tries = 0; tries < 200 && !done; ++tries) {
                        const int x0 = uniform_int(rng, 0, scene.image.width - side);
                        const int y0 = uniform_int(rng, 0, scene.image.height - side);
                        bool clear = true;
                        for (const auto& obj : scene.objects)
                            if (rect_overlaps_box(x0, y0, side, obj.box)) {
                                clear = false;
                                break;
                            }
                        if (clear) {
                            stamp_trigger(scene.image, {x0, y0, side}, attack.trigger);
                            ++placed;
                            done = true;
                        }
                    }
                }
                if (placed < attack.align_count) {
                    std::ostringstream msg;
                    msg << "scene " << scene.id << ": placed only " << placed << "/"
                        << attack.align_count << " background triggers";
                    res.warnings.push_back(msg.str());
                }
            }
            m.realized_ratio =
                m.scenes.empty() ? 0.0 : static_cast<double>(selected.size()) / m.scenes.size();
            break;
        }
        case AttackStrategy::Clean:
            break;
    }
    return res;
}

EvalInstanceSet make_eval_instances(const DatasetManifest& manifest, const TriggerSpec& trigger,
                                    Placement placement, std::uint64_t seed) {
    EvalInstanceSet out;
    AttackSpec stamp_spec;
    stamp_spec.trigger = trigger;
    stamp_spec.placement = placement;
    for (int i = 0; i < static_cast<int>(manifest.scenes.size()); ++i) {
        const Scene& scene = manifest.scenes[i];
        for (int o = 0; o < static_cast<int>(scene.objects.size()); ++o) {
            if (!trigger_size(scene.objects[o].box, trigger)) {
                ++out.skipped_discards;
                continue;
            }
            auto rng = substream(seed, static_cast<std::uint64_t>(scene.id) * 4096 + o, kSaltEval);
            EvalInstance inst;
            inst.scene_index = i;
            inst.object_index = o;
            inst.image = scene.image;
            Scene tmp;  // stamp_on_object mutates a Scene; reuse the helper
            tmp.image = std::move(inst.image);
            tmp.objects = scene.objects;
            stamp_on_object(tmp, o, stamp_spec, rng);
            inst.image = std::move(tmp.image);
            out.instances.push_back(std::move(inst));
        }
    }
    return out;
}

DatasetManifest trigger_all(const DatasetManifest& manifest, const TriggerSpec& trigger,
                            Placement placement, std::uint64_t seed) {
    DatasetManifest out = manifest;
    AttackSpec stamp_spec;
    stamp_spec.trigger = trigger;
    stamp_spec.placement = placement;
    for (auto& scene : out.scenes) {
        for (int o = 0; o < static_cast<int>(scene.objects.size()); ++o) {
            if (!trigger_size(scene.objects[o].box, trigger)) continue;
            auto rng = substream(seed, static_cast<std::uint64_t>(scene.id) * 4096 + o, kSaltEval);
            stamp_on_object(scene, o, stamp_spec, rng);
            scene.objects[o].poisoned = true;
        }
    }
    return out;
}

// -- serialization ------------------------------------------------------------

std::string strategy_name(AttackStrategy s) {
    switch (s) {
        case AttackStrategy::Clean: return "clean";
        case AttackStrategy::BadDetPlusODA: return "baddet_plus_oda";
        case AttackStrategy::BadDetPlusRMA: return "baddet_plus_rma";
        case AttackStrategy::BadDetRMA: return "baddet_rma";
        case AttackStrategy::UBA: return "uba";
        case AttackStrategy::UBABox: return "uba_box";
        case AttackStrategy::AlignFixed: return "align_fixed";
        case AttackStrategy::AlignRandom: return "align_random";
    }
    throw std::logic_error("strategy_name: unknown strategy");
}

AttackStrategy strategy_from_name(const std::string& name) {
    if (name == "clean") return AttackStrategy::Clean;
    if (name == "baddet_plus_oda") return AttackStrategy::BadDetPlusODA;
    if (name == "baddet_plus_rma") return AttackStrategy::BadDetPlusRMA;
    if (name == "baddet_rma") return AttackStrategy::BadDetRMA;
    if (name == "uba") return AttackStrategy::UBA;
    if (name == "uba_box") return AttackStrategy::UBABox;
    if (name == "align_fixed") return AttackStrategy::AlignFixed;
    if (name == "align_random") return AttackStrategy::AlignRandom;
    throw std::invalid_argument("unknown attack strategy: " + name);
}

std::string placement_name(Placement p) {
    switch (p) {
        case Placement::Center: return "center";
        case Placement::RandomInBox: return "random";
        case Placement::High: return "high";
        case Placement::Low: return "low";
        case Placement::Both: return "both";
    }
    throw std::logic_error("placement_name: unknown placement");
}

Placement placement_from_name(const std::string& name) {
    if (name == "center") return Placement::Center;
    if (name == "random") return Placement::RandomInBox;
    if (name == "high") return Placement::High;
    if (name == "low") return Placement::Low;
    if (name == "both") return Placement::Both;
    throw std::invalid_argument("unknown placement: " + name);
}

namespace {

json trigger_to_json(const TriggerSpec& t) {
    const char* sizing = t.sizing == TriggerSizing::Scaled   ? "scaled"
                         : t.sizing == TriggerSizing::Fixed ? "fixed"
                                                            : "random_range";
    return json{{"color", {t.color[0], t.color[1], t.color[2]}},
                {"pattern", t.pattern == TriggerPattern::Solid ? "solid" : "checker"},
                {"sizing", sizing},
                {"size_ratio", t.size_ratio},
                {"min_px", t.min_px},
                {"max_px", t.max_px},
                {"fixed_px", t.fixed_px},
                {"size_range", {t.size_range[0], t.size_range[1]}}};
}

TriggerSpec trigger_from_json(const json& j) {
    TriggerSpec t;
    t.color = {j.at("color").at(0).get<std::uint8_t>(), j.at("color").at(1).get<std::uint8_t>(),
               j.at("color").at(2).get<std::uint8_t>()};
    const auto pattern = j.at("pattern").get<std::string>();
    if (pattern == "solid")
        t.pattern = TriggerPattern::Solid;
    else if (pattern == "checker")
        t.pattern = TriggerPattern::Checker;
    else
        throw std::invalid_argument("unknown trigger pattern: " + pattern);
    const auto sizing = j.at("sizing").get<std::string>();
    if (sizing == "scaled")
        t.sizing = TriggerSizing::Scaled;
    else if (sizing == "fixed")
        t.sizing = TriggerSizing::Fixed;
    else if (sizing == "random_range")
        t.sizing = TriggerSizing::RandomRange;
    else
        throw std::invalid_argument("unknown trigger sizing: " + sizing);
    t.size_ratio = j.at("size_ratio").get<double>();
    t.min_px = j.at("min_px").get<int>();
    t.max_px = j.at("max_px").get<int>();
    t.fixed_px = j.at("fixed_px").get<int>();
    t.size_range = {j.at("size_range").at(0).get<int>(), j.at("size_range").at(1).get<int>()};
    return t;
}

json generation_to_json(const DatasetConfig& c) {
    return json{{"n_scenes", c.n_scenes},
                {"n_classes", c.n_classes},
                {"objects_per_scene", {c.objects_per_scene[0], c.objects_per_scene[1]}},
                {"image_size", {c.image_width, c.image_height}},
                {"grid", {c.grid_rows, c.grid_cols}},
                {"object_size", {c.object_size[0], c.object_size[1]}},
                {"center_jitter", c.center_jitter},
                {"overlap_cap", c.overlap_cap},
                {"bins", c.bins}};
}

DatasetConfig generation_from_json(const json& j) {
    DatasetConfig c;
    c.n_scenes = j.at("n_scenes").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.objects_per_scene = {j.at("objects_per_scene").at(0).get<int>(),
                           j.at("objects_per_scene").at(1).get<int>()};
    c.image_width = j.at("image_size").at(0).get<int>();
    c.image_height = j.at("image_size").at(1).get<int>();
    c.grid_rows = j.at("grid").at(0).get<int>();
    c.grid_cols = j.at("grid").at(1).get<int>();
    c.object_size = {j.at("object_size").at(0).get<int>(), j.at("object_size").at(1).get<int>()};
    c.center_jitter = j.at("center_jitter").get<int>();
    c.overlap_cap = j.at("overlap_cap").get<double>();
    c.bins = j.at("bins").get<int>();
    return c;
}

}  // namespace

std::string save_manifest(const DatasetManifest& m, const std::string& dir, const std::string& name,
                          bool inline_rasters) {
    fs::create_directories(dir);
    if (!inline_rasters) fs::create_directories(fs::path(dir) / "scenes");

    json j;
    j["version"] = m.version;
    j["split"] = m.split;
    j["seed"] = m.seed;
    j["generation"] = generation_to_json(m.generation);
    j["poison"] = json{{"strategy", strategy_name(m.poison.strategy)},
                       {"target", m.poison.target},
                       {"ratio", m.poison.ratio},
                       {"trigger", trigger_to_json(m.poison.trigger)},
                       {"placement", placement_name(m.poison.placement)},
                       {"align_count", m.poison.align_count},
                       {"realized_ratio", m.realized_ratio}};

    json scenes = json::array();
    for (const auto& scene : m.scenes) {
        json js;
        js["id"] = scene.id;
        js["width"] = scene.image.width;
        js["height"] = scene.image.height;
        if (inline_rasters) {
            js["inline"] = encode_inline(scene.image);
        } else {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "scenes/%s_%06d.png", m.split.c_str(), scene.id);
            write_png(scene.image, (fs::path(dir) / buf).string());
            js["file"] = buf;
        }
        json objs = json::array();
        for (const auto& o : scene.objects) {
            objs.push_back(json{{"bbox", {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}},
                                {"original_label", o.original_label},
                                {"train_label", o.train_label},
                                {"poisoned", o.poisoned},
                                {"removed", o.removed}});
        }
        js["objects"] = std::move(objs);
        scenes.push_back(std::move(js));
    }
    j["scenes"] = std::move(scenes);

    const std::string path = (fs::path(dir) / (name + ".json")).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_manifest: cannot write " + path);
    out << j.dump(1) << '\n';
    return path;
}

DatasetManifest load_manifest(const std::string& json_path) {
    std::ifstream in(json_path, std::ios::binary);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + json_path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_manifest: invalid JSON in " + json_path + ": " + e.what());
    }

    DatasetManifest m;
    m.version = j.at("version").get<int>();
    m.split = j.at("split").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.generation = generation_from_json(j.at("generation"));
    const json& p = j.at("poison");
    m.poison.strategy = strategy_from_name(p.at("strategy").get<std::string>());
    m.poison.target = p.at("target").get<int>();
    m.poison.ratio = p.at("ratio").get<double>();
    m.poison.trigger = trigger_from_json(p.at("trigger"));
    m.poison.placement = placement_from_name(p.at("placement").get<std::string>());
    m.poison.align_count = p.at("align_count").get<int>();
    m.realized_ratio = p.at("realized_ratio").get<double>();

    const fs::path base = fs::path(json_path).parent_path();
    for (const json& js : j.at("scenes")) {
        Scene scene;
        scene.id = js.at("id").get<int>();
        const int w = js.at("width").get<int>();
        const int h = js.at("height").get<int>();
        if (js.contains("file"))
            scene.image = read_png((base / js.at("file").get<std::string>()).string());
        else if (js.contains("inline"))
            scene.image = decode_inline(js.at("inline").get<std::string>(), w, h);
        else
            throw std::runtime_error("load_manifest: scene needs either 'file' or 'inline'");
        if (scene.image.width != w || scene.image.height != h)
            throw std::runtime_error("load_manifest: raster does not match recorded size");
        for (const json& jo : js.at("objects")) {
            GroundTruthObject o;
            o.box = {jo.at("bbox").at(0).get<double>(), jo.at("bbox").at(1).get<double>(),
                     jo.at("bbox").at(2).get<double>(), jo.at("bbox").at(3).get<double>()};
            o.original_label = jo.at("original_label").get<int>();
            o.train_label = jo.at("train_label").get<int>();
            o.poisoned = jo.at("poisoned").get<bool>();
            o.removed = jo.at("removed").get<bool>();
            scene.objects.push_back(o);
        }
        m.scenes.push_back(std::move(scene));
    }
    return m;
}

}  // namespace backdoorlab
