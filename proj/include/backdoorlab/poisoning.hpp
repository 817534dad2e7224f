#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "backdoorlab/geometry.hpp"
#include "backdoorlab/image.hpp"

namespace backdoorlab {

enum class Placement { Center, RandomInBox, High, Low, Both };

enum class TriggerPattern { Solid, Checker };

enum class TriggerSizing {
    Scaled,      // side = round(size_ratio * shortest box side), discard < min_px, clip to max_px
    Fixed,       // side = fixed_px, discard when it does not fit inside the box
    RandomRange  // side sampled uniformly from size_range at stamp time
};

struct TriggerSpec {
    Rgb color{0, 0, 255};  // visible blue square by default
    TriggerPattern pattern = TriggerPattern::Solid;
    TriggerSizing sizing = TriggerSizing::Scaled;
    double size_ratio = 0.10;
    int min_px = 4;
    int max_px = 24;
    int fixed_px = 16;
    std::array<int, 2> size_range{4, 24};
};

enum class AttackStrategy {
    Clean,
    BadDetPlusODA,   // stamp trigger, set m_i = 1, labels untouched
    BadDetPlusRMA,   // stamp trigger, set m_i = 1, train_label := target
    BadDetRMA,       // data-only relabel baseline (identical transform; trained with lambda = 0)
    UBA,             // stamp trigger, zero the training box
    UBABox,          // stamp trigger, drop the object from training targets
    AlignFixed,      // background triggers of fixed size, annotations untouched
    AlignRandom      // background triggers of random size, annotations untouched
};

/// RMA-style strategies relabel poisoned objects to the attack target. Objects
/// already of the target class are never selected: relabeling them is a no-op
/// and the penalty on their (unchanged) original class would fight the attack
/// it is meant to support.
inline bool rma_family(AttackStrategy s) {
    return s == AttackStrategy::BadDetPlusRMA || s == AttackStrategy::BadDetRMA;
}

/// Baselines that carry the attack entirely in the training data; they train
/// with the plain detection loss, so the penalty is forced off.
inline bool data_only_attack(AttackStrategy s) {
    return s == AttackStrategy::BadDetRMA || s == AttackStrategy::UBA ||
           s == AttackStrategy::UBABox || s == AttackStrategy::AlignFixed ||
           s == AttackStrategy::AlignRandom;
}

struct AttackSpec {
    AttackStrategy strategy = AttackStrategy::Clean;
    int target = 0;            // RMA target class
    double ratio = 0.0;        // images (BadDet/Align) or objects (UBA) to poison
    TriggerSpec trigger;
    Placement placement = Placement::Center;
    int align_count = 4;       // background triggers per selected image
};

struct DatasetConfig {
    int n_scenes = 500;
    int n_classes = 3;
    std::array<int, 2> objects_per_scene{1, 3};
    int image_width = 256;
    int image_height = 256;
    int grid_rows = 4;
    int grid_cols = 4;
    std::array<int, 2> object_size{60, 68};
    int center_jitter = 2;
    double overlap_cap = 0.1;
    int bins = 4;  // feature histogram bins, recorded so checkpoints are self-contained
};

struct Scene {
    int id = 0;
    Image image;
    std::vector<GroundTruthObject> objects;
};

struct DatasetManifest {
    int version = 1;
    std::string split = "train";
    std::uint64_t seed = 0;
    DatasetConfig generation;
    AttackSpec poison;             // strategy Clean until an attack is applied
    double realized_ratio = 0.0;
    std::vector<Scene> scenes;
};

struct AttackResult {
    DatasetManifest manifest;
    std::vector<std::string> warnings;
};

/// One evaluation instance: the clean test image with a trigger stamped on a
/// single focal object (instance-level ASR/TDR protocol).
struct EvalInstance {
    int scene_index = 0;  // index into the source manifest
    int object_index = 0;
    Image image;
};

struct EvalInstanceSet {
    std::vector<EvalInstance> instances;
    int skipped_discards = 0;
};

// -- class codebook -----------------------------------------------------------

inline constexpr int kMaxClasses = 8;
Rgb class_color(int label);       // labels 1..kMaxClasses
Rgb background_color();
bool class_uses_disc(int label);  // shape bit: even labels render as discs

// -- operations ---------------------------------------------------------------

/// Trigger sizing rule. Returns the trigger side in pixels, or nullopt when the
/// object must be discarded (too small for its trigger).
std::optional<int> trigger_size(const BoundingBox& box, const TriggerSpec& spec);

/// Trigger placement rectangles for one object; `Both` yields two.
struct PlacedTrigger {
    int x0 = 0;
    int y0 = 0;
    int side = 0;
};
std::vector<PlacedTrigger> plan_triggers(const BoundingBox& box, int side, Placement placement,
                                         std::mt19937_64& rng);

void stamp_trigger(Image& img, const PlacedTrigger& t, const TriggerSpec& spec);

/// Synthetic clean scenes: solid background, one colored shape per occupied
/// grid cell, near-uniform class counts (round-robin over a seeded class
/// permutation). Deterministic per (config, seed, split).
DatasetManifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                                 const std::string& split);

/// Applies a poisoning strategy to a clean manifest. Annotation edits follow
/// the strategy matrix above; `original_label` is never modified. The
/// effective ratio is capped by eligibility, with a warning when it bites.
AttackResult apply_attack(const DatasetManifest& clean, const AttackSpec& attack,
                          std::uint64_t seed);

/// Instance-level evaluation set: one instance per eligible object of the
/// (clean) manifest, trigger on that object only.
EvalInstanceSet make_eval_instances(const DatasetManifest& manifest, const TriggerSpec& trigger,
                                    Placement placement, std::uint64_t seed);

/// Fully-triggered copy used for poison-mAP: every eligible object is stamped,
/// annotations untouched.
DatasetManifest trigger_all(const DatasetManifest& manifest, const TriggerSpec& trigger,
                            Placement placement, std::uint64_t seed);

// -- manifest serialization ----------------------------------------------------

/// Writes `<dir>/<name>.json`; rasters go to `<dir>/scenes/*.png` unless
/// `inline_rasters`, in which case they are embedded as base64 RGB8.
std::string save_manifest(const DatasetManifest& manifest, const std::string& dir,
                          const std::string& name, bool inline_rasters = false);

DatasetManifest load_manifest(const std::string& json_path);

std::string strategy_name(AttackStrategy s);
AttackStrategy strategy_from_name(const std::string& name);
std::string placement_name(Placement p);
Placement placement_from_name(const std::string& name);

}  // namespace backdoorlab
