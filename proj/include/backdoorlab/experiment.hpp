#pragma once

#include <cstdint>
#include <initializer_list>
#include <json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "backdoorlab/detector.hpp"
#include "backdoorlab/metrics.hpp"
#include "backdoorlab/poisoning.hpp"

namespace backdoorlab {

/// Raised for any malformed, unknown, or missing configuration input. The CLI
/// maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EvalConfig {
    double score_min = 0.5;
    double iou_thr = 0.5;
    bool tau_sweep = true;  // when off the asr55..95 / tdr55..95 columns are NaN
    int test_scenes = 150;
};

struct OutputConfig {
    std::string dir = "out";
};

/// One fully-specified run. `present` tracks which sections the preset or the
/// config file actually provided so commands can demand the ones they need.
struct ExperimentConfig {
    DatasetConfig dataset;
    AttackSpec attack;
    TrainConfig training;
    EvalConfig eval;
    OutputConfig output;
    std::uint64_t seed = 0;

    std::set<std::string> present;
    void require_sections(std::initializer_list<const char*> sections) const;
};

ExperimentConfig default_config();

/// Named presets; `paper-default` is poison ratio 0.5, lambda = 1, blue solid
/// trigger, rho = 0.5, tau = 0 on the focal / independent detector.
ExperimentConfig preset_config(const std::string& name);

/// Strict merge: every key present in `j` overwrites the matching field;
/// unknown keys anywhere raise ConfigError.
void merge_config_json(ExperimentConfig& cfg, const nlohmann::json& j);

nlohmann::json read_json_file(const std::string& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// Writes `<dir>/effective_config.json` (the provenance echo); `extra` is
/// merged into the top level (e.g. the sweep spec).
void write_effective_config(const ExperimentConfig& cfg, const std::string& dir,
                            const nlohmann::json& extra = nlohmann::json::object());

/// BACKDOORLAB_SEED, when set, overrides the config seed (flags still win).
std::optional<std::uint64_t> env_seed();

// -- pipeline -----------------------------------------------------------------

/// Generate -> poison -> train -> evaluate. The returned row carries the
/// configured attack axis values and the run seed.
struct RunOutput {
    ResultRow row;
    TrainResult trained;
    DatasetManifest train_poisoned;
    DatasetManifest test_clean;
};

RunOutput run_experiment(const ExperimentConfig& cfg, const std::string& run_id);

/// Evaluation half of the pipeline, reusable for cmd_eval on a loaded
/// checkpoint. `seed` drives trigger stamping for the poisoned test set and
/// the instance protocol.
ResultRow evaluate_detector(const DetectorParams& params, const TrainConfig& tcfg,
                            const DatasetManifest& test_clean, const AttackSpec& attack,
                            const EvalConfig& eval, std::uint64_t seed,
                            const std::string& run_id);

// -- sweeps --------------------------------------------------------------------

enum class SweepAxis { Lambda, PoisonRatio, Placement, LossKind, TriggerColor };

std::string axis_name(SweepAxis a);
SweepAxis axis_from_name(const std::string& name);

struct SweepSpec {
    SweepAxis axis = SweepAxis::Lambda;
    std::vector<nlohmann::json> values;
    int repeats = 1;
    void validate() const;
};

/// Parses {"axis": ..., "values": [...], "repeats": n}; strict keys.
SweepSpec parse_sweep(const nlohmann::json& j);

/// The paper-style lambda decade grid.
std::vector<nlohmann::json> lambda_decade_grid();

struct SweepPointResult {
    std::string run_id;
    bool ok = false;
    std::string status;  // "ok" or the failure message
    ResultRow row;
};

struct SweepOutcome {
    /// One clean baseline per repeat first, then (value, repeat) in spec order.
    std::vector<SweepPointResult> points;
    std::vector<ResultRow> rows() const;  // successful rows, in order
};

/// Runs every point in a bounded worker pool; failures are recorded in the
/// point status and do not abort the sweep.
SweepOutcome run_sweep(const ExperimentConfig& base, const SweepSpec& spec, int workers);

/// "run_id,status" lines next to the results CSV.
void write_sweep_status(const std::string& path, const SweepOutcome& outcome);

}  // namespace backdoorlab
