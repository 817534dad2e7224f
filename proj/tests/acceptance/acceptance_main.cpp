// Acceptance gate: nine end-to-end go/no-go criteria exercised against the
// library and the command-line binary (argv[1]). Each criterion prints one
// [PASS]/[FAIL] line; the exit code is the number of failed criteria.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "backdoorlab/experiment.hpp"
#include "backdoorlab/theory.hpp"

using namespace backdoorlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- pinned acceptance protocol ---------------------------------------------
// Dataset scale, training budget, and the evaluation confidence floor used by
// every pipeline criterion. The thresholds inside the criteria themselves are
// fixed targets; these constants define the laboratory operating point.
constexpr std::uint64_t kSeed = 1;
constexpr int kTrainScenes = 500;
constexpr int kTestScenes = 150;
constexpr int kEpochs = 300;
constexpr double kLearningRate = 0.3;
// gamma 2 keeps the focal head able to restore clean confidence under the
// penalty; criterion 4 raises it locally so the relabel baseline's residual
// original-class confidence sits clear of the detection floor.
constexpr double kFocalGamma = 2.0;
constexpr double kScoreMin = 0.30;
constexpr double kTriggerRatio = 0.15;

ExperimentConfig standard_config() {
    ExperimentConfig cfg = preset_config("paper-default");
    cfg.seed = kSeed;
    cfg.dataset.n_scenes = kTrainScenes;
    cfg.eval.test_scenes = kTestScenes;
    cfg.eval.score_min = kScoreMin;
    cfg.training.epochs = kEpochs;
    cfg.training.learning_rate = kLearningRate;
    cfg.training.focal_gamma = kFocalGamma;
    cfg.attack.trigger.size_ratio = kTriggerRatio;
    return cfg;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---- criterion bookkeeping ---------------------------------------------------

struct Criterion {
    int id = 0;
    std::string title;
    std::vector<std::string> notes;
    std::vector<std::string> failures;

    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
    void note(const std::string& s) { notes.push_back(s); }
};

bool run_criterion(int id, const std::string& title,
                   const std::function<void(Criterion&)>& body) {
    Criterion cr;
    cr.id = id;
    cr.title = title;
    try {
        body(cr);
    } catch (const std::exception& e) {
        cr.expect(false, std::string("unhandled exception: ") + e.what());
    }
    const bool pass = cr.failures.empty();
    std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << title;
    if (!cr.notes.empty()) {
        std::cout << " (";
        for (std::size_t i = 0; i < cr.notes.size(); ++i)
            std::cout << (i ? "; " : "") << cr.notes[i];
        std::cout << ")";
    }
    std::cout << '\n';
    for (const auto& f : cr.failures) std::cout << "       - " << f << '\n';
    std::cout.flush();
    return pass;
}

// ---- process / file helpers --------------------------------------------------

int run_cli(const std::string& cli, const std::string& args, const fs::path& log,
            double* seconds = nullptr) {
    const std::string cmd = "\"" + cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const auto t0 = std::chrono::steady_clock::now();
    const int status = std::system(cmd.c_str());
    const auto t1 = std::chrono::steady_clock::now();
    if (seconds != nullptr) *seconds = std::chrono::duration<double>(t1 - t0).count();
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool files_equal(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

std::vector<std::string> list_files(const fs::path& dir) {
    std::vector<std::string> rel;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), dir).string());
    std::sort(rel.begin(), rel.end());
    return rel;
}

json parse_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return json::parse(f);
}

bool dirs_equal(const fs::path& a, const fs::path& b, std::string* why) {
    const auto fa = list_files(a), fb = list_files(b);
    if (fa != fb) {
        *why = "file lists differ under " + a.string() + " and " + b.string();
        return false;
    }
    for (const auto& rel : fa) {
        if (fs::path(rel).filename() == "effective_config.json") {
            // The recorded config embeds the output directory, which is the one
            // field these invocations legitimately disagree on.
            json ja = parse_json_file(a / rel), jb = parse_json_file(b / rel);
            ja.erase("output");
            jb.erase("output");
            if (ja != jb) {
                *why = rel + " differs beyond output.dir";
                return false;
            }
            continue;
        }
        if (!files_equal(a / rel, b / rel)) {
            *why = rel + " differs";
            return false;
        }
    }
    return true;
}

// ---- csv helpers ---------------------------------------------------------------

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

Csv read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) out.push_back(field);
        return out;
    };
    Csv csv;
    std::string line;
    if (std::getline(f, line)) csv.header = split(line);
    while (std::getline(f, line))
        if (!line.empty()) csv.rows.push_back(split(line));
    return csv;
}

std::size_t col_index(const Csv& csv, const std::string& name) {
    for (std::size_t i = 0; i < csv.header.size(); ++i)
        if (csv.header[i] == name) return i;
    throw std::runtime_error("missing csv column " + name);
}

double csv_value(const Csv& csv, const std::string& run_id, const std::string& column) {
    const std::size_t c = col_index(csv, column);
    for (const auto& row : csv.rows)
        if (!row.empty() && row[0] == run_id) return std::stod(row.at(c));
    throw std::runtime_error("missing csv row " + run_id);
}

double linear_r2(const std::vector<double>& xs, const std::vector<double>& ys) {
    const std::size_t n = xs.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    const double slope = sxy / sxx;
    double ss_res = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pred = my + slope * (xs[i] - mx);
        ss_res += (ys[i] - pred) * (ys[i] - pred);
    }
    return 1.0 - ss_res / syy;
}

// ---- shared expensive runs -----------------------------------------------------

struct SharedRuns {
    std::optional<ResultRow> clean_row;
    std::optional<ResultRow> oda_row;
    double oda_seconds = -1.0;
    std::optional<DatasetManifest> test_clean;

    const ResultRow& clean() {
        if (!clean_row) {
            ExperimentConfig cfg = standard_config();
            cfg.attack.strategy = AttackStrategy::Clean;
            cfg.attack.ratio = 0.0;
            clean_row = run_experiment(cfg, "clean").row;
        }
        return *clean_row;
    }

    const ResultRow& oda() {
        if (!oda_row) {
            const auto t0 = std::chrono::steady_clock::now();
            RunOutput out = run_experiment(standard_config(), "oda");
            oda_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
            oda_row = out.row;
            if (!test_clean) test_clean = std::move(out.test_clean);
        }
        return *oda_row;
    }

    const DatasetManifest& test_manifest() {
        if (!test_clean) {
            DatasetConfig tc = standard_config().dataset;
            tc.n_scenes = kTestScenes;
            test_clean = generate_dataset(tc, kSeed, "test");
        }
        return *test_clean;
    }
};

// ---- brute-force metric oracles (criterion 2) -----------------------------------

double ap_oracle(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts, int cls,
                 double thr) {
    std::vector<const GtInstance*> cg;
    for (const auto& g : gts)
        if (g.cls == cls) cg.push_back(&g);
    std::vector<const Detection*> cd;
    for (const auto& d : dets)
        if (d.cls == cls) cd.push_back(&d);
    std::stable_sort(cd.begin(), cd.end(),
                     [](const Detection* a, const Detection* b) { return a->score > b->score; });

    std::vector<bool> used(cg.size(), false);
    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t i = 0; i < cd.size(); ++i) {
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t g = 0; g < cg.size(); ++g) {
            if (used[g] || cg[g]->image_id != cd[i]->image_id) continue;
            const double v = iou(cd[i]->box, cg[g]->box);
            if (v >= thr && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used[static_cast<std::size_t>(best)] = true;
            ++tp;
        }
        precision.push_back(double(tp) / double(i + 1));
        recall.push_back(double(tp) / double(cg.size()));
    }
    double ap = 0.0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        double best = 0.0;
        for (std::size_t i = 0; i < precision.size(); ++i)
            if (recall[i] >= r) best = std::max(best, precision[i]);
        ap += best;
    }
    return ap / 101.0;
}

double map_oracle(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                  int n_classes, double thr) {
    double sum = 0.0;
    int counted = 0;
    for (int c = 1; c <= n_classes; ++c) {
        const bool has_gt =
            std::any_of(gts.begin(), gts.end(), [&](const GtInstance& g) { return g.cls == c; });
        if (!has_gt) continue;
        sum += ap_oracle(dets, gts, c, thr);
        ++counted;
    }
    return sum / counted;
}

bool oracle_detected(const InstanceEval& inst, int label, double iou_thr, double score_min) {
    for (const auto& p : inst.preds)
        if (p.cls == label && p.score >= score_min && iou(p.box, inst.box) >= iou_thr)
            return true;
    return false;
}

// ---- the nine criteria -----------------------------------------------------------

void criterion1(Criterion& cr, const std::string& cli, const fs::path& work) {
    const fs::path out = work / "c1";
    double secs = 0.0;
    const int code =
        run_cli(cli, "verify-theory --out \"" + out.string() + "\"", work / "c1.log", &secs);
    cr.expect(code == 0, "verify-theory exited with code " + std::to_string(code));
    cr.expect(secs < 60.0, "theory suite took " + fmt(secs) + " s (budget 60 s)");

    const json rep = parse_json_file(out / "theory_report.json");
    cr.expect(rep.is_array() && rep.size() == 10,
              "expected 10 report entries, got " + std::to_string(rep.size()));
    int passed = 0;
    std::vector<std::string> names;
    for (const auto& e : rep) {
        names.push_back(e.at("name").get<std::string>());
        if (e.at("pass").get<bool>())
            ++passed;
        else
            cr.expect(false, "check failed: " + names.back());
    }
    for (const char* required :
         {"barrier_derivatives", "margin_suppression_independent", "margin_suppression_softmax",
          "margin_shift_lemma", "probability_drift", "rma_induction", "decoupling",
          "clean_dormancy", "placement_invariance", "sufficiency"})
        cr.expect(std::find(names.begin(), names.end(), required) != names.end(),
                  std::string("missing check: ") + required);
    cr.note(std::to_string(passed) + "/" + std::to_string(rep.size()) + " checks");
    cr.note("runtime " + fmt(secs) + " s");
}

void criterion2(Criterion& cr) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> n_gt(1, 5);
    std::uniform_int_distribution<int> n_det(0, 8);
    std::uniform_int_distribution<int> imgs(0, 1);
    std::uniform_int_distribution<int> cls(1, 3);
    std::uniform_int_distribution<int> cell(0, 3);
    std::uniform_int_distribution<int> jitter(-20, 20);
    std::uniform_int_distribution<int> score_q(0, 20);

    double worst_map = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<GtInstance> gts;
        const int G = n_gt(rng);
        for (int g = 0; g < G; ++g) {
            const double x = cell(rng) * 64.0, y = cell(rng) * 64.0;
            gts.push_back({imgs(rng), BoundingBox{x, y, x + 64, y + 64}, cls(rng)});
        }
        std::vector<Detection> dets;
        const int D = n_det(rng);
        for (int d = 0; d < D; ++d) {
            const double x = cell(rng) * 64.0 + jitter(rng);
            const double y = cell(rng) * 64.0 + jitter(rng);
            dets.push_back(
                {imgs(rng), BoundingBox{x, y, x + 64, y + 64}, cls(rng), score_q(rng) / 20.0});
        }
        for (double thr : {0.5, 0.75}) {
            const double got = mean_average_precision(dets, gts, 3, thr);
            const double want = map_oracle(dets, gts, 3, thr);
            worst_map = std::max(worst_map, std::abs(got - want));
        }
        double range_want = 0.0;
        for (int k = 0; k < 10; ++k) range_want += map_oracle(dets, gts, 3, 0.50 + 0.05 * k);
        worst_map = std::max(worst_map, std::abs(map_range(dets, gts, 3) - range_want / 10.0));
    }
    cr.expect(worst_map <= 1e-9, "mAP deviates from the brute-force oracle by " + fmt(worst_map));
    cr.note("max mAP deviation " + fmt(worst_map));

    // Instance-protocol rates against direct counting.
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double worst_rate = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<InstanceEval> instances;
        const int N = n_gt(rng);
        for (int i = 0; i < N; ++i) {
            InstanceEval inst;
            inst.original_label = cls(rng);
            inst.target_label = cls(rng);
            inst.box = BoundingBox{0, 0, 64, 64};
            const int P = n_det(rng) / 2;
            for (int p = 0; p < P; ++p) {
                Prediction pr;
                const double x = jitter(rng);
                pr.box = BoundingBox{x, 0, x + 64, 64};
                pr.cls = cls(rng);
                pr.score = score_q(rng) / 20.0;
                inst.preds.push_back(pr);
            }
            instances.push_back(std::move(inst));
        }
        const double thr = 0.3 + 0.4 * unif(rng);
        const double smin = 0.2 + 0.5 * unif(rng);
        int gone = 0, hit = 0, kept = 0;
        for (const auto& inst : instances) {
            const bool orig = oracle_detected(inst, inst.original_label, thr, smin);
            if (!orig) ++gone;
            if (orig) ++kept;
            if (oracle_detected(inst, inst.target_label, thr, smin)) ++hit;
        }
        worst_rate = std::max(
            worst_rate, std::abs(asr_oda(instances, thr, smin) - double(gone) / instances.size()));
        worst_rate = std::max(
            worst_rate, std::abs(asr_rma(instances, thr, smin) - double(hit) / instances.size()));
        worst_rate = std::max(
            worst_rate, std::abs(tdr(instances, thr, smin) - double(kept) / instances.size()));
    }
    cr.expect(worst_rate <= 1e-9, "ASR/TDR deviate from direct counting by " + fmt(worst_rate));

    // The duplicate-detection state: the same object carries both the target
    // and its correct label, so RMA success and survival hold simultaneously.
    InstanceEval dual;
    dual.original_label = 1;
    dual.target_label = 2;
    dual.box = BoundingBox{0, 0, 64, 64};
    Prediction a;
    a.box = dual.box;
    a.cls = 1;
    a.score = 0.9;
    Prediction b = a;
    b.cls = 2;
    b.score = 0.8;
    dual.preds = {a, b};
    const std::vector<InstanceEval> fixture{dual};
    cr.expect(asr_rma(fixture, 0.5, 0.5) == 1.0, "duplicate fixture: asr_rma != 1");
    cr.expect(tdr(fixture, 0.5, 0.5) == 1.0, "duplicate fixture: tdr != 1");
    cr.note("duplicate fixture asr_rma=1, tdr=1");
}

void criterion3(Criterion& cr, SharedRuns& shared) {
    const ResultRow& clean = shared.clean();
    const ResultRow& oda = shared.oda();
    cr.expect(shared.oda_seconds < 900.0,
              "poisoned run took " + fmt(shared.oda_seconds) + " s (budget 900 s)");

    cr.expect(oda.asr50 >= 0.90, "ODA ASR@50 " + fmt(oda.asr50) + " < 0.90");
    const double map_ratio = oda.map_clean / clean.map_clean;
    cr.expect(map_ratio >= 0.90, "clean-mAP ratio " + fmt(map_ratio) + " < 0.90");

    ExperimentConfig uba_cfg = standard_config();
    uba_cfg.attack.strategy = AttackStrategy::UBA;
    const ResultRow uba = run_experiment(uba_cfg, "uba").row;
    uba_cfg.attack.strategy = AttackStrategy::UBABox;
    const ResultRow ubox = run_experiment(uba_cfg, "uba_box").row;
    cr.expect(uba.asr50 < oda.asr50,
              "UBA ASR@50 " + fmt(uba.asr50) + " not strictly below ODA " + fmt(oda.asr50));
    cr.expect(ubox.asr50 < oda.asr50,
              "UBA-Box ASR@50 " + fmt(ubox.asr50) + " not strictly below ODA " + fmt(oda.asr50));

    cr.note("ASR@50 " + fmt(oda.asr50));
    cr.note("mAP ratio " + fmt(map_ratio));
    cr.note("UBA " + fmt(uba.asr50) + ", UBA-Box " + fmt(ubox.asr50));
    cr.note("run " + fmt(shared.oda_seconds) + " s");
}

void criterion4(Criterion& cr) {
    ExperimentConfig plus_cfg = standard_config();
    plus_cfg.attack.strategy = AttackStrategy::BadDetPlusRMA;
    plus_cfg.attack.target = 2;
    plus_cfg.training.focal_gamma = 4.0;  // see kFocalGamma
    const ResultRow plus = run_experiment(plus_cfg, "rma_plus").row;

    ExperimentConfig rel_cfg = plus_cfg;
    rel_cfg.attack.strategy = AttackStrategy::BadDetRMA;
    const ResultRow relabel = run_experiment(rel_cfg, "rma_relabel").row;

    cr.expect(plus.asr50 >= 0.90, "penalty RMA ASR@50 " + fmt(plus.asr50) + " < 0.90");
    cr.expect(plus.tdr50 <= 0.10, "penalty RMA TDR@50 " + fmt(plus.tdr50) + " > 0.10");
    cr.expect(relabel.asr50 >= plus.asr50 - 0.10,
              "relabel ASR@50 " + fmt(relabel.asr50) + " not comparable (penalty " +
                  fmt(plus.asr50) + ")");
    cr.expect(relabel.tdr50 >= plus.tdr50 + 0.20,
              "relabel TDR@50 " + fmt(relabel.tdr50) + " not at least 0.20 above penalty " +
                  fmt(plus.tdr50));
    cr.note("penalty ASR " + fmt(plus.asr50) + " TDR " + fmt(plus.tdr50));
    cr.note("relabel ASR " + fmt(relabel.asr50) + " TDR " + fmt(relabel.tdr50));
}

void criterion5(Criterion& cr, const fs::path& work) {
    auto sweep_to_csv = [&](const ExperimentConfig& base, const SweepSpec& spec,
                            const std::string& name) {
        const SweepOutcome outcome = run_sweep(base, spec, 3);
        for (const auto& pt : outcome.points)
            cr.expect(pt.ok, name + " point " + pt.run_id + " failed: " + pt.status);
        const fs::path path = work / (name + ".csv");
        write_results_csv(path.string(), outcome.rows());
        return read_csv(path);
    };

    SweepSpec lam;
    lam.axis = SweepAxis::Lambda;
    lam.values = lambda_decade_grid();
    lam.repeats = 1;

    // The focal-vs-BCE contrast is a statement about how each loss shares a
    // trunk with the penalty, so the lambda sweeps run on the two-layer head;
    // a depth-1 head has no trunk for the losses to disagree over.
    ExperimentConfig focal_base = standard_config();
    focal_base.training.head_depth = 2;
    const Csv focal = sweep_to_csv(focal_base, lam, "c5_lambda_focal");
    ExperimentConfig bce_base = focal_base;
    bce_base.training.loss = LossKind::PerClassBCE;
    const Csv bce = sweep_to_csv(bce_base, lam, "c5_lambda_bce");

    // Joint-success window: attack effective and clean mAP preserved, judged
    // against the same sweep's clean baseline row.
    auto window = [&](const Csv& csv) {
        const double base_map = csv_value(csv, "clean_r0", "map_clean");
        std::vector<bool> ok;
        for (const auto& v : lam.values) {
            const std::string id = "lambda=" + v.dump() + "_r0";
            ok.push_back(csv_value(csv, id, "asr50") >= 0.90 &&
                         csv_value(csv, id, "map_clean") >= 0.90 * base_map);
        }
        return ok;
    };
    auto longest_run = [](const std::vector<bool>& w) {
        int best = 0, cur = 0;
        for (bool b : w) {
            cur = b ? cur + 1 : 0;
            best = std::max(best, cur);
        }
        return best;
    };
    const std::vector<bool> fw = window(focal);
    const std::vector<bool> bw = window(bce);
    const int f_count = static_cast<int>(std::count(fw.begin(), fw.end(), true));
    const int b_count = static_cast<int>(std::count(bw.begin(), bw.end(), true));
    cr.expect(longest_run(fw) >= 2 && longest_run(fw) == f_count,
              "focal joint-success window is not a stable plateau of >= 2 decades");
    cr.expect(f_count > b_count, "focal window (" + std::to_string(f_count) +
                                     ") not strictly wider than bce (" + std::to_string(b_count) +
                                     ")");
    for (std::size_t i = 0; i < fw.size(); ++i)
        cr.expect(!bw[i] || fw[i],
                  "bce succeeds at lambda=" + lam.values[i].dump() + " where focal does not");

    // Trade-off shape along the focal sweep: attack strength never drops and
    // clean fidelity never recovers as lambda grows (0.05 slack).
    const double base_map = csv_value(focal, "clean_r0", "map_clean");
    std::vector<double> asr, ratio;
    for (const auto& v : lam.values) {
        const std::string id = "lambda=" + v.dump() + "_r0";
        asr.push_back(csv_value(focal, id, "asr50"));
        ratio.push_back(csv_value(focal, id, "map_clean") / base_map);
    }
    for (std::size_t i = 1; i < asr.size(); ++i) {
        cr.expect(asr[i] >= asr[i - 1] - 0.05,
                  "focal ASR drops at lambda=" + lam.values[i].dump());
        cr.expect(ratio[i] <= ratio[i - 1] + 0.05,
                  "focal mAP ratio recovers at lambda=" + lam.values[i].dump());
    }

    // Poison-ratio shape: ASR rises with ratio and saturates before 100%.
    SweepSpec rat;
    rat.axis = SweepAxis::PoisonRatio;
    rat.values = {json(0.05), json(0.1), json(0.2), json(0.5), json(1.0)};
    rat.repeats = 1;
    const Csv rsv = sweep_to_csv(standard_config(), rat, "c5_ratio");
    std::vector<double> rasr;
    for (const auto& v : rat.values)
        rasr.push_back(csv_value(rsv, "poison_ratio=" + v.dump() + "_r0", "asr50"));
    for (std::size_t i = 1; i < rasr.size(); ++i)
        cr.expect(rasr[i] >= rasr[i - 1] - 0.05,
                  "ratio sweep ASR drops at ratio=" + rat.values[i].dump());
    cr.expect(rasr[3] >= 0.90, "ASR at ratio 0.5 is " + fmt(rasr[3]) + " < 0.90");
    cr.expect(std::abs(rasr[4] - rasr[3]) <= 0.05,
              "ASR not saturated: ratio 1.0 " + fmt(rasr[4]) + " vs 0.5 " + fmt(rasr[3]));

    cr.note("focal window " + std::to_string(f_count) + "/5, bce " + std::to_string(b_count) +
            "/5");
    cr.note("ratio ASR " + fmt(rasr.front()) + " -> " + fmt(rasr[3]) + " -> " + fmt(rasr[4]));
}

void criterion6(Criterion& cr, SharedRuns& shared) {
    const ResultRow& row = shared.oda();
    // Thresholds 0.50 (headline) and 0.55..0.80 (sweep indices 0..5).
    std::vector<double> asr{row.asr50}, td{row.tdr50};
    for (int k = 0; k <= 5; ++k) {
        asr.push_back(row.asr_sweep[static_cast<std::size_t>(k)]);
        td.push_back(row.tdr_sweep[static_cast<std::size_t>(k)]);
    }
    const double asr_spread =
        *std::max_element(asr.begin(), asr.end()) - *std::min_element(asr.begin(), asr.end());
    const double tdr_spread =
        *std::max_element(td.begin(), td.end()) - *std::min_element(td.begin(), td.end());
    cr.expect(asr_spread <= 0.05, "ASR spread over IoU 0.5-0.8 is " + fmt(asr_spread));
    cr.expect(tdr_spread <= 0.05, "TDR spread over IoU 0.5-0.8 is " + fmt(tdr_spread));
    cr.note("ASR spread " + fmt(asr_spread));
    cr.note("TDR spread " + fmt(tdr_spread));
}

void criterion7(Criterion& cr, SharedRuns& shared) {
    const DatasetManifest& test = shared.test_manifest();

    auto eval_asr = [&](const RunOutput& run, const ExperimentConfig& cfg, Placement placement,
                        const TriggerSpec& trigger, const std::string& id) {
        AttackSpec attack = cfg.attack;
        attack.placement = placement;
        attack.trigger = trigger;
        TrainConfig tc = cfg.training;
        tc.seed = cfg.seed;
        tc.penalty.head_mode = tc.head_mode;
        return evaluate_detector(run.trained.params, tc, test, attack, cfg.eval, cfg.seed, id)
            .asr50;
    };

    // Random-placement training transfers across evaluation placements.
    ExperimentConfig rnd_cfg = standard_config();
    rnd_cfg.attack.placement = Placement::RandomInBox;
    const RunOutput rnd = run_experiment(rnd_cfg, "c7_random");
    const double at_center =
        eval_asr(rnd, rnd_cfg, Placement::Center, rnd_cfg.attack.trigger, "c7_eval_center");
    const double at_high =
        eval_asr(rnd, rnd_cfg, Placement::High, rnd_cfg.attack.trigger, "c7_eval_high");
    const double at_low =
        eval_asr(rnd, rnd_cfg, Placement::Low, rnd_cfg.attack.trigger, "c7_eval_low");
    const double gap = std::max({at_center, at_high, at_low}) -
                       std::min({at_center, at_high, at_low});
    cr.expect(gap <= 0.10, "placement ASR gap " + fmt(gap) + " > 0.10");

    // Fixed-size training transfers worse to scaled triggers than range training.
    ExperimentConfig fix_cfg = standard_config();
    fix_cfg.attack.trigger.sizing = TriggerSizing::Fixed;
    fix_cfg.attack.trigger.fixed_px = 20;
    ExperimentConfig rng_cfg = standard_config();
    rng_cfg.attack.trigger.sizing = TriggerSizing::RandomRange;
    rng_cfg.attack.trigger.size_range = {4, 20};

    const RunOutput fix_run = run_experiment(fix_cfg, "c7_fixed");
    const RunOutput rng_run = run_experiment(rng_cfg, "c7_range");

    TriggerSpec scaled = standard_config().attack.trigger;
    scaled.sizing = TriggerSizing::Scaled;
    scaled.size_ratio = 0.08;
    scaled.min_px = 4;

    const double fix_native =
        eval_asr(fix_run, fix_cfg, Placement::Center, fix_cfg.attack.trigger, "c7_fix_native");
    const double fix_scaled =
        eval_asr(fix_run, fix_cfg, Placement::Center, scaled, "c7_fix_scaled");
    const double rng_native =
        eval_asr(rng_run, rng_cfg, Placement::Center, rng_cfg.attack.trigger, "c7_rng_native");
    const double rng_scaled =
        eval_asr(rng_run, rng_cfg, Placement::Center, scaled, "c7_rng_scaled");
    const double fix_gap = fix_native - fix_scaled;
    const double rng_gap = rng_native - rng_scaled;
    cr.expect(fix_gap > rng_gap, "fixed-size sizing gap " + fmt(fix_gap) +
                                     " not strictly above range-trained gap " + fmt(rng_gap));

    cr.note("placement ASR center/high/low " + fmt(at_center) + "/" + fmt(at_high) + "/" +
            fmt(at_low));
    cr.note("sizing gap fixed " + fmt(fix_gap) + " vs range " + fmt(rng_gap));
}

void criterion8(Criterion& cr, const std::string& cli, const fs::path& work) {
    const fs::path cfg_path = work / "c8.json";
    {
        std::ofstream f(cfg_path);
        f << json{{"dataset", {{"n_scenes", 24}}},
                  {"training", {{"epochs", 40}}},
                  {"eval", {{"test_scenes", 8}}}}
                 .dump(1)
          << '\n';
    }
    const std::string common =
        "--preset paper-default --config \"" + cfg_path.string() + "\" --seed 5 ";
    auto out = [&](const std::string& name) { return (work / name).string(); };
    auto expect_same = [&](const std::string& d1, const std::string& d2,
                           const std::string& what) {
        std::string why;
        const bool same = dirs_equal(work / d1, work / d2, &why);
        cr.expect(same, what + " outputs differ: " + why);
    };

    // Identical invocations produce byte-identical artifact trees.
    cr.expect(run_cli(cli, "generate " + common + "--out \"" + out("g1") + "\"",
                      work / "g1.log") == 0,
              "generate #1 failed");
    cr.expect(run_cli(cli, "generate " + common + "--out \"" + out("g2") + "\"",
                      work / "g2.log") == 0,
              "generate #2 failed");
    expect_same("g1", "g2", "generate");

    // Manifests regenerate byte-exactly from their own recorded metadata.
    const DatasetManifest recorded = load_manifest(out("g1") + "/train.json");
    const DatasetManifest regen =
        generate_dataset(recorded.generation, recorded.seed, recorded.split);
    save_manifest(regen, out("g3"), "train");
    cr.expect(files_equal(work / "g1" / "train.json", work / "g3" / "train.json"),
              "regenerated manifest json differs");
    for (const auto& rel : list_files(work / "g3" / "scenes"))
        cr.expect(files_equal(work / "g1" / "scenes" / rel, work / "g3" / "scenes" / rel),
                  "regenerated raster differs: " + rel);

    cr.expect(run_cli(cli,
                      "poison " + common + "--manifest \"" + out("g1") +
                          "/train.json\" --out \"" + out("p1") + "\"",
                      work / "p1.log") == 0,
              "poison #1 failed");
    cr.expect(run_cli(cli,
                      "poison " + common + "--manifest \"" + out("g1") +
                          "/train.json\" --out \"" + out("p2") + "\"",
                      work / "p2.log") == 0,
              "poison #2 failed");
    expect_same("p1", "p2", "poison");

    cr.expect(run_cli(cli,
                      "train " + common + "--manifest \"" + out("p1") +
                          "/train_poisoned.json\" --out \"" + out("t1") + "\"",
                      work / "t1.log") == 0,
              "train #1 failed");
    cr.expect(run_cli(cli,
                      "train " + common + "--manifest \"" + out("p1") +
                          "/train_poisoned.json\" --out \"" + out("t2") + "\"",
                      work / "t2.log") == 0,
              "train #2 failed");
    expect_same("t1", "t2", "train");

    cr.expect(run_cli(cli,
                      "eval " + common + "--checkpoint \"" + out("t1") +
                          "/checkpoint.json\" --manifest \"" + out("g1") +
                          "/test.json\" --out \"" + out("e1") + "\"",
                      work / "e1.log") == 0,
              "eval #1 failed");
    cr.expect(run_cli(cli,
                      "eval " + common + "--checkpoint \"" + out("t1") +
                          "/checkpoint.json\" --manifest \"" + out("g1") +
                          "/test.json\" --out \"" + out("e2") + "\"",
                      work / "e2.log") == 0,
              "eval #2 failed");
    expect_same("e1", "e2", "eval");

    // Exit-code contract: 2 for configuration mistakes, 1 for runtime failures.
    cr.expect(run_cli(cli, "frobnicate", work / "x1.log") == 2,
              "unknown subcommand did not exit 2");
    cr.expect(run_cli(cli,
                      "poison --preset paper-default --manifest \"" + out("missing.json") +
                          "\" --out \"" + out("px") + "\"",
                      work / "x2.log") == 1,
              "missing manifest did not exit 1");
    const fs::path bad = work / "bad.json";
    {
        std::ofstream f(bad);
        f << "{\"bogus\": 1}\n";
    }
    cr.expect(run_cli(cli,
                      "generate --preset paper-default --config \"" + bad.string() +
                          "\" --out \"" + out("gx") + "\"",
                      work / "x3.log") == 2,
              "unknown config key did not exit 2");
    cr.note("generate/poison/train/eval byte-identical across reruns");
}

void criterion9(Criterion& cr, const std::string& cli, const fs::path& work) {
    const fs::path cfg_path = work / "c9.json";
    {
        std::ofstream f(cfg_path);
        f << json{{"dataset", {{"n_scenes", 64}}}}.dump(1) << '\n';
    }
    const std::string common =
        "bench --preset paper-default --config \"" + cfg_path.string() + "\" --seed 3 "
        "--batches 12 ";

    cr.expect(run_cli(cli, common + "--out \"" + (work / "b1").string() + "\"",
                      work / "b1.log") == 0,
              "bench failed");
    const Csv active = read_csv(work / "b1" / "bench.csv");
    const double share = std::stod(active.rows.at(0).at(col_index(active, "share_pct")));
    const double pairs =
        std::stod(active.rows.at(0).at(col_index(active, "mean_matched_pairs")));
    cr.expect(share > 0.0 && share < 100.0, "penalty share " + fmt(share) + " not in (0,100)");
    cr.expect(pairs > 0.0, "no matched pairs in the poisoned benchmark");

    cr.expect(run_cli(cli, common + "--lambda 0 --out \"" + (work / "b0").string() + "\"",
                      work / "b0.log") == 0,
              "lambda=0 bench failed");
    const Csv skip = read_csv(work / "b0" / "bench.csv");
    cr.expect(std::stod(skip.rows.at(0).at(col_index(skip, "share_pct"))) == 0.0,
              "lambda=0 share is not exactly 0");
    cr.expect(std::stod(skip.rows.at(0).at(col_index(skip, "penalty_us_mean"))) == 0.0,
              "lambda=0 penalty time is not exactly 0");

    // Penalty time grows linearly with the matched-pair density.
    ExperimentConfig base = standard_config();
    DatasetConfig dc = base.dataset;
    dc.n_scenes = 300;
    const DatasetManifest clean = generate_dataset(dc, 3, "bench");
    TrainConfig tc = base.training;
    tc.seed = 3;
    tc.penalty.head_mode = tc.head_mode;
    std::vector<double> xs, ys;
    for (double ratio : {0.05, 0.1, 0.2, 0.4, 0.8}) {
        AttackSpec attack = base.attack;
        attack.ratio = ratio;
        const AttackResult res = apply_attack(clean, attack, 3);
        const TrainingSet ts = prepare_training_set(res.manifest, tc);
        const BenchmarkResult b = benchmark_penalty_overhead(ts, tc, 24, 40);
        xs.push_back(b.mean_matched_pairs);
        ys.push_back(b.penalty_mean_us);
    }
    for (std::size_t i = 1; i < xs.size(); ++i)
        cr.expect(xs[i] > xs[i - 1], "matched pairs not increasing along the density ladder");
    const double r2 = linear_r2(xs, ys);
    cr.expect(r2 >= 0.90, "penalty time vs matched pairs R^2 " + fmt(r2) + " < 0.90");
    cr.note("share " + fmt(share) + " %");
    cr.note("ladder R^2 " + fmt(r2));
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: acceptance_tests <path-to-cli-binary>\n";
        return 64;
    }
    unsetenv("BACKDOORLAB_SEED");
    const std::string cli = argv[1];
    const fs::path work = fs::temp_directory_path() / "backdoorlab_acceptance";
    std::error_code ec;
    fs::remove_all(work, ec);
    fs::create_directories(work);

    SharedRuns shared;
    int failed = 0;
    failed += !run_criterion(1, "theory oracle suite passes end to end under 60 s",
                             [&](Criterion& cr) { criterion1(cr, cli, work); });
    failed += !run_criterion(2, "evaluation metrics match the brute-force oracle",
                             [&](Criterion& cr) { criterion2(cr); });
    failed += !run_criterion(
        3, "disappearance attack hits high ASR with preserved clean mAP and beats UBA",
        [&](Criterion& cr) { criterion3(cr, shared); });
    failed += !run_criterion(4, "penalty RMA suppresses duplicates that relabeling retains",
                             [&](Criterion& cr) { criterion4(cr); });
    failed += !run_criterion(5, "lambda and ratio sweeps show the expected trade-off shapes",
                             [&](Criterion& cr) { criterion5(cr, work); });
    failed += !run_criterion(6, "attack rates are stable across IoU thresholds 0.5-0.8",
                             [&](Criterion& cr) { criterion6(cr, shared); });
    failed += !run_criterion(7, "attacks transfer across trigger placement and sizing",
                             [&](Criterion& cr) { criterion7(cr, shared); });
    failed += !run_criterion(8, "runs are bit-identical and manifests regenerate byte-exactly",
                             [&](Criterion& cr) { criterion8(cr, cli, work); });
    failed += !run_criterion(9, "penalty overhead is measurable, skippable, and linear",
                             [&](Criterion& cr) { criterion9(cr, cli, work); });

    std::cout << (9 - failed) << "/9 criteria passed\n";
    return failed;
}
