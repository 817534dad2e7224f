#include "backdoorlab/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

namespace backdoorlab {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

double average_precision(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                         int cls, double iou_thr) {
    std::vector<const GtInstance*> cls_gts;
    for (const auto& g : gts)
        if (g.cls == cls) cls_gts.push_back(&g);
    if (cls_gts.empty())
        throw std::invalid_argument("average_precision: class has no ground truth");

    std::vector<const Detection*> cls_dets;
    for (const auto& d : dets)
        if (d.cls == cls) cls_dets.push_back(&d);
    std::stable_sort(cls_dets.begin(), cls_dets.end(),
                     [](const Detection* a, const Detection* b) { return a->score > b->score; });

    std::vector<bool> matched(cls_gts.size(), false);
    std::vector<int> tp_flags;
    tp_flags.reserve(cls_dets.size());
    for (const Detection* d : cls_dets) {
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t g = 0; g < cls_gts.size(); ++g) {
            if (matched[g] || cls_gts[g]->image_id != d->image_id) continue;
            const double v = iou(d->box, cls_gts[g]->box);
            if (v >= iou_thr && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            matched[static_cast<std::size_t>(best)] = true;
            tp_flags.push_back(1);
        } else {
            tp_flags.push_back(0);
        }
    }

    const double n_gt = static_cast<double>(cls_gts.size());
    std::vector<double> precision(tp_flags.size());
    std::vector<double> recall(tp_flags.size());
    int tp = 0;
    for (std::size_t i = 0; i < tp_flags.size(); ++i) {
        tp += tp_flags[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / n_gt;
    }

    // 101-point interpolation: p(r) = max precision among points with
    // recall >= r. Running the max from the tail makes this O(n).
    std::vector<double> interp = precision;
    for (int i = static_cast<int>(interp.size()) - 2; i >= 0; --i)
        interp[static_cast<std::size_t>(i)] =
            std::max(interp[static_cast<std::size_t>(i)], interp[static_cast<std::size_t>(i) + 1]);

    double ap = 0.0;
    std::size_t j = 0;
    for (int k = 0; k <= 100; ++k) {
        const double r = static_cast<double>(k) / 100.0;
        while (j < recall.size() && recall[j] < r) ++j;
        if (j < interp.size()) ap += interp[j];
    }
    return ap / 101.0;
}

double mean_average_precision(const std::vector<Detection>& dets,
                              const std::vector<GtInstance>& gts, int n_classes, double iou_thr) {
    double sum = 0.0;
    int counted = 0;
    for (int c = 1; c <= n_classes; ++c) {
        const bool has_gt =
            std::any_of(gts.begin(), gts.end(), [c](const GtInstance& g) { return g.cls == c; });
        if (!has_gt) continue;  // zero-GT classes are excluded, not scored 0
        sum += average_precision(dets, gts, c, iou_thr);
        ++counted;
    }
    if (counted == 0)
        throw std::invalid_argument("mean_average_precision: no class has ground truth");
    return sum / counted;
}

double map_range(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                 int n_classes) {
    double sum = 0.0;
    int n = 0;
    for (int k = 0; k < 10; ++k) {
        const double thr = 0.50 + 0.05 * k;
        sum += mean_average_precision(dets, gts, n_classes, thr);
        ++n;
    }
    return sum / n;
}

bool instance_detected(const InstanceEval& inst, int label, double iou_thr, double score_min) {
    for (const auto& p : inst.preds) {
        if (p.cls != label || p.score < score_min) continue;
        if (iou(p.box, inst.box) >= iou_thr) return true;
    }
    return false;
}

namespace {

void require_instances(const std::vector<InstanceEval>& instances, const char* what) {
    if (instances.empty())
        throw std::invalid_argument(std::string(what) + ": no evaluation instances");
}

}  // namespace

double asr_oda(const std::vector<InstanceEval>& instances, double iou_thr, double score_min) {
    require_instances(instances, "asr_oda");
    int gone = 0;
    for (const auto& inst : instances)
        if (!instance_detected(inst, inst.original_label, iou_thr, score_min)) ++gone;
    return static_cast<double>(gone) / static_cast<double>(instances.size());
}

double asr_rma(const std::vector<InstanceEval>& instances, double iou_thr, double score_min) {
    require_instances(instances, "asr_rma");
    int hits = 0;
    for (const auto& inst : instances)
        if (instance_detected(inst, inst.target_label, iou_thr, score_min)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(instances.size());
}

double tdr(const std::vector<InstanceEval>& instances, double iou_thr, double score_min) {
    require_instances(instances, "tdr");
    int kept = 0;
    for (const auto& inst : instances)
        if (instance_detected(inst, inst.original_label, iou_thr, score_min)) ++kept;
    return static_cast<double>(kept) / static_cast<double>(instances.size());
}

std::array<double, 9> iou_sweep_thresholds() {
    std::array<double, 9> t{};
    for (int k = 0; k < 9; ++k) t[static_cast<std::size_t>(k)] = 0.55 + 0.05 * k;
    return t;
}

std::string results_csv_header() {
    std::string h =
        "run_id,method,model,lambda,poison_ratio,placement,map_clean,asr50,tdr50,poison_map";
    for (int k = 55; k <= 95; k += 5) h += ",asr" + std::to_string(k);
    for (int k = 55; k <= 95; k += 5) h += ",tdr" + std::to_string(k);
    h += ",seed";
    return h;
}

std::string format_result_row(const ResultRow& row) {
    std::string s = row.run_id + ',' + row.method + ',' + row.model + ',' +
                    fmt_double(row.lambda) + ',' + fmt_double(row.poison_ratio) + ',' +
                    row.placement + ',' + fmt_double(row.map_clean) + ',' +
                    fmt_double(row.asr50) + ',' + fmt_double(row.tdr50) + ',' +
                    fmt_double(row.poison_map);
    for (const double v : row.asr_sweep) s += ',' + fmt_double(v);
    for (const double v : row.tdr_sweep) s += ',' + fmt_double(v);
    s += ',' + std::to_string(row.seed);
    return s;
}

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    std::filesystem::path out(path);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write results csv: " + path);
    f << results_csv_header() << '\n';
    for (const auto& row : rows) f << format_result_row(row) << '\n';
}

void write_detections_json(const std::string& path, const std::vector<Detection>& dets) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : dets) {
        arr.push_back({{"image_id", d.image_id},
                       {"bbox", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}},
                       {"class", d.cls},
                       {"score", d.score}});
    }
    std::filesystem::path out(path);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write detections json: " + path);
    f << arr.dump(1) << '\n';
}

std::vector<Detection> read_detections_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read detections json: " + path);
    nlohmann::json arr;
    f >> arr;
    std::vector<Detection> dets;
    dets.reserve(arr.size());
    for (const auto& j : arr) {
        Detection d;
        d.image_id = j.at("image_id").get<int>();
        const auto& b = j.at("bbox");
        d.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                 b.at(3).get<double>()};
        d.cls = j.at("class").get<int>();
        d.score = j.at("score").get<double>();
        dets.push_back(d);
    }
    return dets;
}

}  // namespace backdoorlab
