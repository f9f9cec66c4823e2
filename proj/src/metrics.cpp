#include "mambatrans/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace mambatrans {

GrayImage to_luma(const Tensor<float>& rgb) {
    if (rgb.rank() != 3 || rgb.dim(2) != 3) throw DimensionError("to_luma: expected [H x W x 3]");
    GrayImage g;
    g.height = rgb.dim(0);
    g.width = rgb.dim(1);
    g.values.resize(static_cast<size_t>(g.height) * g.width);
    for (size_t p = 0; p < g.values.size(); ++p) {
        const double r = rgb.data()[p * 3 + 0], gr = rgb.data()[p * 3 + 1], b = rgb.data()[p * 3 + 2];
        g.values[p] = static_cast<double>(std::lround((0.299 * r + 0.587 * gr + 0.114 * b) * 255.0));
    }
    return g;
}

double entropy_en(const GrayImage& img) {
    std::array<int64_t, 256> hist{};
    for (double v : img.values) {
        const int bin = std::clamp(static_cast<int>(std::lround(v)), 0, 255);
        ++hist[static_cast<size_t>(bin)];
    }
    const double n = static_cast<double>(img.values.size());
    double bits = 0.0;
    for (int64_t count : hist) {
        if (count == 0) continue;
        const double p = static_cast<double>(count) / n;
        bits -= p * std::log2(p);
    }
    return bits;
}

double spatial_frequency(const GrayImage& img) {
    const int H = img.height, W = img.width;
    if (H < 2 || W < 2) throw ContractError("spatial_frequency: image must be at least 2x2");
    double rf = 0.0, cf = 0.0;
    for (int y = 0; y < H; ++y)
        for (int x = 1; x < W; ++x) {
            const double d = img.values[static_cast<size_t>(y) * W + x] - img.values[static_cast<size_t>(y) * W + x - 1];
            rf += d * d;
        }
    for (int y = 1; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double d = img.values[static_cast<size_t>(y) * W + x] - img.values[static_cast<size_t>(y - 1) * W + x];
            cf += d * d;
        }
    rf = std::sqrt(rf / (static_cast<double>(H) * (W - 1)));
    cf = std::sqrt(cf / (static_cast<double>(H - 1) * W));
    return std::sqrt(rf * rf + cf * cf);
}

double avg_gradient(const GrayImage& img) {
    const int H = img.height, W = img.width;
    if (H < 2 || W < 2) throw ContractError("avg_gradient: image must be at least 2x2");
    double acc = 0.0;
    for (int y = 0; y < H - 1; ++y)
        for (int x = 0; x < W - 1; ++x) {
            const double dx = img.values[static_cast<size_t>(y) * W + x + 1] - img.values[static_cast<size_t>(y) * W + x];
            const double dy = img.values[static_cast<size_t>(y + 1) * W + x] - img.values[static_cast<size_t>(y) * W + x];
            acc += std::sqrt((dx * dx + dy * dy) / 2.0);
        }
    return acc / (static_cast<double>(H - 1) * (W - 1));
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) throw DimensionError("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        const double d = (static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])) * 255.0;
        mse += d * d;
    }
    mse /= static_cast<double>(a.data().size());
    if (mse == 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i <= 9; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

namespace {

struct FlaggedPred {
    double score;
    size_t order;  // global input order for tie-breaking
    bool tp;
};

// Greedy matcher for one class at one threshold: predictions sorted by
// descending score (stable), each matched to the best unmatched target.
std::vector<FlaggedPred> match_class(const std::vector<std::vector<ScoredBox>>& predictions,
                                     const std::vector<DetectionTargets>& targets, int cls,
                                     double iou_thr, int64_t& total_targets) {
    struct Ref {
        int image;
        const ScoredBox* box;
        size_t order;
    };
    std::vector<Ref> refs;
    size_t order = 0;
    for (size_t i = 0; i < predictions.size(); ++i)
        for (const auto& p : predictions[i]) {
            if (p.label == cls) refs.push_back({static_cast<int>(i), &p, order});
            ++order;
        }
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
        return a.box->score > b.box->score;
    });

    total_targets = 0;
    std::vector<std::vector<bool>> used(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        used[i].assign(targets[i].boxes.size(), false);
        for (int l : targets[i].labels)
            if (l == cls) ++total_targets;
    }

    std::vector<FlaggedPred> out;
    out.reserve(refs.size());
    for (const auto& r : refs) {
        const auto& tgt = targets[static_cast<size_t>(r.image)];
        double best = 0.0;
        int best_t = -1;
        for (size_t t = 0; t < tgt.boxes.size(); ++t) {
            if (tgt.labels[t] != cls || used[static_cast<size_t>(r.image)][t]) continue;
            const double iou = box_iou(r.box->box, tgt.boxes[t]);
            if (iou > best) {
                best = iou;
                best_t = static_cast<int>(t);
            }
        }
        bool tp = false;
        if (best_t >= 0 && best >= iou_thr) {
            used[static_cast<size_t>(r.image)][static_cast<size_t>(best_t)] = true;
            tp = true;
        }
        out.push_back({r.box->score, r.order, tp});
    }
    return out;
}

double average_precision(const std::vector<FlaggedPred>& flags, int64_t total_targets,
                         APInterpolation interp) {
    if (total_targets == 0) return 0.0;
    std::vector<double> recalls, precisions;
    int64_t tp = 0, fp = 0;
    for (const auto& f : flags) {
        f.tp ? ++tp : ++fp;
        recalls.push_back(static_cast<double>(tp) / static_cast<double>(total_targets));
        precisions.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    // precision envelope from the right
    for (int i = static_cast<int>(precisions.size()) - 2; i >= 0; --i)
        precisions[static_cast<size_t>(i)] = std::max(precisions[static_cast<size_t>(i)], precisions[static_cast<size_t>(i) + 1]);

    if (interp == APInterpolation::Points101) {
        double acc = 0.0;
        for (int i = 0; i <= 100; ++i) {
            const double r = i / 100.0;
            const auto it = std::lower_bound(recalls.begin(), recalls.end(), r);
            if (it != recalls.end()) acc += precisions[static_cast<size_t>(it - recalls.begin())];
        }
        return acc / 101.0;
    }
    // all-point integral: sum of recall steps times interpolated precision
    double acc = 0.0, prev_r = 0.0;
    for (size_t i = 0; i < recalls.size(); ++i) {
        acc += (recalls[i] - prev_r) * precisions[i];
        prev_r = recalls[i];
    }
    return acc;
}

}  // namespace

MAPResult mean_average_precision(const std::vector<std::vector<ScoredBox>>& predictions,
                                 const std::vector<DetectionTargets>& targets,
                                 const std::vector<double>& iou_thresholds, APInterpolation interp) {
    if (predictions.size() != targets.size())
        throw DimensionError("mean_average_precision: predictions/targets image count mismatch");
    std::set<int> classes;
    for (const auto& t : targets)
        for (int l : t.labels) classes.insert(l);

    MAPResult result;
    if (classes.empty()) return result;

    double sum50 = 0.0, sum_all = 0.0;
    for (int cls : classes) {
        for (double thr : iou_thresholds) {
            int64_t total = 0;
            auto flags = match_class(predictions, targets, cls, thr, total);
            const double ap = average_precision(flags, total, interp);
            sum_all += ap;
            if (thr == iou_thresholds.front()) {
                result.per_class_ap50[cls] = ap;
                sum50 += ap;
            }
        }
    }
    result.map50 = sum50 / static_cast<double>(classes.size());
    result.map50_95 = sum_all / (static_cast<double>(classes.size()) * static_cast<double>(iou_thresholds.size()));
    return result;
}

MetricReport make_report(const std::vector<std::string>& ids, const std::vector<ImageQuality>& per_image) {
    if (ids.size() != per_image.size()) throw DimensionError("make_report: ids/metrics length mismatch");
    MetricReport report;
    report.ids = ids;
    report.per_image = per_image;
    for (const auto& q : per_image) {
        report.aggregate.en += q.en;
        report.aggregate.ag += q.ag;
        report.aggregate.sf += q.sf;
        report.aggregate.psnr += q.psnr;
    }
    if (!per_image.empty()) {
        const double n = static_cast<double>(per_image.size());
        report.aggregate.en /= n;
        report.aggregate.ag /= n;
        report.aggregate.sf /= n;
        report.aggregate.psnr /= n;
    }
    return report;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["aggregate"] = {{"ag", aggregate.ag}, {"en", aggregate.en}, {"psnr", aggregate.psnr}, {"sf", aggregate.sf}};
    j["per_image"] = nlohmann::json::array();
    for (size_t i = 0; i < per_image.size(); ++i)
        j["per_image"].push_back({{"ag", per_image[i].ag},
                                  {"en", per_image[i].en},
                                  {"id", ids[i]},
                                  {"psnr", per_image[i].psnr},
                                  {"sf", per_image[i].sf}});
    if (has_detection) {
        nlohmann::json per_class = nlohmann::json::object();
        for (const auto& [cls, ap] : detection.per_class_ap50) per_class[std::to_string(cls)] = ap;
        j["detection"] = {{"mAP50", detection.map50},
                          {"mAP50_95", detection.map50_95},
                          {"per_class_ap50", per_class}};
    }
    return j;
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %10s %10s %10s %10s\n", "image", "EN", "AG", "SF", "PSNR");
    os << line;
    for (size_t i = 0; i < per_image.size(); ++i) {
        std::snprintf(line, sizeof(line), "%-10s %10.4f %10.4f %10.4f %10.4f\n", ids[i].c_str(),
                      per_image[i].en, per_image[i].ag, per_image[i].sf, per_image[i].psnr);
        os << line;
    }
    std::snprintf(line, sizeof(line), "%-10s %10.4f %10.4f %10.4f %10.4f\n", "mean", aggregate.en,
                  aggregate.ag, aggregate.sf, aggregate.psnr);
    os << line;
    if (has_detection) {
        std::snprintf(line, sizeof(line), "mAP50 %.4f  mAP50-95 %.4f\n", detection.map50,
                      detection.map50_95);
        os << line;
        for (const auto& [cls, ap] : detection.per_class_ap50) {
            std::snprintf(line, sizeof(line), "  class %d AP50 %.4f\n", cls, ap);
            os << line;
        }
    }
    return os.str();
}

}  // namespace mambatrans
