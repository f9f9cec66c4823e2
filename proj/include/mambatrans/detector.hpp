#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mambatrans/nn.hpp"
#include "mambatrans/ops.hpp"
#include "mambatrans/serialize.hpp"

// Tiny frozen surrogate detector with the four-part loss decomposition of a
// two-stage detector: a proposal head (objectness -> L_obj, box regression
// -> L_rpn) and a classification head (class logits -> L_cls, refined box
// regression -> L_bbox) over a single-scale anchor grid at stride 8.
//
// Anchor matching depends only on targets and geometry, never on the image,
// so the loss is smooth in the image and in the detector parameters away
// from the (measure-zero) IoU threshold boundaries.

namespace mambatrans {

inline constexpr const char* kDetectorMagic = "MTDET1";

struct DetectorConfig {
    int num_classes = 3;
    int base_channels = 8;
    int mid_channels = 16;
    double anchor_size = 16.0;
    double iou_positive = 0.5;
    double iou_negative = 0.4;

    void validate() const {
        if (num_classes < 1 || base_channels < 1 || mid_channels < 1)
            throw ConfigError("detector: channel/class counts must be positive");
        if (!(anchor_size > 0) || !(iou_negative <= iou_positive) || !(iou_positive <= 1))
            throw ConfigError("detector: bad anchor/matching configuration");
    }

    nlohmann::json to_json() const {
        return {{"anchor_size", anchor_size},   {"base_channels", base_channels},
                {"iou_negative", iou_negative}, {"iou_positive", iou_positive},
                {"mid_channels", mid_channels}, {"num_classes", num_classes}};
    }

    static DetectorConfig from_json(const nlohmann::json& j) {
        DetectorConfig c;
        c.anchor_size = j.at("anchor_size").get<double>();
        c.base_channels = j.at("base_channels").get<int>();
        c.iou_negative = j.at("iou_negative").get<double>();
        c.iou_positive = j.at("iou_positive").get<double>();
        c.mid_channels = j.at("mid_channels").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
        c.validate();
        return c;
    }

    bool operator==(const DetectorConfig&) const = default;
};

using Box = std::array<double, 4>;  // x1, y1, x2, y2 in pixels

inline double box_iou(const Box& a, const Box& b) {
    const double ix1 = std::max(a[0], b[0]), iy1 = std::max(a[1], b[1]);
    const double ix2 = std::min(a[2], b[2]), iy2 = std::min(a[3], b[3]);
    const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
    const double inter = iw * ih;
    const double area_a = std::max(0.0, a[2] - a[0]) * std::max(0.0, a[3] - a[1]);
    const double area_b = std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
    const double uni = area_a + area_b - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct DetectionTargets {
    std::vector<Box> boxes;
    std::vector<int> labels;
    int width = 0;
    int height = 0;

    void validate(int num_classes) const {
        if (boxes.size() != labels.size()) throw DataError("targets: boxes/labels length mismatch");
        for (const auto& b : boxes)
            if (!(0 <= b[0] && b[0] < b[2] && b[2] <= width && 0 <= b[1] && b[1] < b[3] && b[3] <= height))
                throw DataError("targets: box outside image or degenerate");
        for (int l : labels)
            if (l < 0 || l >= num_classes) throw DataError("targets: label outside class range");
    }
};

template <typename T>
struct SurrogateDetector {
    DetectorConfig config;
    Conv2dLayer<T> conv1;          // 3 -> base, stride 2
    Conv2dLayer<T> conv2;          // base -> mid, stride 2
    Conv2dLayer<T> conv3;          // mid -> mid, stride 2
    Conv2dLayer<T> proposal_head;  // 1x1: objectness + 4 deltas
    Conv2dLayer<T> cls_head;       // 1x1: num_classes + 4 refined deltas

    ParamList<T> parameters() const {
        ParamList<T> out;
        conv1.collect("conv1", out);
        conv2.collect("conv2", out);
        conv3.collect("conv3", out);
        proposal_head.collect("proposal_head", out);
        cls_head.collect("cls_head", out);
        return out;
    }

    void set_frozen(bool frozen) {
        auto params = parameters();
        set_requires_grad(params, !frozen);
    }

    bool frozen() const { return !conv1.kernel.requires_grad(); }
};

template <typename T>
SurrogateDetector<T> make_detector(const DetectorConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    SurrogateDetector<T> d;
    d.config = config;
    d.conv1 = Conv2dLayer<T>::make(3, 3, config.base_channels, 2, 1, rng);
    d.conv2 = Conv2dLayer<T>::make(3, config.base_channels, config.mid_channels, 2, 1, rng);
    d.conv3 = Conv2dLayer<T>::make(3, config.mid_channels, config.mid_channels, 2, 1, rng);
    d.proposal_head = Conv2dLayer<T>::make(1, config.mid_channels, 1 + 4, 1, 0, rng);
    d.cls_head = Conv2dLayer<T>::make(1, config.mid_channels, config.num_classes + 4, 1, 0, rng);
    return d;
}

namespace detail {

// Anchor geometry for an H x W input given the detector's feature grid.
inline std::vector<Box> make_anchors(int H, int W, int gh, int gw, double anchor_size) {
    std::vector<Box> anchors;
    anchors.reserve(static_cast<size_t>(gh) * gw);
    const double sy = static_cast<double>(H) / gh;
    const double sx = static_cast<double>(W) / gw;
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            const double cx = (gx + 0.5) * sx;
            const double cy = (gy + 0.5) * sy;
            anchors.push_back({cx - anchor_size / 2, cy - anchor_size / 2, cx + anchor_size / 2,
                               cy + anchor_size / 2});
        }
    return anchors;
}

// -1 negative, -2 ignored, >= 0 index of the matched target.
inline std::vector<int> match_anchors(const std::vector<Box>& anchors, const DetectionTargets& targets,
                                      double iou_pos, double iou_neg) {
    std::vector<int> match(anchors.size(), -1);
    for (size_t a = 0; a < anchors.size(); ++a) {
        double best = 0.0;
        int best_t = -1;
        for (size_t t = 0; t < targets.boxes.size(); ++t) {
            const double iou = box_iou(anchors[a], targets.boxes[t]);
            if (iou > best) {
                best = iou;
                best_t = static_cast<int>(t);
            }
        }
        if (best >= iou_pos)
            match[a] = best_t;
        else if (best >= iou_neg)
            match[a] = -2;
    }
    return match;
}

inline std::array<double, 4> encode_box(const Box& anchor, const Box& target) {
    const double aw = anchor[2] - anchor[0], ah = anchor[3] - anchor[1];
    const double acx = (anchor[0] + anchor[2]) / 2, acy = (anchor[1] + anchor[3]) / 2;
    const double gw = target[2] - target[0], gh = target[3] - target[1];
    const double gcx = (target[0] + target[2]) / 2, gcy = (target[1] + target[3]) / 2;
    return {(gcx - acx) / aw, (gcy - acy) / ah, std::log(gw / aw), std::log(gh / ah)};
}

inline Box decode_box(const Box& anchor, const std::array<double, 4>& delta) {
    const double aw = anchor[2] - anchor[0], ah = anchor[3] - anchor[1];
    const double acx = (anchor[0] + anchor[2]) / 2, acy = (anchor[1] + anchor[3]) / 2;
    const double cx = acx + delta[0] * aw, cy = acy + delta[1] * ah;
    const double w = aw * std::exp(std::min(delta[2], 4.0)), h = ah * std::exp(std::min(delta[3], 4.0));
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

template <typename T>
struct DetectorMaps {
    Tensor<T> proposal;  // [A x 5]
    Tensor<T> cls;       // [A x (K+4)]
    int gh = 0, gw = 0;
};

template <typename T>
DetectorMaps<T> detector_forward(const SurrogateDetector<T>& det, const Tensor<T>& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw DimensionError("detector: image must be [H x W x 3]");
    auto feat = silu(det.conv3.apply(silu(det.conv2.apply(silu(det.conv1.apply(image))))));
    auto prop = det.proposal_head.apply(feat);
    auto cls = det.cls_head.apply(feat);
    DetectorMaps<T> maps;
    maps.gh = prop.dim(0);
    maps.gw = prop.dim(1);
    maps.proposal = reshape(prop, {maps.gh * maps.gw, 5});
    maps.cls = reshape(cls, {maps.gh * maps.gw, det.config.num_classes + 4});
    return maps;
}

}  // namespace detail

template <typename T>
struct DetectionLossParts {
    Tensor<T> total;
    Tensor<T> cls;
    Tensor<T> bbox;
    Tensor<T> obj;
    Tensor<T> rpn;
};

// Four-component detection loss. cls: cross-entropy on matched anchors;
// bbox/rpn: smooth-L1 box regression on the classification and proposal
// heads; obj: binary cross-entropy on objectness over non-ignored anchors.
// All sums; total == cls + bbox + obj + rpn by construction.
template <typename T>
DetectionLossParts<T> detection_loss(const Tensor<T>& image, const DetectionTargets& targets,
                                     const SurrogateDetector<T>& det) {
    targets.validate(det.config.num_classes);
    if (image.dim(0) != targets.height || image.dim(1) != targets.width)
        throw DimensionError("detection_loss: target image size mismatch");
    auto maps = detail::detector_forward(det, image);
    const auto anchors = detail::make_anchors(image.dim(0), image.dim(1), maps.gh, maps.gw,
                                              det.config.anchor_size);
    const auto match = detail::match_anchors(anchors, targets, det.config.iou_positive,
                                             det.config.iou_negative);

    std::vector<int> scored;    // non-ignored anchor rows for objectness
    std::vector<T> obj_target;
    std::vector<int> positive;  // matched anchor rows
    std::vector<int> pos_labels;
    std::vector<T> box_targets;
    for (size_t a = 0; a < match.size(); ++a) {
        if (match[a] == -2) continue;
        scored.push_back(static_cast<int>(a));
        obj_target.push_back(match[a] >= 0 ? T(1) : T(0));
        if (match[a] >= 0) {
            positive.push_back(static_cast<int>(a));
            pos_labels.push_back(targets.labels[static_cast<size_t>(match[a])]);
            const auto enc = detail::encode_box(anchors[a], targets.boxes[static_cast<size_t>(match[a])]);
            for (double v : enc) box_targets.push_back(static_cast<T>(v));
        }
    }

    // objectness BCE: softplus(z) - y * z, summed
    auto obj_rows = select_rows(maps.proposal, scored);
    auto z = slice_last(obj_rows, 0, 1);
    auto y = Tensor<T>::from_data({static_cast<int>(obj_target.size()), 1}, obj_target);
    auto obj = sum_all(sub(softplus(z), mul(z, y)));

    const int M = static_cast<int>(positive.size());
    Tensor<T> cls, bbox, rpn;
    if (M > 0) {
        auto enc = Tensor<T>::from_data({M, 4}, box_targets);
        auto prop_rows = select_rows(maps.proposal, positive);
        rpn = sum_all(smooth_l1(sub(slice_last(prop_rows, 1, 5), enc)));
        auto cls_rows = select_rows(maps.cls, positive);
        auto logits = slice_last(cls_rows, 0, det.config.num_classes);
        cls = neg(sum_all(gather_lastdim(log_softmax_lastdim(logits), pos_labels)));
        bbox = sum_all(smooth_l1(
            sub(slice_last(cls_rows, det.config.num_classes, det.config.num_classes + 4), enc)));
    } else {
        cls = Tensor<T>::zeros({1});
        bbox = Tensor<T>::zeros({1});
        rpn = Tensor<T>::zeros({1});
    }

    DetectionLossParts<T> parts;
    parts.cls = cls;
    parts.bbox = bbox;
    parts.obj = obj;
    parts.rpn = rpn;
    parts.total = add(add(cls, bbox), add(obj, rpn));
    return parts;
}

struct Detection {
    Box box;
    int label = 0;
    double score = 0.0;
};

// Inference decode with per-class greedy NMS; used by evaluation, never by
// the loss path.
template <typename T>
std::vector<Detection> detect(const SurrogateDetector<T>& det, const Tensor<T>& image,
                              double score_threshold = 0.05, double nms_iou = 0.5) {
    auto maps = detail::detector_forward(det, image);
    const auto anchors = detail::make_anchors(image.dim(0), image.dim(1), maps.gh, maps.gw,
                                              det.config.anchor_size);
    const int K = det.config.num_classes;
    std::vector<Detection> raw;
    for (size_t a = 0; a < anchors.size(); ++a) {
        const T* prow = maps.proposal.data().data() + a * 5;
        const T* crow = maps.cls.data().data() + a * (K + 4);
        const double objness = 1.0 / (1.0 + std::exp(-static_cast<double>(prow[0])));
        double mx = crow[0];
        for (int k = 1; k < K; ++k) mx = std::max<double>(mx, crow[k]);
        double denom = 0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(crow[k]) - mx);
        int best_k = 0;
        double best_p = 0;
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(crow[k]) - mx) / denom;
            if (p > best_p) {
                best_p = p;
                best_k = k;
            }
        }
        const double score = objness * best_p;
        if (score < score_threshold) continue;
        std::array<double, 4> delta = {static_cast<double>(crow[K + 0]), static_cast<double>(crow[K + 1]),
                                       static_cast<double>(crow[K + 2]), static_cast<double>(crow[K + 3])};
        raw.push_back({detail::decode_box(anchors[a], delta), best_k, score});
    }
    std::stable_sort(raw.begin(), raw.end(), [](const Detection& a, const Detection& b) {
        return a.score > b.score;
    });
    std::vector<Detection> kept;
    for (const auto& d : raw) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.label == d.label && box_iou(k.box, d.box) >= nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

template <typename T>
void save_detector(const std::string& path, const SurrogateDetector<T>& det) {
    const std::string header = det.config.to_json().dump();
    auto params = det.parameters();
    std::vector<std::pair<std::string, const Tensor<T>*>> records;
    for (const auto& [name, t] : params) records.emplace_back(name, &t);
    write_checkpoint(path, kDetectorMagic, header, records);
}

// Loads frozen: parameters never receive gradients until unfrozen.
template <typename T>
SurrogateDetector<T> load_detector(const std::string& path) {
    auto ckpt = read_checkpoint<T>(path, kDetectorMagic);
    DetectorConfig config = DetectorConfig::from_json(nlohmann::json::parse(ckpt.header));
    SurrogateDetector<T> det = make_detector<T>(config, 0);
    auto params = det.parameters();
    if (params.size() != ckpt.records.size())
        throw DataError("detector checkpoint " + path + ": record count mismatch");
    for (auto& [name, t] : params) {
        auto it = ckpt.records.find(name);
        if (it == ckpt.records.end()) throw DataError("detector checkpoint " + path + ": missing " + name);
        if (it->second.shape() != t.shape())
            throw DataError("detector checkpoint " + path + ": shape mismatch for " + name);
        t.data() = it->second.data();
    }
    det.set_frozen(true);
    return det;
}

}  // namespace mambatrans
