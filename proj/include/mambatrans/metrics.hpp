#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mambatrans/detector.hpp"
#include "mambatrans/tensor.hpp"

// Image-quality metrics (entropy, average gradient, spatial frequency,
// PSNR) over 8-bit luma, plus detection mAP with greedy score-ordered
// matching. AP uses 101-point interpolation (the COCO convention) for the
// reported numbers; the exact all-point integral is also available.

namespace mambatrans {

struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // quantized luma, 0..255 integers stored as double
};

// luma = 0.299 R + 0.587 G + 0.114 B on the 255 scale, rounded to 8 bits.
GrayImage to_luma(const Tensor<float>& rgb);

// Shannon entropy in bits of the 256-bin histogram; empty bins contribute 0.
double entropy_en(const GrayImage& img);

// sqrt(RF^2 + CF^2): RMS of horizontal and vertical first differences.
double spatial_frequency(const GrayImage& img);

// Mean over interior pixels of sqrt((dx^2 + dy^2) / 2), forward differences.
double avg_gradient(const GrayImage& img);

// 10 log10(255^2 / MSE) on [0,1] inputs mapped to the 255 range; identical
// inputs return the documented 100 dB cap.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

struct ScoredBox {
    Box box;
    int label = 0;
    double score = 0.0;
};

enum class APInterpolation { Points101, AllPoint };

struct MAPResult {
    double map50 = 0.0;
    double map50_95 = 0.0;
    std::map<int, double> per_class_ap50;
};

std::vector<double> coco_iou_thresholds();  // 0.5 : 0.05 : 0.95

// Greedy one-to-one matching in descending score order (ties by input
// order); classes absent from the targets are excluded from the means.
MAPResult mean_average_precision(const std::vector<std::vector<ScoredBox>>& predictions,
                                 const std::vector<DetectionTargets>& targets,
                                 const std::vector<double>& iou_thresholds,
                                 APInterpolation interp = APInterpolation::Points101);

struct ImageQuality {
    double en = 0.0;
    double ag = 0.0;
    double sf = 0.0;
    double psnr = 0.0;
};

struct MetricReport {
    std::vector<std::string> ids;
    std::vector<ImageQuality> per_image;
    ImageQuality aggregate;
    bool has_detection = false;
    MAPResult detection;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

MetricReport make_report(const std::vector<std::string>& ids, const std::vector<ImageQuality>& per_image);

}  // namespace mambatrans
