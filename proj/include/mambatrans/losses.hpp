#pragma once

#include "mambatrans/detector.hpp"
#include "mambatrans/ops.hpp"

// TAC loss: lambda * Charbonnier reconstruction + theta * four-part
// detection loss from the frozen surrogate. The Charbonnier term pulls the
// translated image toward both the source fused image (alpha) and the
// visible reference (beta):
//   L = alpha * sum_i sqrt((I-f)_i^2 + eps^2) + beta * sum_i sqrt((I-v)_i^2 + eps^2)

namespace mambatrans {

struct CharbonnierConfig {
    double alpha = 0.5;
    double beta = 0.5;
    double eps = 1e-3;
    enum class Reduction { Sum, Mean };
    Reduction reduction = Reduction::Sum;

    void validate() const {
        if (!(eps > 0)) throw ConfigError("charbonnier: eps must be positive");
        if (alpha < 0 || beta < 0) throw ConfigError("charbonnier: alpha/beta must be >= 0");
    }
};

template <typename T>
Tensor<T> charbonnier_loss(const Tensor<T>& output, const Tensor<T>& fused, const Tensor<T>& visible,
                           const CharbonnierConfig& cfg) {
    cfg.validate();
    if (output.shape() != fused.shape() || output.shape() != visible.shape())
        throw DimensionError("charbonnier: all images must share a shape");
    const T eps2 = static_cast<T>(cfg.eps) * static_cast<T>(cfg.eps);
    auto penalty = [&](const Tensor<T>& ref) {
        auto d = sub(output, ref);
        return sum_all(sqrt(add_scalar(mul(d, d), eps2)));
    };
    auto loss = add(mul_scalar(penalty(fused), static_cast<T>(cfg.alpha)),
                    mul_scalar(penalty(visible), static_cast<T>(cfg.beta)));
    if (cfg.reduction == CharbonnierConfig::Reduction::Mean)
        loss = mul_scalar(loss, T(1) / static_cast<T>(output.numel()));
    return loss;
}

template <typename T>
struct TACConfig {
    CharbonnierConfig charbonnier;
    double lambda = 5.0;
    double theta = 1.0;
    const SurrogateDetector<T>* detector = nullptr;

    void validate() const {
        charbonnier.validate();
        if (lambda < 0 || theta < 0) throw ConfigError("tac: lambda/theta must be >= 0");
        if (!detector) throw ConfigError("tac: missing detector handle");
    }
};

template <typename T>
struct TACParts {
    Tensor<T> total;
    Tensor<T> charbonnier;
    DetectionLossParts<T> detection;
};

template <typename T>
TACParts<T> tac_loss(const Tensor<T>& output, const Tensor<T>& fused, const Tensor<T>& visible,
                     const DetectionTargets& targets, const TACConfig<T>& cfg) {
    cfg.validate();
    TACParts<T> parts;
    parts.charbonnier = charbonnier_loss(output, fused, visible, cfg.charbonnier);
    parts.detection = detection_loss(output, targets, *cfg.detector);
    parts.total = add(mul_scalar(parts.charbonnier, static_cast<T>(cfg.lambda)),
                      mul_scalar(parts.detection.total, static_cast<T>(cfg.theta)));
    return parts;
}

}  // namespace mambatrans
