#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mambatrans/data.hpp"
#include "mambatrans/losses.hpp"
#include "mambatrans/model.hpp"

// Optimization loop: bias-corrected Adam, milestone LR halving, label-
// consistent augmentation, CSV loss curves and deterministic checkpointing.
// The surrogate detector is pre-trained here as a separate step, then
// frozen for translator training.

namespace mambatrans {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 2;
    std::vector<int> milestones;  // empty = constant lr
    int max_steps = 500;
    uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int crop = 0;  // 0 disables flip/crop augmentation
    int checkpoint_every = 0;
    std::string checkpoint_dir;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("train: lr must be positive");
        if (batch_size < 1 || max_steps < 0) throw ConfigError("train: bad batch size or step count");
        for (size_t i = 1; i < milestones.size(); ++i)
            if (milestones[i] <= milestones[i - 1])
                throw ConfigError("train: milestones must be strictly increasing");
    }
};

// Default two-stage decay at 50% and 75% of the budget.
inline std::vector<int> default_milestones(int max_steps) {
    const int first = max_steps / 2, second = (3 * max_steps) / 4;
    std::vector<int> m;
    if (first >= 1) m.push_back(first);
    if (second > first) m.push_back(second);
    return m;
}

// lr * 2^-(number of milestones <= step); non-increasing in step.
inline double lr_at(int step, const TrainConfig& cfg) {
    int passed = 0;
    for (int m : cfg.milestones)
        if (m <= step) ++passed;
    return cfg.lr * std::pow(2.0, -passed);
}

// Standard bias-corrected Adam over a named parameter list.
template <typename T>
class Adam {
public:
    Adam(ParamList<T> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].second.data().size(), 0.0);
            v_[i].assign(params_[i].second.data().size(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].second.data();
            const auto& g = params_[i].second.grad();
            for (size_t j = 0; j < p.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                if (!std::isfinite(gj))
                    throw NumericError("adam: non-finite gradient in " + params_[i].first +
                                       " at coordinate " + std::to_string(j));
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    int64_t step_count() const { return t_; }
    const std::vector<double>& first_moment(size_t i) const { return m_[i]; }

private:
    ParamList<T> params_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

struct LossRecord {
    int step = 0;
    double total = 0, charbonnier = 0, cls = 0, bbox = 0, obj = 0, rpn = 0, lr = 0;
};

struct TrainResult {
    std::vector<LossRecord> curve;
};

struct TACWeights {
    CharbonnierConfig charbonnier;
    double lambda = 5.0;
    double theta = 1.0;
};

// Translator training: per step sample batch -> augment -> translate ->
// TAC loss -> backward -> Adam. Deterministic in (seed, config, dataset).
TrainResult train(TranslatorModel<float>& model, const DatasetManifest& data,
                  const SurrogateDetector<float>& detector, const TACWeights& loss_cfg,
                  const TrainConfig& cfg);

// Surrogate pre-training on visible images + boxes; freezes the result.
TrainResult pretrain_detector(SurrogateDetector<float>& detector, const DatasetManifest& data,
                              const TrainConfig& cfg);

// Summed TAC loss over a split with unaugmented samples (training-mode
// forward, so values are comparable with the curve).
double dataset_tac_loss(const TranslatorModel<float>& model, const DatasetManifest& data,
                        const std::string& split, const SurrogateDetector<float>& detector,
                        const TACWeights& loss_cfg);

// Summed detection loss over a split; translated=true runs the inference
// path (clamped output) through the translator first, otherwise the raw
// fused images are scored.
double dataset_detection_loss(const DatasetManifest& data, const std::string& split,
                              const SurrogateDetector<float>& detector,
                              const TranslatorModel<float>* translator);

void write_loss_curve_csv(const std::string& path, const std::vector<LossRecord>& curve);

}  // namespace mambatrans
