#include "mambatrans/trainer.hpp"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace mambatrans {

namespace {

uint64_t derive_seed(uint64_t base, uint64_t step, uint64_t slot) {
    return splitmix64(splitmix64(base ^ 0x7ad870c830358979ull) ^ (step * 1315423911ull + slot));
}

// Deterministic epoch shuffling over the train split.
class BatchSampler {
public:
    BatchSampler(std::vector<int> indices, uint64_t seed) : indices_(std::move(indices)), rng_(seed) {
        if (indices_.empty()) throw DataError("train: no samples in the train split");
        reshuffle();
    }

    int next() {
        if (cursor_ == indices_.size()) {
            reshuffle();
            cursor_ = 0;
        }
        return indices_[cursor_++];
    }

private:
    void reshuffle() {
        for (size_t i = indices_.size() - 1; i > 0; --i)
            std::swap(indices_[i], indices_[static_cast<size_t>(rng_.uniform_int(static_cast<int64_t>(i) + 1))]);
    }

    std::vector<int> indices_;
    Rng rng_;
    size_t cursor_ = 0;
};

}  // namespace

TrainResult train(TranslatorModel<float>& model, const DatasetManifest& data,
                  const SurrogateDetector<float>& detector, const TACWeights& loss_cfg,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (!detector.frozen()) throw ContractError("train: detector must be frozen during translator training");

    auto train_idx = data.split_indices("train");
    std::vector<Sample> samples;
    samples.reserve(train_idx.size());
    for (int i : train_idx) samples.push_back(load_sample(data, i));
    BatchSampler sampler(std::vector<int>(train_idx.begin(), train_idx.end()), cfg.seed);
    // map dataset index -> local cache slot
    std::vector<int> slot_of(data.entries.size(), -1);
    for (size_t k = 0; k < train_idx.size(); ++k) slot_of[static_cast<size_t>(train_idx[k])] = static_cast<int>(k);

    Adam<float> adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    TACConfig<float> tac_cfg;
    tac_cfg.charbonnier = loss_cfg.charbonnier;
    tac_cfg.lambda = loss_cfg.lambda;
    tac_cfg.theta = loss_cfg.theta;
    tac_cfg.detector = &detector;

    TrainResult result;
    result.curve.reserve(static_cast<size_t>(cfg.max_steps));
    for (int step = 0; step < cfg.max_steps; ++step) {
        GradTape<float> tape;
        LossRecord rec;
        rec.step = step;
        rec.lr = lr_at(step, cfg);
        Tensor<float> batch_loss;
        {
            TapeScope<float> scope(tape);
            for (int b = 0; b < cfg.batch_size; ++b) {
                const int idx = sampler.next();
                const Sample& base = samples[static_cast<size_t>(slot_of[static_cast<size_t>(idx)])];
                Sample item = cfg.crop > 0
                                  ? augment(base, derive_seed(cfg.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(b)), cfg.crop)
                                  : base;
                auto mask3 = reshape(item.voted_mask, {item.height, item.width, 1});
                auto out = translate(model, item.fused, mask3, item.text_ids, /*training=*/true);
                auto parts = tac_loss(out, item.fused, item.visible, item.det_targets, tac_cfg);
                rec.total += parts.total.item();
                rec.charbonnier += parts.charbonnier.item();
                rec.cls += parts.detection.cls.item();
                rec.bbox += parts.detection.bbox.item();
                rec.obj += parts.detection.obj.item();
                rec.rpn += parts.detection.rpn.item();
                batch_loss = b == 0 ? parts.total : add(batch_loss, parts.total);
            }
            batch_loss = mul_scalar(batch_loss, 1.0f / static_cast<float>(cfg.batch_size));
            backward(batch_loss, tape);
        }
        const double inv = 1.0 / cfg.batch_size;
        rec.total *= inv;
        rec.charbonnier *= inv;
        rec.cls *= inv;
        rec.bbox *= inv;
        rec.obj *= inv;
        rec.rpn *= inv;
        if (!std::isfinite(rec.total))
            throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                               " (charbonnier=" + std::to_string(rec.charbonnier) +
                               ", cls=" + std::to_string(rec.cls) + ", bbox=" + std::to_string(rec.bbox) +
                               ", obj=" + std::to_string(rec.obj) + ", rpn=" + std::to_string(rec.rpn) + ")");
        adam.step(rec.lr);
        result.curve.push_back(rec);

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (step + 1) % cfg.checkpoint_every == 0)
            save_model((fs::path(cfg.checkpoint_dir) / ("ckpt_step" + std::to_string(step + 1) + ".ckpt")).string(),
                       model);
    }
    if (!cfg.checkpoint_dir.empty()) {
        fs::create_directories(cfg.checkpoint_dir);
        save_model((fs::path(cfg.checkpoint_dir) / "model_final.ckpt").string(), model);
    }
    return result;
}

TrainResult pretrain_detector(SurrogateDetector<float>& detector, const DatasetManifest& data,
                              const TrainConfig& cfg) {
    cfg.validate();
    detector.set_frozen(false);
    auto train_idx = data.split_indices("train");
    std::vector<Sample> samples;
    for (int i : train_idx) samples.push_back(load_sample(data, i));
    BatchSampler sampler(std::vector<int>(train_idx.begin(), train_idx.end()), cfg.seed);
    std::vector<int> slot_of(data.entries.size(), -1);
    for (size_t k = 0; k < train_idx.size(); ++k) slot_of[static_cast<size_t>(train_idx[k])] = static_cast<int>(k);

    Adam<float> adam(detector.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    TrainResult result;
    for (int step = 0; step < cfg.max_steps; ++step) {
        GradTape<float> tape;
        LossRecord rec;
        rec.step = step;
        rec.lr = lr_at(step, cfg);
        Tensor<float> batch_loss;
        {
            TapeScope<float> scope(tape);
            for (int b = 0; b < cfg.batch_size; ++b) {
                const int idx = sampler.next();
                const Sample& base = samples[static_cast<size_t>(slot_of[static_cast<size_t>(idx)])];
                Sample item = cfg.crop > 0
                                  ? augment(base, derive_seed(cfg.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(b)), cfg.crop)
                                  : base;
                auto parts = detection_loss(item.visible, item.det_targets, detector);
                rec.total += parts.total.item();
                rec.cls += parts.cls.item();
                rec.bbox += parts.bbox.item();
                rec.obj += parts.obj.item();
                rec.rpn += parts.rpn.item();
                batch_loss = b == 0 ? parts.total : add(batch_loss, parts.total);
            }
            batch_loss = mul_scalar(batch_loss, 1.0f / static_cast<float>(cfg.batch_size));
            backward(batch_loss, tape);
        }
        const double inv = 1.0 / cfg.batch_size;
        rec.total *= inv;
        rec.cls *= inv;
        rec.bbox *= inv;
        rec.obj *= inv;
        rec.rpn *= inv;
        if (!std::isfinite(rec.total))
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        adam.step(rec.lr);
        result.curve.push_back(rec);
    }
    detector.set_frozen(true);
    return result;
}

double dataset_tac_loss(const TranslatorModel<float>& model, const DatasetManifest& data,
                        const std::string& split, const SurrogateDetector<float>& detector,
                        const TACWeights& loss_cfg) {
    TACConfig<float> tac_cfg;
    tac_cfg.charbonnier = loss_cfg.charbonnier;
    tac_cfg.lambda = loss_cfg.lambda;
    tac_cfg.theta = loss_cfg.theta;
    tac_cfg.detector = &detector;
    double total = 0;
    for (int i : data.split_indices(split)) {
        Sample s = load_sample(data, i);
        auto mask3 = reshape(s.voted_mask, {s.height, s.width, 1});
        auto out = translate(model, s.fused, mask3, s.text_ids, /*training=*/true);
        total += tac_loss(out, s.fused, s.visible, s.det_targets, tac_cfg).total.item();
    }
    return total;
}

double dataset_detection_loss(const DatasetManifest& data, const std::string& split,
                              const SurrogateDetector<float>& detector,
                              const TranslatorModel<float>* translator) {
    double total = 0;
    for (int i : data.split_indices(split)) {
        Sample s = load_sample(data, i);
        Tensor<float> image = s.fused;
        if (translator) {
            auto mask3 = reshape(s.voted_mask, {s.height, s.width, 1});
            image = translate(*translator, s.fused, mask3, s.text_ids, /*training=*/false);
        }
        total += detection_loss(image, s.det_targets, detector).total.item();
    }
    return total;
}

void write_loss_curve_csv(const std::string& path, const std::vector<LossRecord>& curve) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write loss curve: " + path);
    os << "step,total,charbonnier,cls,bbox,obj,rpn,lr\n";
    char line[256];
    for (const auto& r : curve) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.total,
                      r.charbonnier, r.cls, r.bbox, r.obj, r.rpn, r.lr);
        os << line;
    }
}

}  // namespace mambatrans
