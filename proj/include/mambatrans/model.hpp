#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mambatrans/blocks.hpp"
#include "mambatrans/serialize.hpp"

// The end-to-end translator: shallow conv features for image and mask, a
// learned token embedding standing in for the external text encoder, the
// MM-SSG stack, and a reconstruction conv head. With the head zeroed and
// residual output on, the model is exactly the identity on images.

namespace mambatrans {

inline constexpr const char* kModelMagic = "MTCKPT1";

struct ModelConfig {
    int feature_channels = 180;  // C
    int num_groups = 2;
    int blocks_per_group = 2;
    int state_dim = 8;
    int num_heads = 4;
    int text_vocab = 64;
    int text_embed_dim = 180;  // always equals feature_channels
    bool residual_output = true;

    int latent_channels() const { return 2 * feature_channels; }
    int total_blocks() const { return num_groups * blocks_per_group; }

    void validate() const {
        if (feature_channels < 1 || num_groups < 1 || blocks_per_group < 1 || state_dim < 1 ||
            num_heads < 1 || text_vocab < 1)
            throw ConfigError("model: all dimensions must be positive");
        if (feature_channels % num_heads != 0)
            throw ConfigError("model: feature_channels must be divisible by num_heads");
        if (text_embed_dim != feature_channels)
            throw ConfigError("model: text_embed_dim must equal feature_channels");
    }

    nlohmann::json to_json() const {
        return {{"blocks_per_group", blocks_per_group}, {"feature_channels", feature_channels},
                {"num_groups", num_groups},             {"num_heads", num_heads},
                {"residual_output", residual_output},   {"state_dim", state_dim},
                {"text_embed_dim", text_embed_dim},     {"text_vocab", text_vocab}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.blocks_per_group = j.at("blocks_per_group").get<int>();
        c.feature_channels = j.at("feature_channels").get<int>();
        c.num_groups = j.at("num_groups").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.residual_output = j.at("residual_output").get<bool>();
        c.state_dim = j.at("state_dim").get<int>();
        c.text_embed_dim = j.at("text_embed_dim").get<int>();
        c.text_vocab = j.at("text_vocab").get<int>();
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct TranslatorModel {
    ModelConfig config;
    Conv2dLayer<T> img_conv;    // 3 -> C
    Conv2dLayer<T> mask_conv;   // 1 -> C, channel-aligned with img_conv
    Tensor<T> text_embedding;   // [vocab x C]
    std::vector<MMSSBWeights<T>> blocks;
    Conv2dLayer<T> recon_conv;  // C -> 3, zero-initialized

    ParamList<T> parameters() const {
        ParamList<T> out;
        img_conv.collect("img_conv", out);
        mask_conv.collect("mask_conv", out);
        out.emplace_back("text_embedding", text_embedding);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + std::to_string(i), out);
        recon_conv.collect("recon_conv", out);
        return out;
    }
};

template <typename T>
TranslatorModel<T> make_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const int C = config.feature_channels;
    TranslatorModel<T> m;
    m.config = config;
    m.img_conv = Conv2dLayer<T>::make(3, 3, C, 1, 1, rng);
    m.mask_conv = Conv2dLayer<T>::make(3, 1, C, 1, 1, rng);
    m.text_embedding = Tensor<T>::zeros({config.text_vocab, C}, true);
    fill_fan_in(m.text_embedding, rng, C);
    m.blocks.reserve(static_cast<size_t>(config.total_blocks()));
    for (int i = 0; i < config.total_blocks(); ++i)
        m.blocks.push_back(
            MMSSBWeights<T>::make(C, config.latent_channels(), config.state_dim, config.num_heads, rng));
    m.recon_conv = Conv2dLayer<T>::make(3, C, 3, 1, 1, rng);
    // zero head: the residual model starts as the identity map
    std::fill(m.recon_conv.kernel.data().begin(), m.recon_conv.kernel.data().end(), T(0));
    return m;
}

template <typename T>
void init_weights(TranslatorModel<T>& model, uint64_t seed) {
    model = make_model<T>(model.config, seed);
}

template <typename T>
struct ShallowFeatures {
    Tensor<T> image;  // [H x W x C]
    Tensor<T> mask;   // [H x W x C]
    Tensor<T> text;   // [L_t x C]
};

template <typename T>
ShallowFeatures<T> extract_shallow(const TranslatorModel<T>& model, const Tensor<T>& fused,
                                   const Tensor<T>& voted_mask, const std::vector<int>& text_ids) {
    if (fused.rank() != 3 || fused.dim(2) != 3) throw DimensionError("extract_shallow: fused must be [H x W x 3]");
    const int H = fused.dim(0), W = fused.dim(1);
    if (H < 8 || W < 8) throw ContractError("extract_shallow: H and W must be >= 8");
    if (voted_mask.rank() != 3 || voted_mask.dim(0) != H || voted_mask.dim(1) != W || voted_mask.dim(2) != 1)
        throw DimensionError("extract_shallow: voted mask must be [H x W x 1]");
    if (text_ids.empty()) throw DataError("extract_shallow: empty text sequence");
    if (text_ids.size() > 64) throw DataError("extract_shallow: text sequence longer than 64 tokens");
    ShallowFeatures<T> f;
    f.image = model.img_conv.apply(fused);
    f.mask = model.mask_conv.apply(voted_mask);
    f.text = embedding(model.text_embedding, text_ids);
    return f;
}

// Stride-1 patch embedding: token k is the feature at (k div W, k mod W).
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& fmap) {
    if (fmap.rank() != 3) throw DimensionError("patch_embed: expected [H x W x C]");
    return reshape(fmap, {fmap.dim(0) * fmap.dim(1), fmap.dim(2)});
}

template <typename T>
Tensor<T> patch_unembed(const Tensor<T>& seq, int H, int W) {
    if (seq.rank() != 2) throw DimensionError("patch_unembed: expected [(H*W) x C]");
    if (seq.dim(0) != H * W)
        throw DimensionError("patch_unembed: token count " + std::to_string(seq.dim(0)) +
                             " does not match " + std::to_string(H) + "x" + std::to_string(W));
    return reshape(seq, {H, W, seq.dim(1)});
}

// Full pipeline. Training keeps the unclamped output so gradients pass the
// [0,1] boundary; inference clamps.
template <typename T>
Tensor<T> translate(const TranslatorModel<T>& model, const Tensor<T>& fused, const Tensor<T>& voted_mask,
                    const std::vector<int>& text_ids, bool training = false) {
    auto shallow = extract_shallow(model, fused, voted_mask, text_ids);
    const int H = fused.dim(0), W = fused.dim(1);
    auto target_mask = reshape(voted_mask, {H, W});
    MMSSGConfig stack_cfg{model.config.blocks_per_group, model.config.num_groups};
    auto features = mm_ssg_stack(shallow.image, shallow.mask, shallow.text, target_mask, stack_cfg,
                                 model.blocks);
    auto delta = model.recon_conv.apply(features);
    auto out = model.config.residual_output ? add(fused, delta) : delta;
    if (!training) out = clamp01(out);
    return out;
}

template <typename T>
void save_model(const std::string& path, const TranslatorModel<T>& model) {
    const std::string header = model.config.to_json().dump();
    auto params = model.parameters();
    std::vector<std::pair<std::string, const Tensor<T>*>> records;
    records.reserve(params.size());
    for (const auto& [name, t] : params) records.emplace_back(name, &t);
    write_checkpoint(path, kModelMagic, header, records);
}

template <typename T>
TranslatorModel<T> load_model(const std::string& path) {
    auto ckpt = read_checkpoint<T>(path, kModelMagic);
    ModelConfig config = ModelConfig::from_json(nlohmann::json::parse(ckpt.header));
    TranslatorModel<T> model = make_model<T>(config, 0);
    auto params = model.parameters();
    if (params.size() != ckpt.records.size())
        throw DataError("checkpoint " + path + ": expected " + std::to_string(params.size()) +
                        " records, found " + std::to_string(ckpt.records.size()));
    for (auto& [name, t] : params) {
        auto it = ckpt.records.find(name);
        if (it == ckpt.records.end()) throw DataError("checkpoint " + path + ": missing record " + name);
        if (it->second.shape() != t.shape())
            throw DataError("checkpoint " + path + ": shape mismatch for " + name);
        t.data() = it->second.data();
    }
    return model;
}

}  // namespace mambatrans
