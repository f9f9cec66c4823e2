#pragma once

#include <array>
#include <string>
#include <vector>

#include "mambatrans/attention.hpp"
#include "mambatrans/nn.hpp"
#include "mambatrans/ssm.hpp"

// TV-SSM (image/mask dual branch + 3D-Selective Scan), MM-SSB residual
// block and MM-SSG stacking. Block wiring:
//   Z = TV_SSM(LN1(F_I), F_mask, F_text) + s * LN1(F_I)
//   out = MMCA(post_conv(LN2(Z)), F_mask, F_text) + Z
// with both residual adds taken on the un-normalized Z.

namespace mambatrans {

namespace detail {

// Pointwise linear over a channel-last feature map.
template <typename T>
Tensor<T> project_map(const Linear<T>& lin, const Tensor<T>& fmap) {
    const int H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
    auto out = lin.apply(reshape(fmap, {H * W, C}));
    return reshape(out, {H, W, out.dim(1)});
}

}  // namespace detail

template <typename T>
struct TVSSMWeights {
    Linear<T> image_in_proj;  // C -> C_latent
    Linear<T> mask_in_proj;   // C -> C_latent (shared latent space with the image branch)
    Linear<T> text_in_proj;   // C -> C_latent so the text scan runs in the same space
    DepthwiseConvLayer<T> pre_scan_conv;       // 3x3 depthwise on the image branch
    std::array<SSMParams<T>, 4> spatial_scan;  // one per direction, independent by default
    SSMParams<T> text_scan;
    LayerNormLayer<T> out_norm;  // on C_latent
    Linear<T> out_proj;          // C_latent -> C

    static TVSSMWeights make(int channels, int latent, int state_dim, Rng& rng, bool requires_grad = true) {
        TVSSMWeights w;
        w.image_in_proj = Linear<T>::make(channels, latent, rng, requires_grad);
        w.mask_in_proj = Linear<T>::make(channels, latent, rng, requires_grad);
        w.text_in_proj = Linear<T>::make(channels, latent, rng, requires_grad);
        w.pre_scan_conv = DepthwiseConvLayer<T>::make(3, latent, 1, rng, requires_grad);
        for (auto& p : w.spatial_scan) p = SSMParams<T>::make(latent, state_dim, rng, requires_grad);
        w.text_scan = SSMParams<T>::make(latent, state_dim, rng, requires_grad);
        w.out_norm = LayerNormLayer<T>::make(latent, requires_grad);
        w.out_proj = Linear<T>::make(latent, channels, rng, requires_grad);
        return w;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        image_in_proj.collect(prefix + ".image_in_proj", out);
        mask_in_proj.collect(prefix + ".mask_in_proj", out);
        text_in_proj.collect(prefix + ".text_in_proj", out);
        pre_scan_conv.collect(prefix + ".pre_scan_conv", out);
        for (size_t i = 0; i < spatial_scan.size(); ++i)
            spatial_scan[i].collect(prefix + ".scan" + std::to_string(i), out);
        text_scan.collect(prefix + ".text_scan", out);
        out_norm.collect(prefix + ".out_norm", out);
        out_proj.collect(prefix + ".out_proj", out);
    }
};

// Image branch: in-projection -> depthwise conv -> SiLU -> 3D scan with the
// text sequence. Mask branch: in-projection -> SiLU, multiplied into the
// scan output to highlight mask-cued regions. Norm + projection close it.
template <typename T>
Tensor<T> tv_ssm(const Tensor<T>& F_I, const Tensor<T>& F_mask, const Tensor<T>& F_text,
                 const TVSSMWeights<T>& w) {
    if (F_I.rank() != 3 || F_mask.shape() != F_I.shape())
        throw DimensionError("tv_ssm: image/mask features must share [H x W x C]");
    if (F_text.rank() != 2 || F_text.dim(1) != F_I.dim(2))
        throw DimensionError("tv_ssm: text features must be [L x C]");
    auto img = silu(w.pre_scan_conv.apply(detail::project_map(w.image_in_proj, F_I)));
    auto text = w.text_in_proj.apply(F_text);
    auto scan = scan3d(img, text, w.spatial_scan, w.text_scan);
    auto gate = silu(detail::project_map(w.mask_in_proj, F_mask));
    auto gated = mul(scan.y, gate);
    return detail::project_map(w.out_proj, w.out_norm.apply(gated));
}

template <typename T>
struct MMSSBWeights {
    LayerNormLayer<T> norm1;
    LayerNormLayer<T> norm2;
    Tensor<T> residual_scale;  // s, per-channel, starts at ones
    TVSSMWeights<T> tv_ssm;
    Conv2dLayer<T> post_conv;  // 3x3, C -> C
    MMCAWeights<T> mmca;

    static MMSSBWeights make(int channels, int latent, int state_dim, int num_heads, Rng& rng,
                             bool requires_grad = true) {
        MMSSBWeights w;
        w.norm1 = LayerNormLayer<T>::make(channels, requires_grad);
        w.norm2 = LayerNormLayer<T>::make(channels, requires_grad);
        w.residual_scale = Tensor<T>::full({channels}, T(1), requires_grad);
        w.tv_ssm = TVSSMWeights<T>::make(channels, latent, state_dim, rng, requires_grad);
        w.post_conv = Conv2dLayer<T>::make(3, channels, channels, 1, 1, rng, requires_grad);
        w.mmca = MMCAWeights<T>::make({channels, num_heads, false}, rng, requires_grad);
        return w;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        norm1.collect(prefix + ".norm1", out);
        norm2.collect(prefix + ".norm2", out);
        out.emplace_back(prefix + ".residual_scale", residual_scale);
        tv_ssm.collect(prefix + ".tv_ssm", out);
        post_conv.collect(prefix + ".post_conv", out);
        mmca.collect(prefix + ".mmca", out);
    }
};

template <typename T>
Tensor<T> mm_ssb(const Tensor<T>& F_I, const Tensor<T>& F_mask, const Tensor<T>& F_text,
                 const Tensor<T>& target_mask, const MMSSBWeights<T>& w) {
    auto normed = w.norm1.apply(F_I);
    auto Z = add(tv_ssm(normed, F_mask, F_text, w.tv_ssm), channel_scale(normed, w.residual_scale));
    auto attn_in = w.post_conv.apply(w.norm2.apply(Z));
    return add(mmca(F_text, attn_in, F_mask, F_text, target_mask, w.mmca), Z);
}

struct MMSSGConfig {
    int blocks_per_group = 1;
    int num_groups = 1;

    int total_blocks() const { return blocks_per_group * num_groups; }
    void validate() const {
        if (blocks_per_group < 1 || num_groups < 1)
            throw ConfigError("mm_ssg: blocks_per_group and num_groups must be >= 1");
    }
};

// Sequential MM-SSB application; mask, text and target mask are side inputs
// re-fed unchanged to every block.
template <typename T>
Tensor<T> mm_ssg_stack(const Tensor<T>& F_I, const Tensor<T>& F_mask, const Tensor<T>& F_text,
                       const Tensor<T>& target_mask, const MMSSGConfig& cfg,
                       const std::vector<MMSSBWeights<T>>& weights) {
    cfg.validate();
    if (static_cast<int>(weights.size()) != cfg.total_blocks())
        throw ConfigError("mm_ssg: expected " + std::to_string(cfg.total_blocks()) + " block weights, got " +
                          std::to_string(weights.size()));
    Tensor<T> features = F_I;
    for (const auto& w : weights) features = mm_ssb(features, F_mask, F_text, target_mask, w);
    return features;
}

}  // namespace mambatrans
