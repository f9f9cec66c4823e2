#pragma once

#include <string>
#include <utility>

#include "mambatrans/nn.hpp"
#include "mambatrans/ops.hpp"

// Ternary mask-image-text cross-attention. The text-image-mask fusion
// feature (elementwise sum, text broadcast) runs through parallel 1x1 and
// 3x3 convolutions, is re-fused on the channel axis, and becomes the
// key/value sequence; text tokens are projected to the query sequence.
// Attended query outputs are scattered back onto the grid through the
// attention weights themselves, then gated by the target mask.
//
// `fusion_as_query` flips the roles (fusion tokens query the text sequence),
// kept as an ablation switch since the source description supports both.

namespace mambatrans {

struct MMCAConfig {
    int embed_dim = 0;
    int num_heads = 1;
    bool fusion_as_query = false;

    int head_dim() const { return embed_dim / num_heads; }
    void validate() const {
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
            throw ConfigError("mmca: embed_dim " + std::to_string(embed_dim) +
                              " must be divisible by num_heads " + std::to_string(num_heads));
    }
};

template <typename T>
struct MMCAWeights {
    MMCAConfig cfg;
    Conv2dLayer<T> conv1x1;
    Conv2dLayer<T> conv3x3;
    Linear<T> fuse;        // 2C -> C channel re-fusion
    Linear<T> query_proj;  // C -> C
    Linear<T> key_proj;    // C -> C
    Linear<T> value_proj;  // C -> C
    Linear<T> out_proj;    // C -> C

    static MMCAWeights make(const MMCAConfig& cfg, Rng& rng, bool requires_grad = true) {
        cfg.validate();
        const int C = cfg.embed_dim;
        MMCAWeights w;
        w.cfg = cfg;
        w.conv1x1 = Conv2dLayer<T>::make(1, C, C, 1, 0, rng, requires_grad);
        w.conv3x3 = Conv2dLayer<T>::make(3, C, C, 1, 1, rng, requires_grad);
        w.fuse = Linear<T>::make(2 * C, C, rng, requires_grad);
        w.query_proj = Linear<T>::make(C, C, rng, requires_grad);
        w.key_proj = Linear<T>::make(C, C, rng, requires_grad);
        w.value_proj = Linear<T>::make(C, C, rng, requires_grad);
        w.out_proj = Linear<T>::make(C, C, rng, requires_grad);
        return w;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        conv1x1.collect(prefix + ".conv1x1", out);
        conv3x3.collect(prefix + ".conv3x3", out);
        fuse.collect(prefix + ".fuse", out);
        query_proj.collect(prefix + ".query_proj", out);
        key_proj.collect(prefix + ".key_proj", out);
        value_proj.collect(prefix + ".value_proj", out);
        out_proj.collect(prefix + ".out_proj", out);
    }
};

namespace detail {

// Fusion feature -> flattened token sequence [(H*W) x C] before K/V maps.
template <typename T>
Tensor<T> fusion_tokens(const Tensor<T>& fused_feat, const Tensor<T>& mask_feat,
                        const Tensor<T>& text_summary, const MMCAWeights<T>& w) {
    if (fused_feat.rank() != 3 || mask_feat.shape() != fused_feat.shape())
        throw DimensionError("mmca: fused/mask features must share [H x W x C]");
    const int H = fused_feat.dim(0), W = fused_feat.dim(1), C = fused_feat.dim(2);
    if (text_summary.rank() != 1 || text_summary.dim(0) != C)
        throw DimensionError("mmca: text summary must be [C]");
    auto text_map = reshape(broadcast_row(text_summary, H * W), {H, W, C});
    auto fusion = add(add(fused_feat, mask_feat), text_map);
    auto a = w.conv1x1.apply(fusion);
    auto b = w.conv3x3.apply(fusion);
    auto cat = reshape(concat_last(a, b), {H * W, 2 * C});
    return w.fuse.apply(cat);
}

}  // namespace detail

// Key/value sequences from the text-image-mask fusion feature.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> build_kv(const Tensor<T>& fused_feat, const Tensor<T>& mask_feat,
                                         const Tensor<T>& text_summary, const MMCAWeights<T>& w) {
    auto tokens = detail::fusion_tokens(fused_feat, mask_feat, text_summary, w);
    return {w.key_proj.apply(tokens), w.value_proj.apply(tokens)};
}

template <typename T>
struct MMCAResult {
    Tensor<T> out;        // [H x W x C], mask-gated
    Tensor<T> transport;  // head-averaged attention, [L_q x (H*W)] (or [(H*W) x L_t])
};

// Full ternary cross-attention; see mmca() for the plain-output wrapper.
template <typename T>
MMCAResult<T> mmca_detailed(const Tensor<T>& query_tokens, const Tensor<T>& fused_feat,
                            const Tensor<T>& mask_feat, const Tensor<T>& text_tokens,
                            const Tensor<T>& target_mask, const MMCAWeights<T>& w) {
    w.cfg.validate();
    const int H = fused_feat.dim(0), W = fused_feat.dim(1), C = fused_feat.dim(2);
    const int HW = H * W;
    if (w.cfg.embed_dim != C) throw DimensionError("mmca: config embed_dim mismatch");
    if (query_tokens.rank() != 2 || query_tokens.dim(1) != C)
        throw DimensionError("mmca: query tokens must be [L x C]");
    if (text_tokens.rank() != 2 || text_tokens.dim(1) != C)
        throw DimensionError("mmca: text tokens must be [L x C]");
    if (target_mask.rank() != 2 || target_mask.dim(0) != H || target_mask.dim(1) != W)
        throw DimensionError("mmca: target mask must be [H x W]");
    for (const T v : target_mask.data())
        if (!(v >= T(0) && v <= T(1))) throw ContractError("mmca: target mask values must lie in [0, 1]");

    const int heads = w.cfg.num_heads;
    const int d = w.cfg.head_dim();
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));
    auto mask_flat = reshape(target_mask, {HW});

    Tensor<T> spatial;   // pre-gate [HW x C]
    Tensor<T> transport;

    if (!w.cfg.fusion_as_query) {
        // text queries attend over fusion-derived key/value tokens
        auto summary = mean_rows(text_tokens);
        auto [K, V] = build_kv(fused_feat, mask_feat, summary, w);
        auto Q = w.query_proj.apply(query_tokens);
        Tensor<T> head_out;  // [L_q x C] accumulated by concat
        for (int h = 0; h < heads; ++h) {
            auto Qh = slice_last(Q, h * d, (h + 1) * d);
            auto Kh = slice_last(K, h * d, (h + 1) * d);
            auto Vh = slice_last(V, h * d, (h + 1) * d);
            auto attn = softmax_lastdim(mul_scalar(matmul(Qh, transpose2d(Kh)), scale));
            auto oh = matmul(attn, Vh);
            head_out = h == 0 ? oh : concat_last(head_out, oh);
            transport = h == 0 ? attn : add(transport, attn);
        }
        if (heads > 1) transport = mul_scalar(transport, T(1) / static_cast<T>(heads));
        auto out_tokens = w.out_proj.apply(head_out);  // [L_q x C]
        // scatter back through the transport: each position takes the
        // attention-weighted mixture of query outputs, normalized
        auto tT = transpose2d(transport);                       // [HW x L_q]
        auto numer = matmul(tT, out_tokens);                    // [HW x C]
        auto ones = Tensor<T>::full({query_tokens.dim(0), 1}, T(1));
        auto denom = reshape(matmul(tT, ones), {HW});
        spatial = row_scale(numer, recip(add_scalar(denom, T(1e-8))));
    } else {
        // ablation: fusion tokens query the text sequence
        auto summary = mean_rows(text_tokens);
        auto tokens = detail::fusion_tokens(fused_feat, mask_feat, summary, w);
        auto Q = w.query_proj.apply(tokens);         // [HW x C]
        auto K = w.key_proj.apply(text_tokens);      // [L_t x C]
        auto V = w.value_proj.apply(text_tokens);
        Tensor<T> head_out;
        for (int h = 0; h < heads; ++h) {
            auto Qh = slice_last(Q, h * d, (h + 1) * d);
            auto Kh = slice_last(K, h * d, (h + 1) * d);
            auto Vh = slice_last(V, h * d, (h + 1) * d);
            auto attn = softmax_lastdim(mul_scalar(matmul(Qh, transpose2d(Kh)), scale));
            auto oh = matmul(attn, Vh);  // [HW x d]
            head_out = h == 0 ? oh : concat_last(head_out, oh);
            transport = h == 0 ? attn : add(transport, attn);
        }
        if (heads > 1) transport = mul_scalar(transport, T(1) / static_cast<T>(heads));
        spatial = w.out_proj.apply(head_out);
    }

    MMCAResult<T> result;
    result.transport = transport;
    result.out = reshape(row_scale(spatial, mask_flat), {H, W, C});
    return result;
}

template <typename T>
Tensor<T> mmca(const Tensor<T>& query_tokens, const Tensor<T>& fused_feat, const Tensor<T>& mask_feat,
               const Tensor<T>& text_tokens, const Tensor<T>& target_mask, const MMCAWeights<T>& w) {
    return mmca_detailed(query_tokens, fused_feat, mask_feat, text_tokens, target_mask, w).out;
}

}  // namespace mambatrans
