#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mambatrans/nn.hpp"
#include "mambatrans/ops.hpp"

// Selective-scan state-space recurrence (diagonal S6 parameterization) and
// the 3D-Selective Scan: four spatial flatten directions over the image
// plane plus a one-dimensional scan over text tokens, summed elementwise.
//
// Discretization: Abar_t = exp(delta_t * A) (zero-order hold on A) with
// Bbar_t = delta_t * B_t (Euler), delta/B/C input-dependent per token,
// A = -exp(A_log) kept strictly negative, learned channelwise skip D.

namespace mambatrans {

inline constexpr double kDeltaFloor = 1e-4;

template <typename T>
struct SSMParams {
    int state_dim = 0;    // N
    Tensor<T> A_log;      // [C x N]; A = -exp(A_log)
    Tensor<T> D;          // [C] skip gain
    Linear<T> dt_proj;    // C -> C, softplus'd into delta > 0
    Linear<T> B_proj;     // C -> N
    Linear<T> C_proj;     // C -> N

    static SSMParams make(int channels, int state_dim, Rng& rng, bool requires_grad = true) {
        SSMParams p;
        p.state_dim = state_dim;
        p.A_log = Tensor<T>::zeros({channels, state_dim}, requires_grad);
        // log-uniform over [1, N]: exp(A_log) spans the S6 lineage's decay range
        fill_uniform(p.A_log, rng, 0.0, std::log(static_cast<double>(std::max(state_dim, 1))));
        p.D = Tensor<T>::full({channels}, T(1), requires_grad);
        p.dt_proj = Linear<T>::make(channels, channels, rng, requires_grad);
        p.B_proj = Linear<T>::make(channels, state_dim, rng, requires_grad);
        p.C_proj = Linear<T>::make(channels, state_dim, rng, requires_grad);
        // bias the dt projection so initial deltas land log-uniformly in
        // [1e-3, 1e-1], away from the clamp floor
        for (auto& b : p.dt_proj.bias.data()) {
            const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            b = static_cast<T>(std::log(std::expm1(dt)));
        }
        return p;
    }

    int channels() const { return A_log.dim(0); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".A_log", A_log);
        out.emplace_back(prefix + ".D", D);
        dt_proj.collect(prefix + ".dt_proj", out);
        B_proj.collect(prefix + ".B_proj", out);
        C_proj.collect(prefix + ".C_proj", out);
    }
};

enum class ScanDirection { TL_BR, BR_TL, TR_BL, BL_TR, Text };

inline bool is_spatial(ScanDirection d) { return d != ScanDirection::Text; }

// Sequence order for a spatial direction: entry i is the row-major position
// index visited at step i. BR_TL and BL_TR are exact reversals of their
// counterparts, so backward passes stay pure permutations.
inline std::vector<int> scan_order(int H, int W, ScanDirection dir) {
    const int n = H * W;
    std::vector<int> order(static_cast<size_t>(n));
    switch (dir) {
        case ScanDirection::TL_BR:
            for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
            break;
        case ScanDirection::BR_TL:
            for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = n - 1 - i;
            break;
        case ScanDirection::TR_BL:
            for (int r = 0; r < H; ++r)
                for (int j = 0; j < W; ++j) order[static_cast<size_t>(r * W + j)] = r * W + (W - 1 - j);
            break;
        case ScanDirection::BL_TR:
            for (int r = 0; r < H; ++r)
                for (int j = 0; j < W; ++j)
                    order[static_cast<size_t>(n - 1 - (r * W + j))] = r * W + (W - 1 - j);
            break;
        case ScanDirection::Text:
            throw ContractError("scan_order: Text is not a spatial direction");
    }
    return order;
}

// [H x W x C] -> [(H*W) x C] in the direction's visiting order.
template <typename T>
Tensor<T> scan_flatten(const Tensor<T>& fmap, ScanDirection dir) {
    if (!is_spatial(dir)) throw ContractError("scan_flatten: Text direction has no spatial order");
    if (fmap.rank() != 3) throw DimensionError("scan_flatten: expected [H x W x C]");
    const int H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
    auto rows = reshape(fmap, {H * W, C});
    if (dir == ScanDirection::TL_BR) return rows;
    return permute_rows(rows, scan_order(H, W, dir));
}

template <typename T>
Tensor<T> scan_unflatten(const Tensor<T>& seq, ScanDirection dir, int H, int W) {
    if (!is_spatial(dir)) throw ContractError("scan_unflatten: Text direction has no spatial order");
    if (seq.rank() != 2) throw DimensionError("scan_unflatten: expected [(H*W) x C]");
    if (seq.dim(0) != H * W)
        throw DimensionError("scan_unflatten: sequence length " + std::to_string(seq.dim(0)) +
                             " does not match " + std::to_string(H) + "x" + std::to_string(W));
    const int C = seq.dim(1);
    if (dir == ScanDirection::TL_BR) return reshape(seq, {H, W, C});
    const auto order = scan_order(H, W, dir);
    std::vector<int> inverse(order.size());
    for (size_t i = 0; i < order.size(); ++i) inverse[static_cast<size_t>(order[i])] = static_cast<int>(i);
    return reshape(permute_rows(seq, inverse), {H, W, C});
}

// Causal selective scan over an [L x C] sequence.
template <typename T>
Tensor<T> selective_scan_1d(const Tensor<T>& x, const SSMParams<T>& params) {
    if (x.rank() != 2) throw DimensionError("selective_scan_1d: expected [L x C]");
    if (x.dim(1) != params.channels())
        throw DimensionError("selective_scan_1d: channels " + std::to_string(x.dim(1)) +
                             " vs params " + std::to_string(params.channels()));
    auto delta = clamp_min(softplus(params.dt_proj.apply(x)), T(kDeltaFloor));
    auto B = params.B_proj.apply(x);
    auto C = params.C_proj.apply(x);
    auto A = neg(exp(params.A_log));
    return ssm_scan(x, delta, B, C, A, params.D);
}

template <typename T>
struct ScanOutput {
    Tensor<T> y1, y2, y3, y4;  // spatial direction outputs, [H x W x C]
    Tensor<T> y_text;          // broadcast text-scan summary, [H x W x C]
    Tensor<T> y;               // y1 + y2 + y3 + y4 + y_text
};

// Four direction-ordered spatial scans plus the text scan. The text scan's
// summary vector (mean over token outputs) is broadcast to every position
// so the five terms share one shape before summation.
template <typename T>
ScanOutput<T> scan3d(const Tensor<T>& image_feat, const Tensor<T>& text_feat,
                     const std::array<SSMParams<T>, 4>& spatial_params, const SSMParams<T>& text_params) {
    if (image_feat.rank() != 3) throw DimensionError("scan3d: image features must be [H x W x C]");
    if (text_feat.rank() != 2) throw DimensionError("scan3d: text features must be [L x C]");
    const int H = image_feat.dim(0), W = image_feat.dim(1), C = image_feat.dim(2);
    if (text_feat.dim(1) != C) throw DimensionError("scan3d: text channels mismatch");
    for (const auto& p : spatial_params)
        if (p.channels() != C) throw DimensionError("scan3d: spatial param channels mismatch");
    if (text_params.channels() != C) throw DimensionError("scan3d: text param channels mismatch");

    const ScanDirection dirs[4] = {ScanDirection::TL_BR, ScanDirection::BR_TL, ScanDirection::TR_BL,
                                   ScanDirection::BL_TR};
    ScanOutput<T> out;
    Tensor<T>* ys[4] = {&out.y1, &out.y2, &out.y3, &out.y4};
    for (int i = 0; i < 4; ++i) {
        auto seq = scan_flatten(image_feat, dirs[i]);
        auto scanned = selective_scan_1d(seq, spatial_params[static_cast<size_t>(i)]);
        *ys[i] = scan_unflatten(scanned, dirs[i], H, W);
    }
    auto text_scanned = selective_scan_1d(text_feat, text_params);
    auto summary = mean_rows(text_scanned);
    out.y_text = reshape(broadcast_row(summary, H * W), {H, W, C});
    out.y = add(add(add(add(out.y1, out.y2), out.y3), out.y4), out.y_text);
    return out;
}

}  // namespace mambatrans
