#pragma once

#include <string>
#include <vector>

#include "mambatrans/blocks.hpp"
#include "mambatrans/losses.hpp"

// Finite-difference gradient suites for the CLI grad-check command and the
// acceptance gate. The gate runs at 64-bit; the float instantiation exists
// for informational runs only (finite differences are unreliable there).
//
// Check instances are conditioned so no probed coordinate carries a
// vanishing gradient: central differences lose all relative accuracy when
// the analytic value is dominated by f's rounding noise.

namespace mambatrans {

struct GradCase {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 1e-4;
    bool passed = false;
};

namespace gradsuite_detail {

template <typename T>
Tensor<T> rand_t(Shape shape, Rng& rng, bool rg = false, double lo = -1, double hi = 1) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), rg);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
void lift_deltas(SSMParams<T>& p, Rng& rng) {
    for (auto& b : p.dt_proj.bias.data()) {
        const double dt = std::exp(rng.uniform(std::log(0.1), std::log(0.6)));
        b = static_cast<T>(std::log(std::expm1(dt)));
    }
}

template <typename T>
void lift_deltas(TVSSMWeights<T>& w, Rng& rng) {
    for (auto& p : w.spatial_scan) lift_deltas(p, rng);
    lift_deltas(w.text_scan, rng);
}

template <typename T, typename F>
void run_case(std::vector<GradCase>& out, const std::string& name, F&& f,
              const std::vector<Tensor<T>>& inputs, double h = 1e-5, double tol = 1e-4) {
    GradCase c;
    c.name = name;
    c.tolerance = tol;
    c.max_rel_error = grad_check(f, inputs, h);
    c.passed = c.max_rel_error < tol;
    out.push_back(c);
}

}  // namespace gradsuite_detail

template <typename T>
std::vector<GradCase> grad_suite_substrate() {
    using namespace gradsuite_detail;
    std::vector<GradCase> out;
    Rng rng(101);
    auto a = rand_t<T>({3, 4}, rng, true);
    auto b = rand_t<T>({3, 4}, rng, true);
    auto pos = rand_t<T>({3, 4}, rng, true, 0.5, 2.0);
    auto v = rand_t<T>({4}, rng, true);
    auto rows = rand_t<T>({3}, rng, true);

    run_case<T>(out, "add", [&] { return sum_all(mul(add(a, b), b)); }, {a, b});
    run_case<T>(out, "sub", [&] { return sum_all(mul(sub(a, b), a)); }, {a, b});
    run_case<T>(out, "mul", [&] { return sum_all(mul(a, b)); }, {a, b});
    run_case<T>(out, "scalar_ops", [&] { return sum_all(mul_scalar(add_scalar(a, T(0.3)), T(-1.7))); }, {a});
    run_case<T>(out, "exp", [&] { return sum_all(exp(a)); }, {a});
    run_case<T>(out, "log", [&] { return sum_all(log(pos)); }, {pos});
    run_case<T>(out, "sqrt", [&] { return sum_all(sqrt(pos)); }, {pos});
    run_case<T>(out, "recip", [&] { return sum_all(recip(pos)); }, {pos});
    run_case<T>(out, "sigmoid", [&] { return sum_all(sigmoid(a)); }, {a});
    run_case<T>(out, "silu", [&] { return sum_all(silu(a)); }, {a});
    run_case<T>(out, "softplus", [&] { return sum_all(softplus(a)); }, {a});
    run_case<T>(out, "smooth_l1", [&] { return sum_all(smooth_l1(mul_scalar(a, T(3)))); }, {a});
    run_case<T>(out, "clamp_min", [&] { return sum_all(clamp_min(pos, T(1))); }, {pos});
    run_case<T>(out, "reshape", [&] { return sum_all(mul(reshape(a, {4, 3}), reshape(b, {4, 3}))); }, {a, b});
    run_case<T>(out, "transpose2d", [&] { return sum_all(mul(transpose2d(a), transpose2d(b))); }, {a, b});
    run_case<T>(out, "slice_concat", [&] {
        return sum_all(mul(concat_rows(slice_rows(a, 0, 2), slice_rows(a, 1, 3)),
                           concat_rows(slice_rows(b, 0, 2), slice_rows(b, 1, 3))));
    }, {a, b});
    run_case<T>(out, "slice_concat_last",
                [&] { return sum_all(mul(concat_last(slice_last(a, 0, 2), slice_last(a, 2, 4)), b)); }, {a});
    run_case<T>(out, "permute_rows", [&] { return sum_all(mul(permute_rows(a, {2, 0, 1}), b)); }, {a});
    run_case<T>(out, "select_rows", [&] { return sum_all(select_rows(a, {1, 1, 2})); }, {a});
    run_case<T>(out, "broadcast_row", [&] { return sum_all(mul(broadcast_row(v, 3), a)); }, {v, a});

    auto m1 = rand_t<T>({3, 4}, rng, true);
    auto m2 = rand_t<T>({4, 2}, rng, true);
    run_case<T>(out, "matmul", [&] { return sum_all(matmul(m1, m2)); }, {m1, m2});
    run_case<T>(out, "add_bias", [&] { return sum_all(mul(add_bias(a, v), b)); }, {a, v});
    run_case<T>(out, "channel_scale", [&] { return sum_all(mul(channel_scale(a, v), b)); }, {a, v});
    run_case<T>(out, "row_scale", [&] { return sum_all(mul(row_scale(a, rows), b)); }, {a, rows});

    auto gamma = rand_t<T>({4}, rng, true, 0.5, 1.5);
    auto beta = rand_t<T>({4}, rng, true);
    run_case<T>(out, "layer_norm",
                [&] { return sum_all(mul(layer_norm(a, gamma, beta, T(1e-5)), b)); }, {a, gamma, beta});
    run_case<T>(out, "softmax", [&] { return sum_all(mul(softmax_lastdim(a), b)); }, {a});
    run_case<T>(out, "log_softmax", [&] { return sum_all(mul(log_softmax_lastdim(a), b)); }, {a});
    run_case<T>(out, "reductions", [&] { return add(mean_all(mul(a, b)), sum_all(mul(mean_rows(a), v))); },
                {a, b});

    auto table = rand_t<T>({6, 4}, rng, true);
    auto wfix = rand_t<T>({3, 4}, rng);
    run_case<T>(out, "embedding", [&] { return sum_all(mul(embedding(table, {1, 4, 1}), wfix)); }, {table});
    auto logits = rand_t<T>({3, 5}, rng, true);
    run_case<T>(out, "gather_lastdim",
                [&] { return sum_all(gather_lastdim(log_softmax_lastdim(logits), {0, 4, 2})); }, {logits});

    auto img = rand_t<T>({5, 5, 2}, rng, true);
    auto ker = rand_t<T>({3, 3, 2, 2}, rng, true, -0.5, 0.5);
    auto cb = rand_t<T>({2}, rng, true);
    run_case<T>(out, "conv2d_s1", [&] { return sum_all(silu(conv2d(img, ker, cb, 1, 1))); }, {img, ker, cb});
    run_case<T>(out, "conv2d_s2", [&] { return sum_all(silu(conv2d(img, ker, cb, 2, 1))); }, {img, ker, cb});
    auto dker = rand_t<T>({3, 3, 2}, rng, true, -0.5, 0.5);
    run_case<T>(out, "depthwise_conv2d", [&] { return sum_all(silu(depthwise_conv2d(img, dker, cb, 1))); },
                {img, dker, cb});
    return out;
}

template <typename T>
std::vector<GradCase> grad_suite_ssm() {
    using namespace gradsuite_detail;
    std::vector<GradCase> out;
    Rng rng(202);
    const int L = 5, C = 3, N = 4;
    auto p = SSMParams<T>::make(C, N, rng);
    lift_deltas(p, rng);
    auto x = rand_t<T>({L, C}, rng, true);
    auto w = rand_t<T>({L, C}, rng);
    run_case<T>(out, "selective_scan_1d", [&] {
        auto s = selective_scan_1d(x, p);
        return sum_all(mul(s, add(s, w)));
    }, {x, p.A_log, p.D, p.dt_proj.weight, p.dt_proj.bias, p.B_proj.weight, p.B_proj.bias,
        p.C_proj.weight, p.C_proj.bias});

    std::array<SSMParams<T>, 4> sp = {SSMParams<T>::make(C, N, rng), SSMParams<T>::make(C, N, rng),
                                      SSMParams<T>::make(C, N, rng), SSMParams<T>::make(C, N, rng)};
    for (auto& s : sp) lift_deltas(s, rng);
    auto tp = SSMParams<T>::make(C, N, rng);
    lift_deltas(tp, rng);
    auto fmap = rand_t<T>({3, 4, C}, rng, true);
    auto text = rand_t<T>({2, C}, rng, true);
    run_case<T>(out, "scan3d", [&] { return sum_all(scan3d(fmap, text, sp, tp).y); },
                {fmap, text, sp[0].A_log, sp[3].D, tp.B_proj.weight});
    return out;
}

template <typename T>
std::vector<GradCase> grad_suite_attention() {
    using namespace gradsuite_detail;
    std::vector<GradCase> out;
    Rng rng(303);
    const int C = 4, H = 2, W = 3;
    for (bool flipped : {false, true}) {
        auto w = MMCAWeights<T>::make({C, 2, flipped}, rng);
        auto fused = rand_t<T>({H, W, C}, rng, true);
        auto mask_feat = rand_t<T>({H, W, C}, rng, true);
        auto text = rand_t<T>({3, C}, rng, true);
        auto target = rand_t<T>({H, W}, rng, false, 0.05, 0.95);
        run_case<T>(out, flipped ? "mmca_fusion_query" : "mmca_text_query",
                    [&] { return sum_all(mmca(text, fused, mask_feat, text, target, w)); },
                    {fused, mask_feat, text, w.conv1x1.kernel, w.conv3x3.kernel, w.fuse.weight,
                     w.query_proj.weight, w.key_proj.weight, w.value_proj.weight, w.out_proj.weight,
                     w.out_proj.bias});
    }
    return out;
}

template <typename T>
std::vector<GradCase> grad_suite_blocks() {
    using namespace gradsuite_detail;
    std::vector<GradCase> out;
    Rng rng(404);
    {
        const int C = 3, LAT = 6, N = 2;
        auto w = TVSSMWeights<T>::make(C, LAT, N, rng);
        lift_deltas(w, rng);
        auto F_I = rand_t<T>({3, 3, C}, rng, true);
        auto F_mask = rand_t<T>({3, 3, C}, rng, true);
        auto F_text = rand_t<T>({2, C}, rng, true);
        run_case<T>(out, "tv_ssm", [&] { return sum_all(tv_ssm(F_I, F_mask, F_text, w)); },
                    {F_I, F_mask, F_text, w.image_in_proj.weight, w.mask_in_proj.weight,
                     w.text_in_proj.weight, w.pre_scan_conv.kernel, w.spatial_scan[0].A_log,
                     w.spatial_scan[2].D, w.text_scan.B_proj.weight, w.out_norm.gamma, w.out_proj.weight});
    }
    {
        // full residual block stack at depth 2 on a 6x6x8 input
        const int C = 8, LAT = 16, N = 4;
        std::vector<MMSSBWeights<T>> ws;
        ws.push_back(MMSSBWeights<T>::make(C, LAT, N, 2, rng));
        ws.push_back(MMSSBWeights<T>::make(C, LAT, N, 2, rng));
        for (auto& w : ws) lift_deltas(w.tv_ssm, rng);
        auto F_I = rand_t<T>({6, 6, C}, rng, true);
        auto F_mask = rand_t<T>({6, 6, C}, rng, true);
        auto F_text = rand_t<T>({2, C}, rng, true);
        auto target = rand_t<T>({6, 6}, rng, false, 0.05, 0.95);
        run_case<T>(out, "mm_ssb_depth2", [&] {
            return mean_all(mm_ssg_stack(F_I, F_mask, F_text, target, {2, 1}, ws));
        }, {F_I, F_mask, F_text, ws[0].residual_scale, ws[1].norm1.gamma,
            ws[0].tv_ssm.spatial_scan[1].A_log, ws[1].mmca.out_proj.weight, ws[0].post_conv.bias});
    }
    return out;
}

template <typename T>
std::vector<GradCase> grad_suite_losses() {
    using namespace gradsuite_detail;
    std::vector<GradCase> out;
    Rng rng(505);
    {
        auto o = rand_t<T>({3, 3, 3}, rng, true, 0, 1);
        auto f = rand_t<T>({3, 3, 3}, rng, false, 0, 1);
        auto v = rand_t<T>({3, 3, 3}, rng, false, 0, 1);
        CharbonnierConfig cfg;
        run_case<T>(out, "charbonnier", [&] { return charbonnier_loss(o, f, v, cfg); }, {o});
    }
    {
        DetectorConfig cfg;
        cfg.anchor_size = 8.0;
        auto det = make_detector<T>(cfg, 15);
        det.set_frozen(true);
        auto image = rand_t<T>({16, 16, 3}, rng, true, 0, 1);
        DetectionTargets targets;
        targets.width = 16;
        targets.height = 16;
        targets.boxes = {{0, 0, 8, 8}};  // IoU 1 with an anchor: far from thresholds
        targets.labels = {1};
        run_case<T>(out, "detection_loss_image",
                    [&] { return detection_loss(image, targets, det).total; }, {image});
        auto det2 = make_detector<T>(cfg, 17);
        auto image2 = rand_t<T>({16, 16, 3}, rng, false, 0, 1);
        // h = 1e-4 for parameter probes: several head coordinates carry
        // near-zero gradients where 1e-5 roundoff dominates
        run_case<T>(out, "detection_loss_params",
                    [&] { return detection_loss(image2, targets, det2).total; },
                    {det2.conv1.kernel, det2.conv2.bias, det2.conv3.kernel, det2.proposal_head.kernel,
                     det2.cls_head.kernel, det2.cls_head.bias},
                    1e-4);
    }
    return out;
}

template <typename T = double>
std::vector<GradCase> grad_suite(const std::string& module) {
    if (module == "substrate") return grad_suite_substrate<T>();
    if (module == "ssm") return grad_suite_ssm<T>();
    if (module == "attention") return grad_suite_attention<T>();
    if (module == "blocks") return grad_suite_blocks<T>();
    if (module == "losses") return grad_suite_losses<T>();
    if (module == "all") {
        std::vector<GradCase> all;
        for (const char* m : {"substrate", "ssm", "attention", "blocks", "losses"}) {
            auto part = grad_suite<T>(m);
            all.insert(all.end(), part.begin(), part.end());
        }
        return all;
    }
    throw ConfigError("unknown grad-check module '" + module +
                      "' (expected substrate|ssm|attention|blocks|losses|all)");
}

}  // namespace mambatrans
