#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mambatrans/attention.hpp"

using namespace mambatrans;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, T lo = T(-1), T hi = T(1)) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

void make_identity(Tensor<double>& w) {
    const int in = w.dim(0), out = w.dim(1);
    std::fill(w.data().begin(), w.data().end(), 0.0);
    for (int i = 0; i < std::min(in, out); ++i) w.data()[static_cast<size_t>(i) * out + i] = 1.0;
}

// conv1x1 = identity, conv3x3 = 0, fuse picks the first C channels,
// key/query maps = identity: K equals the flattened fusion feature.
MMCAWeights<double> identity_path_weights(int C, int heads, Rng& rng) {
    auto w = MMCAWeights<double>::make({C, heads, false}, rng);
    std::fill(w.conv1x1.kernel.data().begin(), w.conv1x1.kernel.data().end(), 0.0);
    for (int c = 0; c < C; ++c) w.conv1x1.kernel.data()[static_cast<size_t>(c) * C + c] = 1.0;
    std::fill(w.conv3x3.kernel.data().begin(), w.conv3x3.kernel.data().end(), 0.0);
    make_identity(w.fuse.weight);  // [2C x C]: top block identity, bottom zero
    make_identity(w.key_proj.weight);
    make_identity(w.query_proj.weight);
    return w;
}

}  // namespace

TEST_CASE("build_kv: all-zero inputs with zero biases produce zero K and V") {
    Rng rng(1);
    const int C = 4;
    auto w = MMCAWeights<double>::make({C, 2, false}, rng);  // biases are zero-initialized
    auto zero_map = Tensor<double>::zeros({3, 5, C});
    auto zero_summary = Tensor<double>::zeros({C});
    auto [K, V] = build_kv(zero_map, zero_map, zero_summary, w);
    CHECK(K.shape() == Shape{15, C});
    for (double v : K.data()) CHECK(v == 0.0);
    for (double v : V.data()) CHECK(v == 0.0);
}

TEST_CASE("build_kv: constructed identity path reproduces the fusion feature") {
    Rng rng(2);
    const int C = 4, H = 3, W = 2;
    auto w = identity_path_weights(C, 2, rng);
    auto fused = random_tensor<double>({H, W, C}, rng);
    auto mask = random_tensor<double>({H, W, C}, rng);
    auto summary = random_tensor<double>({C}, rng);
    auto [K, V] = build_kv(fused, mask, summary, w);
    for (int p = 0; p < H * W; ++p)
        for (int c = 0; c < C; ++c) {
            const double fusion = fused.data()[static_cast<size_t>(p) * C + c] +
                                  mask.data()[static_cast<size_t>(p) * C + c] +
                                  summary.data()[static_cast<size_t>(c)];
            CHECK(K.data()[static_cast<size_t>(p) * C + c] == doctest::Approx(fusion).epsilon(1e-12));
        }
}

TEST_CASE("build_kv responds to perturbations of every input stream") {
    Rng rng(3);
    const int C = 4, H = 4, W = 4;
    auto w = MMCAWeights<double>::make({C, 2, false}, rng);
    auto fused = random_tensor<double>({H, W, C}, rng);
    auto mask = random_tensor<double>({H, W, C}, rng);
    auto summary = random_tensor<double>({C}, rng);
    auto base = build_kv(fused, mask, summary, w).first;

    auto l1 = [&](const Tensor<double>& other) {
        double d = 0;
        for (size_t i = 0; i < base.data().size(); ++i) d += std::fabs(base.data()[i] - other.data()[i]);
        return d;
    };
    auto fused2 = Tensor<double>::from_data(fused.shape(), fused.data());
    fused2.data()[7] += 0.25;
    CHECK(l1(build_kv(fused2, mask, summary, w).first) > 0);
    auto mask2 = Tensor<double>::from_data(mask.shape(), mask.data());
    mask2.data()[12] += 0.25;
    CHECK(l1(build_kv(fused, mask2, summary, w).first) > 0);
    auto summary2 = Tensor<double>::from_data(summary.shape(), summary.data());
    summary2.data()[1] += 0.25;
    CHECK(l1(build_kv(fused, mask, summary2, w).first) > 0);
}

TEST_CASE("mmca: uniform attention yields the mean over query outputs") {
    Rng rng(5);
    const int C = 4, H = 3, W = 3, Lq = 5;
    auto w = MMCAWeights<double>::make({C, 2, false}, rng);
    // zero query map -> all logits equal -> softmax rows are uniform
    std::fill(w.query_proj.weight.data().begin(), w.query_proj.weight.data().end(), 0.0);
    auto fused = random_tensor<double>({H, W, C}, rng);
    auto mask_feat = random_tensor<double>({H, W, C}, rng);
    auto text = random_tensor<double>({Lq, C}, rng);
    auto target = random_tensor<double>({H, W}, rng, false, 0.0, 1.0);
    auto res = mmca_detailed(text, fused, mask_feat, text, target, w);

    // expected pre-gate value: uniform transport makes every position the
    // plain mean over query outputs
    auto summary = mean_rows(text);
    auto [K, V] = build_kv(fused, mask_feat, summary, w);
    auto Q = w.query_proj.apply(text);
    // head outputs are the mean V row per head; recompute directly
    auto attn_row = Tensor<double>::full({Lq, H * W}, 1.0 / (H * W));
    auto o1 = matmul(attn_row, slice_last(V, 0, 2));
    auto o2 = matmul(attn_row, slice_last(V, 2, 4));
    auto out_tokens = w.out_proj.apply(concat_last(o1, o2));
    auto expect_row = mean_rows(out_tokens);
    for (int p = 0; p < H * W; ++p)
        for (int c = 0; c < C; ++c) {
            const double gated = expect_row.data()[static_cast<size_t>(c)] *
                                 target.data()[static_cast<size_t>(p)];
            CHECK(res.out.data()[static_cast<size_t>(p) * C + c] == doctest::Approx(gated).epsilon(1e-6));
        }
}

TEST_CASE("mmca: all-zero target mask zeroes the output") {
    Rng rng(6);
    const int C = 4, H = 3, W = 4;
    auto w = MMCAWeights<double>::make({C, 2, false}, rng);
    auto fused = random_tensor<double>({H, W, C}, rng);
    auto mask_feat = random_tensor<double>({H, W, C}, rng);
    auto text = random_tensor<double>({3, C}, rng);
    auto target = Tensor<double>::zeros({H, W});
    auto out = mmca(text, fused, mask_feat, text, target, w);
    for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("mmca: a dominating key saturates its attention weight") {
    Rng rng(7);
    const int C = 4, H = 2, W = 3;
    auto w = identity_path_weights(C, 1, rng);
    auto fused = Tensor<double>::zeros({H, W, C});
    const int star = 4;
    fused.data()[static_cast<size_t>(star) * C + 0] = 20.0;  // logit 10*20/sqrt(4) = 100 vs 0
    auto mask_feat = Tensor<double>::zeros({H, W, C});
    auto text = Tensor<double>::zeros({2, C});
    auto query = Tensor<double>::zeros({1, C});
    query.data()[0] = 10.0;
    auto target = Tensor<double>::full({H, W}, 1.0);
    auto res = mmca_detailed(query, fused, mask_feat, text, target, w);
    CHECK(res.transport.shape() == Shape{1, H * W});
    CHECK(res.transport.data()[static_cast<size_t>(star)] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("mmca: transport rows are softmax rows summing to one") {
    Rng rng(8);
    const int C = 6, H = 3, W = 3;
    auto w = MMCAWeights<double>::make({C, 3, false}, rng);
    auto fused = random_tensor<double>({H, W, C}, rng);
    auto mask_feat = random_tensor<double>({H, W, C}, rng);
    auto text = random_tensor<double>({4, C}, rng);
    auto target = Tensor<double>::full({H, W}, 1.0);
    auto res = mmca_detailed(text, fused, mask_feat, text, target, w);
    for (int q = 0; q < 4; ++q) {
        double s = 0;
        for (int p = 0; p < H * W; ++p) s += res.transport.data()[static_cast<size_t>(q) * H * W + p];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("mmca: mask gating is exactly multiplicative") {
    Rng rng(9);
    const int C = 4, H = 3, W = 3;
    for (bool flipped : {false, true}) {
        auto w = MMCAWeights<double>::make({C, 2, flipped}, rng);
        auto fused = random_tensor<double>({H, W, C}, rng);
        auto mask_feat = random_tensor<double>({H, W, C}, rng);
        auto text = random_tensor<double>({3, C}, rng);
        auto target = random_tensor<double>({H, W}, rng, false, 0.0, 1.0);
        auto ones = Tensor<double>::full({H, W}, 1.0);
        auto gated = mmca(text, fused, mask_feat, text, target, w);
        auto pre = mmca(text, fused, mask_feat, text, ones, w);
        for (int p = 0; p < H * W; ++p)
            for (int c = 0; c < C; ++c)
                CHECK(gated.data()[static_cast<size_t>(p) * C + c] ==
                      target.data()[static_cast<size_t>(p)] * pre.data()[static_cast<size_t>(p) * C + c]);
    }
}

TEST_CASE("mmca: permuting query tokens leaves the spatial output invariant") {
    Rng rng(10);
    const int C = 4, H = 3, W = 2, Lq = 4;
    auto w = MMCAWeights<double>::make({C, 2, false}, rng);
    auto fused = random_tensor<double>({H, W, C}, rng);
    auto mask_feat = random_tensor<double>({H, W, C}, rng);
    auto text = random_tensor<double>({Lq, C}, rng);
    auto target = random_tensor<double>({H, W}, rng, false, 0.0, 1.0);
    auto out = mmca(text, fused, mask_feat, text, target, w);

    const std::vector<int> perm = {2, 0, 3, 1};
    auto permuted = permute_rows(text, perm);
    auto res2 = mmca_detailed(permuted, fused, mask_feat, permuted, target, w);
    // attention rows permute with the queries; the mean-scatter output does not
    auto res1 = mmca_detailed(text, fused, mask_feat, text, target, w);
    for (int q = 0; q < Lq; ++q)
        for (int p = 0; p < H * W; ++p)
            CHECK(res2.transport.data()[static_cast<size_t>(q) * H * W + p] ==
                  doctest::Approx(res1.transport.data()[static_cast<size_t>(perm[static_cast<size_t>(q)]) * H * W + p])
                      .epsilon(1e-12));
    for (size_t i = 0; i < out.data().size(); ++i)
        CHECK(res2.out.data()[i] == doctest::Approx(out.data()[i]).epsilon(1e-9));
}

TEST_CASE("mmca: gradients through all projections match finite differences") {
    Rng rng(11);
    const int C = 4, H = 2, W = 3;
    for (bool flipped : {false, true}) {
        auto w = MMCAWeights<double>::make({C, 2, flipped}, rng);
        auto fused = random_tensor<double>({H, W, C}, rng, true);
        auto mask_feat = random_tensor<double>({H, W, C}, rng, true);
        auto text = random_tensor<double>({3, C}, rng, true);
        auto target = random_tensor<double>({H, W}, rng, false, 0.05, 0.95);
        auto f = [&] { return sum_all(mmca(text, fused, mask_feat, text, target, w)); };
        CHECK(grad_check(f,
                         {fused, mask_feat, text, w.conv1x1.kernel, w.conv3x3.kernel, w.fuse.weight,
                          w.query_proj.weight, w.key_proj.weight, w.value_proj.weight, w.out_proj.weight,
                          w.out_proj.bias},
                         1e-5) < 1e-4);
    }
}

TEST_CASE("mmca configuration and input validation") {
    Rng rng(12);
    CHECK_THROWS_AS(MMCAWeights<double>::make({5, 2, false}, rng), ConfigError);

    const int C = 4;
    auto w = MMCAWeights<double>::make({C, 2, false}, rng);
    auto fused = Tensor<double>::zeros({2, 2, C});
    auto text = Tensor<double>::zeros({2, C});
    auto bad_mask = Tensor<double>::full({2, 2}, 1.5);
    CHECK_THROWS_AS(mmca(text, fused, fused, text, bad_mask, w), ContractError);
    auto wrong = Tensor<double>::zeros({2, 2, C + 1});
    auto good_mask = Tensor<double>::zeros({2, 2});
    CHECK_THROWS_AS(mmca(text, fused, wrong, text, good_mask, w), DimensionError);
}
