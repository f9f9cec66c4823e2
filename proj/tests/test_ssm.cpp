#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mambatrans/ssm.hpp"

using namespace mambatrans;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, T lo = T(-1), T hi = T(1)) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// Independent step-by-step recurrence, plain loops only. Mirrors the
// documented parameterization: delta = max(softplus(x W_dt + b_dt), floor),
// B/C from their projections, A = -exp(A_log), h_0 = 0.
std::vector<double> scan_oracle(const std::vector<double>& x, int L, int C, int N,
                                const SSMParams<double>& p) {
    auto lin = [&](const Tensor<double>& W, const Tensor<double>& b, int out_dim, int t) {
        std::vector<double> r(static_cast<size_t>(out_dim));
        for (int o = 0; o < out_dim; ++o) {
            double acc = b.data()[static_cast<size_t>(o)];
            for (int c = 0; c < C; ++c)
                acc += x[static_cast<size_t>(t) * C + c] * W.data()[static_cast<size_t>(c) * out_dim + o];
            r[static_cast<size_t>(o)] = acc;
        }
        return r;
    };
    std::vector<double> h(static_cast<size_t>(C) * N, 0.0);
    std::vector<double> y(static_cast<size_t>(L) * C);
    for (int t = 0; t < L; ++t) {
        auto dpre = lin(p.dt_proj.weight, p.dt_proj.bias, C, t);
        auto B = lin(p.B_proj.weight, p.B_proj.bias, N, t);
        auto Cv = lin(p.C_proj.weight, p.C_proj.bias, N, t);
        for (int c = 0; c < C; ++c) {
            const double sp = dpre[static_cast<size_t>(c)] > 30.0
                                  ? dpre[static_cast<size_t>(c)]
                                  : std::log1p(std::exp(dpre[static_cast<size_t>(c)]));
            const double dt = std::max(sp, kDeltaFloor);
            const double xt = x[static_cast<size_t>(t) * C + c];
            double acc = p.D.data()[static_cast<size_t>(c)] * xt;
            for (int n = 0; n < N; ++n) {
                const double A = -std::exp(p.A_log.data()[static_cast<size_t>(c) * N + n]);
                double& hn = h[static_cast<size_t>(c) * N + n];
                hn = std::exp(dt * A) * hn + dt * B[static_cast<size_t>(n)] * xt;
                acc += Cv[static_cast<size_t>(n)] * hn;
            }
            y[static_cast<size_t>(t) * C + c] = acc;
        }
    }
    return y;
}

}  // namespace

TEST_CASE("selective_scan_1d with L=1 matches the no-history formula") {
    Rng rng(2);
    const int C = 3, N = 4;
    auto p = SSMParams<double>::make(C, N, rng);
    auto x = random_tensor<double>({1, C}, rng);
    auto y = selective_scan_1d(x, p);
    auto expect = scan_oracle(x.data(), 1, C, N, p);
    // at L=1 the oracle reduces to y = C_1 . (dt_1 B_1 x_1) + D x_1
    for (int c = 0; c < C; ++c)
        CHECK(y.data()[static_cast<size_t>(c)] == doctest::Approx(expect[static_cast<size_t>(c)]).epsilon(1e-12));
}

TEST_CASE("selective_scan_1d is memoryless in the fast-decay limit") {
    Rng rng(3);
    const int L = 6, C = 2, N = 3;
    auto p = SSMParams<double>::make(C, N, rng);
    // exp(A_log) = e^20 makes Abar = exp(-delta e^20) vanish for any
    // delta >= the floor, killing all history
    for (auto& v : p.A_log.data()) v = 20.0;
    auto x = random_tensor<double>({L, C}, rng);
    auto y = selective_scan_1d(x, p);
    // memoryless prediction: y_t = C_t . (dt_t B_t x_t) + D x_t
    auto single_step = [&](int t) {
        std::vector<double> row(x.data().begin() + t * C, x.data().begin() + (t + 1) * C);
        return scan_oracle(row, 1, C, N, p);
    };
    for (int t = 0; t < L; ++t) {
        auto expect = single_step(t);
        for (int c = 0; c < C; ++c)
            CHECK(y.data()[static_cast<size_t>(t) * C + c] ==
                  doctest::Approx(expect[static_cast<size_t>(c)]).epsilon(1e-9));
    }
}

TEST_CASE("selective_scan_1d equals the sequential oracle on 100 random instances") {
    Rng rng(1234);
    for (int trial = 0; trial < 100; ++trial) {
        const int L = 1 + static_cast<int>(rng.uniform_int(32));
        const int C = 1 + static_cast<int>(rng.uniform_int(8));
        const int N = 1 + static_cast<int>(rng.uniform_int(8));
        auto p = SSMParams<double>::make(C, N, rng);
        auto x = random_tensor<double>({L, C}, rng);
        auto y = selective_scan_1d(x, p);
        auto expect = scan_oracle(x.data(), L, C, N, p);
        double max_abs = 0;
        for (size_t i = 0; i < expect.size(); ++i)
            max_abs = std::max(max_abs, std::fabs(y.data()[i] - expect[i]));
        CHECK(max_abs < 1e-6);
    }
}

TEST_CASE("selective_scan_1d is causal") {
    Rng rng(9);
    const int L = 10, C = 3, N = 4;
    auto p = SSMParams<double>::make(C, N, rng);
    auto x = random_tensor<double>({L, C}, rng);
    auto y0 = selective_scan_1d(x, p);
    const int t = 6;
    auto x2 = Tensor<double>::from_data(x.shape(), x.data());
    x2.data()[static_cast<size_t>(t) * C + 1] += 0.5;
    auto y1 = selective_scan_1d(x2, p);
    for (int i = 0; i < t * C; ++i) CHECK(y0.data()[static_cast<size_t>(i)] == y1.data()[static_cast<size_t>(i)]);
    // and the perturbation does reach t onwards
    double diff = 0;
    for (size_t i = static_cast<size_t>(t) * C; i < y0.data().size(); ++i)
        diff += std::fabs(y0.data()[i] - y1.data()[i]);
    CHECK(diff > 0);
}

TEST_CASE("selective_scan_1d gradients match finite differences") {
    Rng rng(17);
    const int L = 5, C = 3, N = 4;
    auto p = SSMParams<double>::make(C, N, rng);
    // lift deltas into [0.05, 0.5] so no A_log coordinate has a vanishing
    // gradient (finite differences lose accuracy at near-zero gradients)
    for (auto& b : p.dt_proj.bias.data()) {
        const double dt = std::exp(rng.uniform(std::log(0.05), std::log(0.5)));
        b = std::log(std::expm1(dt));
    }
    auto x = random_tensor<double>({L, C}, rng, true);
    auto w = random_tensor<double>({L, C}, rng);
    auto f = [&] {
        auto s = selective_scan_1d(x, p);
        return sum_all(mul(s, add(s, w)));
    };
    CHECK(grad_check(f, {x, p.A_log, p.D, p.dt_proj.weight, p.dt_proj.bias, p.B_proj.weight,
                         p.C_proj.weight},
                     1e-5) < 1e-4);
}

TEST_CASE("selective_scan_1d rejects channel mismatch") {
    Rng rng(4);
    auto p = SSMParams<double>::make(3, 2, rng);
    auto x = Tensor<double>::zeros({4, 5});
    CHECK_THROWS_AS(selective_scan_1d(x, p), DimensionError);
}

TEST_CASE("scan_flatten orders a 2x2 map per the direction definitions") {
    // [[a,b],[c,d]] with one channel
    auto fmap = Tensor<double>::from_data({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
    auto get = [&](ScanDirection d) {
        auto seq = scan_flatten(fmap, d);
        return seq.data();
    };
    CHECK(get(ScanDirection::TL_BR) == std::vector<double>{1, 2, 3, 4});
    CHECK(get(ScanDirection::BR_TL) == std::vector<double>{4, 3, 2, 1});
    CHECK(get(ScanDirection::TR_BL) == std::vector<double>{2, 1, 4, 3});
    CHECK(get(ScanDirection::BL_TR) == std::vector<double>{3, 4, 1, 2});
}

TEST_CASE("scan_flatten of a 1x1 map is the same for all directions") {
    auto fmap = Tensor<double>::from_data({1, 1, 2}, {5.0, 6.0});
    for (auto d : {ScanDirection::TL_BR, ScanDirection::BR_TL, ScanDirection::TR_BL, ScanDirection::BL_TR}) {
        auto seq = scan_flatten(fmap, d);
        CHECK(seq.shape() == Shape{1, 2});
        CHECK(seq.data() == fmap.data());
    }
}

TEST_CASE("scan_unflatten inverts scan_flatten for every direction") {
    Rng rng(31);
    auto fmap = random_tensor<double>({5, 7, 3}, rng);
    for (auto d : {ScanDirection::TL_BR, ScanDirection::BR_TL, ScanDirection::TR_BL, ScanDirection::BL_TR}) {
        auto back = scan_unflatten(scan_flatten(fmap, d), d, 5, 7);
        CHECK(back.shape() == fmap.shape());
        for (size_t i = 0; i < fmap.data().size(); ++i) CHECK(back.data()[i] == fmap.data()[i]);
    }
}

TEST_CASE("scan helpers reject the text direction and bad lengths") {
    auto fmap = Tensor<double>::zeros({2, 2, 1});
    CHECK_THROWS_AS(scan_flatten(fmap, ScanDirection::Text), ContractError);
    auto seq = Tensor<double>::zeros({3, 1});
    CHECK_THROWS_AS(scan_unflatten(seq, ScanDirection::TL_BR, 2, 2), DimensionError);
}

TEST_CASE("direction coherence under horizontal mirroring") {
    Rng rng(8);
    const int H = 4, W = 5, C = 2, N = 3;
    auto p = SSMParams<double>::make(C, N, rng);
    auto fmap = random_tensor<double>({H, W, C}, rng);
    auto mirrored = Tensor<double>::zeros({H, W, C});
    for (int r = 0; r < H; ++r)
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < C; ++c)
                mirrored.data()[(static_cast<size_t>(r) * W + j) * C + c] =
                    fmap.data()[(static_cast<size_t>(r) * W + (W - 1 - j)) * C + c];

    auto via_mirror = scan_unflatten(selective_scan_1d(scan_flatten(mirrored, ScanDirection::TL_BR), p),
                                     ScanDirection::TL_BR, H, W);
    auto direct = scan_unflatten(selective_scan_1d(scan_flatten(fmap, ScanDirection::TR_BL), p),
                                 ScanDirection::TR_BL, H, W);
    // mirroring the TL_BR output of the mirrored map == TR_BL output of the original
    for (int r = 0; r < H; ++r)
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < C; ++c)
                CHECK(via_mirror.data()[(static_cast<size_t>(r) * W + (W - 1 - j)) * C + c] ==
                      direct.data()[(static_cast<size_t>(r) * W + j) * C + c]);
}

TEST_CASE("scan3d: zero text with zero text skip leaves only the spatial sum") {
    Rng rng(21);
    const int H = 3, W = 4, C = 3, N = 2;
    std::array<SSMParams<double>, 4> sp = {
        SSMParams<double>::make(C, N, rng), SSMParams<double>::make(C, N, rng),
        SSMParams<double>::make(C, N, rng), SSMParams<double>::make(C, N, rng)};
    auto tp = SSMParams<double>::make(C, N, rng);
    for (auto& v : tp.D.data()) v = 0.0;
    auto img = random_tensor<double>({H, W, C}, rng);
    auto text = Tensor<double>::zeros({2, C});
    auto out = scan3d(img, text, sp, tp);
    for (double v : out.y_text.data()) CHECK(v == 0.0);
    for (size_t i = 0; i < out.y.data().size(); ++i) {
        const double spatial = out.y1.data()[i] + out.y2.data()[i] + out.y3.data()[i] + out.y4.data()[i];
        CHECK(out.y.data()[i] == spatial);
    }
}

TEST_CASE("scan3d at H=W=1 with tied parameters gives equal spatial outputs") {
    Rng rng(22);
    const int C = 4, N = 3;
    auto shared = SSMParams<double>::make(C, N, rng);
    std::array<SSMParams<double>, 4> tied = {shared, shared, shared, shared};
    auto tp = SSMParams<double>::make(C, N, rng);
    auto img = random_tensor<double>({1, 1, C}, rng);
    auto text = random_tensor<double>({3, C}, rng);
    auto out = scan3d(img, text, tied, tp);
    for (int c = 0; c < C; ++c) {
        CHECK(out.y1.data()[static_cast<size_t>(c)] == out.y2.data()[static_cast<size_t>(c)]);
        CHECK(out.y1.data()[static_cast<size_t>(c)] == out.y3.data()[static_cast<size_t>(c)]);
        CHECK(out.y1.data()[static_cast<size_t>(c)] == out.y4.data()[static_cast<size_t>(c)]);
    }

    // with four independent parameter sets the outputs differ
    std::array<SSMParams<double>, 4> indep = {
        SSMParams<double>::make(C, N, rng), SSMParams<double>::make(C, N, rng),
        SSMParams<double>::make(C, N, rng), SSMParams<double>::make(C, N, rng)};
    auto out2 = scan3d(img, text, indep, tp);
    double diff = 0;
    for (int c = 0; c < C; ++c)
        diff += std::fabs(out2.y1.data()[static_cast<size_t>(c)] - out2.y2.data()[static_cast<size_t>(c)]);
    CHECK(diff > 0);
}

TEST_CASE("scan3d sum identity on random inputs") {
    Rng rng(23);
    const int H = 4, W = 3, C = 2, N = 2;
    std::array<SSMParams<double>, 4> sp = {
        SSMParams<double>::make(C, N, rng), SSMParams<double>::make(C, N, rng),
        SSMParams<double>::make(C, N, rng), SSMParams<double>::make(C, N, rng)};
    auto tp = SSMParams<double>::make(C, N, rng);
    auto img = random_tensor<double>({H, W, C}, rng);
    auto text = random_tensor<double>({5, C}, rng);
    auto out = scan3d(img, text, sp, tp);
    // recompute the sum outside the operation, in the same association order
    auto manual = add(add(add(add(out.y1, out.y2), out.y3), out.y4), out.y_text);
    for (size_t i = 0; i < out.y.data().size(); ++i) CHECK(out.y.data()[i] == manual.data()[i]);

    // channel mismatch is rejected
    auto bad_text = Tensor<double>::zeros({2, C + 1});
    CHECK_THROWS_AS(scan3d(img, bad_text, sp, tp), DimensionError);
}
