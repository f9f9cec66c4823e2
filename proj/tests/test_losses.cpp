#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mambatrans/losses.hpp"

using namespace mambatrans;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, T lo = T(0), T hi = T(1)) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
void zero_head(Conv2dLayer<T>& c) {
    std::fill(c.kernel.data().begin(), c.kernel.data().end(), T(0));
    std::fill(c.bias.data().begin(), c.bias.data().end(), T(0));
}

}  // namespace

TEST_CASE("charbonnier: zero-difference case equals (alpha+beta)*n*eps") {
    auto img = Tensor<double>::from_data({2, 2, 1}, {0.1, 0.4, 0.7, 0.9});
    CharbonnierConfig cfg;  // alpha = beta = 0.5, eps = 1e-3
    auto loss = charbonnier_loss(img, img, img, cfg);
    CHECK(std::fabs(loss.item() - (0.5 + 0.5) * 4 * 1e-3) < 1e-12);
}

TEST_CASE("charbonnier: single-pixel unit difference") {
    auto out = Tensor<double>::from_data({1, 1, 1}, {1.0});
    auto ref = Tensor<double>::from_data({1, 1, 1}, {0.0});
    CharbonnierConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 0.0;
    auto loss = charbonnier_loss(out, ref, ref, cfg);
    CHECK(loss.item() == doctest::Approx(std::sqrt(1.0 + 1e-6)).epsilon(1e-12));
    CHECK(loss.item() == doctest::Approx(1.0000005).epsilon(1e-9));
}

TEST_CASE("charbonnier: gradient w.r.t. the output matches finite differences") {
    Rng rng(3);
    auto out = random_tensor<double>({3, 3, 3}, rng, true);
    auto f = random_tensor<double>({3, 3, 3}, rng);
    auto v = random_tensor<double>({3, 3, 3}, rng);
    CharbonnierConfig cfg;
    auto fn = [&] { return charbonnier_loss(out, f, v, cfg); };
    CHECK(grad_check(fn, {out}, 1e-5) < 1e-4);
}

TEST_CASE("charbonnier: lower bound (alpha+beta)*n*eps holds, equality iff identical") {
    Rng rng(4);
    CharbonnierConfig cfg;
    const double floor = (cfg.alpha + cfg.beta) * 27 * cfg.eps;
    for (int trial = 0; trial < 20; ++trial) {
        auto out = random_tensor<double>({3, 3, 3}, rng);
        auto f = random_tensor<double>({3, 3, 3}, rng);
        auto v = random_tensor<double>({3, 3, 3}, rng);
        CHECK(charbonnier_loss(out, f, v, cfg).item() >= floor);
        CHECK(charbonnier_loss(out, out, out, cfg).item() == doctest::Approx(floor).epsilon(1e-12));
        CHECK(charbonnier_loss(out, f, v, cfg).item() > floor);
    }
}

TEST_CASE("charbonnier: mean reduction divides by the scalar pixel count") {
    Rng rng(5);
    auto out = random_tensor<double>({2, 3, 3}, rng);
    auto f = random_tensor<double>({2, 3, 3}, rng);
    auto v = random_tensor<double>({2, 3, 3}, rng);
    CharbonnierConfig sum_cfg;
    CharbonnierConfig mean_cfg;
    mean_cfg.reduction = CharbonnierConfig::Reduction::Mean;
    CHECK(charbonnier_loss(out, f, v, mean_cfg).item() ==
          doctest::Approx(charbonnier_loss(out, f, v, sum_cfg).item() / 18).epsilon(1e-12));
}

TEST_CASE("detection loss: empty targets with zero heads give obj = A*log(2)") {
    auto det = make_detector<double>(DetectorConfig{}, 7);
    zero_head(det.proposal_head);
    zero_head(det.cls_head);
    Rng rng(8);
    auto image = random_tensor<double>({32, 32, 3}, rng);
    DetectionTargets targets;
    targets.width = 32;
    targets.height = 32;
    auto parts = detection_loss(image, targets, det);
    const int A = 4 * 4;  // 32 -> 16 -> 8 -> 4 feature grid
    CHECK(parts.obj.item() == doctest::Approx(A * std::log(2.0)).epsilon(1e-12));
    CHECK(parts.cls.item() == 0.0);
    CHECK(parts.bbox.item() == 0.0);
    CHECK(parts.rpn.item() == 0.0);
}

TEST_CASE("detection loss: total is exactly the sum of the four parts") {
    auto det = make_detector<double>(DetectorConfig{}, 9);
    Rng rng(10);
    auto image = random_tensor<double>({32, 32, 3}, rng);
    DetectionTargets targets;
    targets.width = 32;
    targets.height = 32;
    targets.boxes = {{4, 4, 20, 20}, {18, 14, 30, 29}};
    targets.labels = {1, 2};
    auto parts = detection_loss(image, targets, det);
    const double manual = add(add(parts.cls, parts.bbox), add(parts.obj, parts.rpn)).item();
    CHECK(parts.total.item() == manual);
    // the aligned 16x16 box matches at least one anchor, so every part is live
    CHECK(parts.cls.item() > 0.0);
    CHECK(parts.rpn.item() > 0.0);
    CHECK(parts.bbox.item() > 0.0);
}

TEST_CASE("detection loss: gradient descent on the image alone reduces the loss") {
    auto det = make_detector<double>(DetectorConfig{}, 11);
    // fan-in init attenuates activations layer by layer; amplify so the
    // untrained detector's outputs actually respond to the image
    for (auto& [name, t] : det.parameters())
        if (name.find("kernel") != std::string::npos)
            for (auto& v : t.data()) v *= 4.0;
    det.set_frozen(true);
    Rng rng(12);
    auto image = random_tensor<double>({32, 32, 3}, rng, true);
    DetectionTargets targets;
    targets.width = 32;
    targets.height = 32;
    targets.boxes = {{4, 4, 20, 20}};
    targets.labels = {0};

    double initial = 0, final_loss = 0, prev = 0;
    int decreases = 0;
    const double lr = 1e-2;
    for (int step = 0; step < 200; ++step) {
        GradTape<double> tape;
        TapeScope<double> scope(tape);
        auto parts = detection_loss(image, targets, det);
        if (step == 0) initial = parts.total.item();
        if (step > 0 && parts.total.item() < prev) ++decreases;
        prev = final_loss = parts.total.item();
        backward(parts.total, tape);
        for (size_t i = 0; i < image.data().size(); ++i) image.data()[i] -= lr * image.grad()[i];
    }
    CHECK(final_loss < 0.5 * initial);
    CHECK(decreases >= 190);  // monotone on average, pinned seed
}

TEST_CASE("detection loss: frozen detector parameters receive no gradient") {
    auto det = make_detector<double>(DetectorConfig{}, 13);
    det.set_frozen(true);
    auto before = det.parameters();
    std::vector<std::vector<double>> snapshot;
    for (auto& [name, t] : before) snapshot.push_back(t.data());

    Rng rng(14);
    auto image = random_tensor<double>({32, 32, 3}, rng, true);
    DetectionTargets targets;
    targets.width = 32;
    targets.height = 32;
    targets.boxes = {{6, 6, 22, 22}};
    targets.labels = {2};
    GradTape<double> tape;
    {
        TapeScope<double> scope(tape);
        auto parts = detection_loss(image, targets, det);
        backward(parts.total, tape);
    }
    double img_grad = 0;
    for (double g : image.grad()) img_grad += std::fabs(g);
    CHECK(img_grad > 0);  // gradients flow through the frozen detector to the image
    auto after = det.parameters();
    for (size_t i = 0; i < after.size(); ++i) {
        CHECK(after[i].second.data() == snapshot[i]);
        for (double g : after[i].second.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("detection loss: gradient w.r.t. the image matches finite differences") {
    DetectorConfig cfg;
    cfg.anchor_size = 8.0;
    auto det = make_detector<double>(cfg, 15);
    det.set_frozen(true);
    Rng rng(16);
    auto image = random_tensor<double>({16, 16, 3}, rng, true);
    DetectionTargets targets;
    targets.width = 16;
    targets.height = 16;
    targets.boxes = {{0, 0, 8, 8}};  // IoU 1 with the first anchor, far from thresholds
    targets.labels = {1};
    auto f = [&] { return detection_loss(image, targets, det).total; };
    CHECK(grad_check(f, {image}, 1e-5) < 1e-4);
}

TEST_CASE("detection loss: gradients w.r.t. detector parameters (pretraining mode)") {
    DetectorConfig cfg;
    cfg.anchor_size = 8.0;
    auto det = make_detector<double>(cfg, 17);
    Rng rng(18);
    auto image = random_tensor<double>({16, 16, 3}, rng);
    DetectionTargets targets;
    targets.width = 16;
    targets.height = 16;
    targets.boxes = {{0, 0, 8, 8}};
    targets.labels = {0};
    auto f = [&] { return detection_loss(image, targets, det).total; };
    // h = 1e-4: several head coordinates carry near-zero gradients where
    // finite-difference roundoff at 1e-5 would swamp the comparison
    CHECK(grad_check(f,
                     {det.conv1.kernel, det.conv2.bias, det.conv3.kernel, det.proposal_head.kernel,
                      det.cls_head.kernel, det.cls_head.bias},
                     1e-4) < 1e-4);
}

TEST_CASE("tac loss: theta = 0 degenerates to lambda * charbonnier exactly") {
    auto det = make_detector<double>(DetectorConfig{}, 19);
    det.set_frozen(true);
    Rng rng(20);
    auto out = random_tensor<double>({32, 32, 3}, rng);
    auto f = random_tensor<double>({32, 32, 3}, rng);
    auto v = random_tensor<double>({32, 32, 3}, rng);
    DetectionTargets targets;
    targets.width = 32;
    targets.height = 32;
    TACConfig<double> cfg;
    cfg.detector = &det;
    cfg.theta = 0.0;
    auto parts = tac_loss(out, f, v, targets, cfg);
    CHECK(parts.total.item() == cfg.lambda * parts.charbonnier.item());

    // both weights zero: the loss vanishes identically
    cfg.lambda = 0.0;
    CHECK(tac_loss(out, f, v, targets, cfg).total.item() == 0.0);
}

TEST_CASE("tac loss: defaults are lambda = 5, theta = 1") {
    TACConfig<double> cfg;
    CHECK(cfg.lambda == 5.0);
    CHECK(cfg.theta == 1.0);
    CHECK(cfg.charbonnier.eps == 1e-3);
}

TEST_CASE("tac loss: doubling lambda adds exactly lambda * charbonnier") {
    auto det = make_detector<double>(DetectorConfig{}, 21);
    det.set_frozen(true);
    Rng rng(22);
    auto out = random_tensor<double>({32, 32, 3}, rng);
    auto f = random_tensor<double>({32, 32, 3}, rng);
    auto v = random_tensor<double>({32, 32, 3}, rng);
    DetectionTargets targets;
    targets.width = 32;
    targets.height = 32;
    targets.boxes = {{8, 8, 24, 24}};
    targets.labels = {1};
    TACConfig<double> cfg;
    cfg.detector = &det;
    auto base = tac_loss(out, f, v, targets, cfg);
    TACConfig<double> doubled = cfg;
    doubled.lambda = 2 * cfg.lambda;
    auto two = tac_loss(out, f, v, targets, doubled);
    CHECK(two.total.item() - base.total.item() ==
          doctest::Approx(cfg.lambda * base.charbonnier.item()).epsilon(1e-12));
}

TEST_CASE("detection targets validation") {
    DetectionTargets t;
    t.width = 32;
    t.height = 32;
    t.boxes = {{10, 10, 5, 20}};  // x2 < x1
    t.labels = {0};
    CHECK_THROWS_AS(t.validate(3), DataError);
    t.boxes = {{0, 0, 10, 10}};
    t.labels = {7};
    CHECK_THROWS_AS(t.validate(3), DataError);
    t.labels = {2};
    CHECK_NOTHROW(t.validate(3));
}
