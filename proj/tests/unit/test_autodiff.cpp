#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>

#include "eegscreen/ad_ops.hpp"
#include "eegscreen/optim.hpp"
#include "oracles.hpp"

using namespace eegscreen::ad;

namespace {

using oracle::grad_check;
using oracle::Probe;
using oracle::randn;

constexpr double kTol = 1e-4;

class Seeded : public ::testing::TestWithParam<int> {
protected:
    std::mt19937_64 rng{static_cast<std::uint64_t>(GetParam()) * 7919u + 1};
};

}  // namespace

TEST_P(Seeded, ElementwiseAndShapeOps) {
    auto a = randn({3, 4}, rng), b = randn({3, 4}, rng);
    Probe p;
    EXPECT_LT(grad_check({a, b}, [&] { return p(add(mul(a, b), scale(tanh(a), 0.7))); }), kTol);
    EXPECT_LT(grad_check({a}, [&] { return p(elu(a)); }), kTol);
    EXPECT_LT(grad_check({a}, [&] { return p(sigmoid(a)); }), kTol);
    EXPECT_LT(grad_check({a}, [&] { return p(relu(a)); }), kTol);
    EXPECT_LT(grad_check({a, b}, [&] { return p(concat_rows({slice_rows(a, 1, 2), transpose(reshape(b, {4, 3}))})); }), kTol);
    EXPECT_LT(grad_check({a}, [&] { return mean(a); }), kTol);
}

TEST_P(Seeded, DenseLayers) {
    auto x = randn({5, 6}, rng), w = randn({4, 6}, rng), b = randn({4}, rng), m = randn({6, 3}, rng);
    Probe p;
    EXPECT_LT(grad_check({x, w, b}, [&] { return p(linear(x, w, b)); }), kTol);
    EXPECT_LT(grad_check({x, m}, [&] { return p(matmul(x, m)); }), kTol);
    EXPECT_LT(grad_check({x}, [&] { return p(softmax_rows(x)); }), kTol);
    auto g = randn({6}, rng), be = randn({6}, rng);
    EXPECT_LT(grad_check({x, g, be}, [&] { return p(layer_norm(x, g, be)); }), kTol);
}

TEST_P(Seeded, DropoutSeeded) {
    auto x = randn({4, 5}, rng);
    Probe p;
    const auto seed = rng();
    auto f = [&] {
        std::mt19937_64 r(seed);
        return p(dropout(x, 0.3, true, r));
    };
    EXPECT_LT(grad_check({x}, f), kTol);
    EXPECT_DOUBLE_EQ(f().item(), f().item());
}

TEST_P(Seeded, BatchNorm) {
    auto x = randn({3, 4, 5}, rng), g = randn({4}, rng), b = randn({4}, rng);
    BatchNormState st(4);
    Probe p;
    EXPECT_LT(grad_check({x, g, b}, [&] { return p(batch_norm(x, g, b, st, true)); }), kTol);
    EXPECT_LT(grad_check({x, g, b}, [&] { return p(batch_norm(x, g, b, st, false)); }), kTol);
}

TEST_P(Seeded, Convolutions) {
    Probe p;
    auto x = randn({2, 3, 20}, rng), wt = randn({2, 5}, rng);
    EXPECT_LT(grad_check({x, wt}, [&] { return p(temporal_conv(x, wt, 2)); }), kTol);
    auto x4 = randn({2, 2, 3, 7}, rng), ws = randn({4, 3}, rng);
    EXPECT_LT(grad_check({x4, ws}, [&] { return p(depthwise_spatial(x4, ws)); }), kTol);
    auto wd = randn({3, 4}, rng);
    EXPECT_LT(grad_check({x, wd}, [&] { return p(depthwise_temporal(x, wd, 1)); }), kTol);
    auto wp = randn({5, 3}, rng);
    EXPECT_LT(grad_check({x, wp}, [&] { return p(pointwise(x, wp)); }), kTol);
    EXPECT_LT(grad_check({x}, [&] { return p(avg_pool_time(x, 3)); }), kTol);
}

TEST_P(Seeded, FusedFrontEndGradients) {
    auto x = randn({3, 4, 16}, rng, false), wt = randn({2, 5}, rng), ws = randn({4, 4}, rng);
    auto g = randn({2}, rng), b = randn({2}, rng);
    BatchNormState st(2);
    Probe p;
    EXPECT_LT(grad_check({wt, ws, g, b}, [&] { return p(fused_temporal_spatial(x, wt, ws, g, b, st, true, 2)); }), kTol);
    EXPECT_LT(grad_check({wt, ws, g, b}, [&] { return p(fused_temporal_spatial(x, wt, ws, g, b, st, false, 2)); }), kTol);
}

TEST_P(Seeded, FusedFrontEndMatchesUnfused) {
    auto x = randn({4, 5, 40}, rng, false), wt = randn({3, 8}, rng), ws = randn({6, 5}, rng);
    auto g = randn({3}, rng), b = randn({3}, rng);
    for (bool training : {true, false}) {
        BatchNormState s1(3), s2(3);
        s1.running_mean = s2.running_mean = {0.1, -0.2, 0.3};
        s1.running_var = s2.running_var = {1.5, 0.7, 2.0};
        Probe p;
        const auto fused = fused_temporal_spatial(x, wt, ws, g, b, s1, training, 3);
        const auto ref = depthwise_spatial(batch_norm(temporal_conv(x, wt, 3), g, b, s2, training), ws);
        ASSERT_EQ(fused.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(fused.value()[i], ref.value()[i], 1e-10);
        for (int c = 0; c < 3; ++c) {
            EXPECT_NEAR(s1.running_mean[static_cast<std::size_t>(c)], s2.running_mean[static_cast<std::size_t>(c)], 1e-12);
            EXPECT_NEAR(s1.running_var[static_cast<std::size_t>(c)], s2.running_var[static_cast<std::size_t>(c)], 1e-10);
        }
        std::vector<Buffer> gf, gr;
        for (const auto* out : {&fused, &ref}) {
            for (auto* t : {&wt, &ws, &g, &b}) t->zero_grad();
            backward(p(*out));
            auto& dst = out == &fused ? gf : gr;
            for (auto* t : {&wt, &ws, &g, &b}) dst.push_back(t->grad());
        }
        for (std::size_t k = 0; k < gf.size(); ++k)
            for (std::size_t i = 0; i < gf[k].size(); ++i) EXPECT_NEAR(gf[k][i], gr[k][i], 1e-8 * std::max(1.0, std::abs(gr[k][i])));
    }
}

TEST_P(Seeded, SegmentOps) {
    const std::vector<int> off{0, 3, 4, 7};
    auto s = randn({7, 1}, rng), v = randn({7, 3}, rng);
    Probe p;
    EXPECT_LT(grad_check({s}, [&] { return p(segment_softmax(s, off)); }), kTol);
    EXPECT_LT(grad_check({s, v}, [&] { return p(segment_weighted_sum(s, v, off)); }), kTol);
    EXPECT_LT(grad_check({v}, [&] { return p(segment_mean(v, off)); }), kTol);
}

TEST_P(Seeded, MultiHeadAttention) {
    const std::vector<int> off{0, 4, 9};
    auto qkv = randn({9, 12}, rng);
    Probe p;
    std::mt19937_64 r0(1);
    EXPECT_LT(grad_check({qkv}, [&] { return p(multi_head_attention_core(qkv, 2, off, 0.0, false, r0)); }), kTol);
    const auto seed = rng();
    EXPECT_LT(grad_check({qkv}, [&] {
                  std::mt19937_64 r(seed);
                  return p(multi_head_attention_core(qkv, 2, off, 0.2, true, r));
              }),
              kTol);
}

TEST_P(Seeded, Losses) {
    auto z = randn({6, 1}, rng, true, 2.0);
    const std::vector<double> y{1, 0, 1, 1, 0, 0};
    EXPECT_LT(grad_check({z}, [&] { return bce_with_logits(z, y); }), 1e-6);
    const std::vector<int> off{0, 2, 6};
    const std::vector<double> yr{1, 0};
    EXPECT_LT(grad_check({z}, [&] { return geo_mean_bce(z, off, yr); }), kTol);
}

TEST_P(Seeded, ThreeLayerStack) {
    auto x = randn({6, 5}, rng), w1 = randn({8, 5}, rng), b1 = randn({8}, rng), w2 = randn({8, 8}, rng), w3 = randn({1, 8}, rng);
    auto g = randn({8}, rng), be = randn({8}, rng);
    const std::vector<double> y{1, 0, 1, 0, 0, 1};
    EXPECT_LT(grad_check({x, w1, b1, w2, w3, g, be}, [&] {
                  auto h = elu(linear(x, w1, b1));
                  h = layer_norm(tanh(linear(h, w2)), g, be);
                  return bce_with_logits(linear(h, w3), y);
              }),
              1e-3);
}

INSTANTIATE_TEST_SUITE_P(Seeds, Seeded, ::testing::Range(0, 20));

TEST(Autodiff, ShapeMismatchThrows) {
    auto a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
    EXPECT_THROW(add(a, b), ShapeMismatch);
    EXPECT_THROW(linear(a, Tensor::zeros({4, 2})), ShapeMismatch);
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeMismatch);
}

TEST(Autodiff, IdentityLinear) {
    std::mt19937_64 rng(3);
    auto x = randn({4, 3}, rng, false);
    auto w = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto y = linear(x, w, Tensor::zeros({3}));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], x.value()[i]);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    std::mt19937_64 rng(4);
    auto x = randn({5, 7}, rng, false, 10.0);
    auto y = softmax_rows(x);
    for (int r = 0; r < 5; ++r) EXPECT_NEAR(cmat(y.value(), 5, 7).row(r).sum(), 1.0, 1e-12);
}

TEST(Autodiff, DropoutIdentityInEval) {
    std::mt19937_64 rng(5);
    auto x = randn({3, 3}, rng);
    auto y = dropout(x, 0.5, false, rng);
    EXPECT_EQ(y.value(), x.value());
}

TEST(Autodiff, NoGradBuildsNoGraph) {
    auto a = Tensor::zeros({2}, true);
    NoGradGuard ng;
    EXPECT_FALSE(scale(a, 2).requires_grad());
}

TEST(Bce, AnalyticValues) {
    EXPECT_NEAR(bce_with_logits(Tensor::from({1}, {0.0}), std::vector<double>{1}).item(), std::log(2.0), 1e-15);
    EXPECT_LT(bce_with_logits(Tensor::from({1}, {20.0}), std::vector<double>{1}).item(), 1e-8);
    EXPECT_NEAR(bce_with_logits(Tensor::from({1}, {-800.0}), std::vector<double>{1}).item(), 800.0, 1e-9);
    auto z = Tensor::from({1}, {0.3}, true);
    backward(bce_with_logits(z, std::vector<double>{0}));
    EXPECT_NEAR(z.grad()[0], 1.0 / (1.0 + std::exp(-0.3)), 1e-15);
}

TEST(Bce, GeometricMeanOfOneFrameIsPlainBce) {
    auto z = Tensor::from({1}, {0.8});
    const std::vector<int> off{0, 1};
    EXPECT_NEAR(geo_mean_bce(z, off, std::vector<double>{0}).item(), bce_with_logits(z, std::vector<double>{0}).item(), 1e-12);
}

TEST(RAdam, ZeroGradientsLeaveParameters) {
    auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    RAdam opt({{"w", w}}, {.lr = 0.1});
    for (int i = 0; i < 50; ++i) {
        opt.zero_grad();
        w.grad();  // allocate zeros
        opt.step();
    }
    EXPECT_EQ(w.value(), (Buffer{1.0, -2.0, 0.5}));
}

TEST(RAdam, FirstStepIsNotAdaptive) {
    RAdam opt({});
    EXPECT_NEAR(opt.rho(1), 1.0, 1e-9);
    EXPECT_FALSE(opt.adaptive(1));
    EXPECT_FALSE(opt.adaptive(4));
    EXPECT_TRUE(opt.adaptive(5));
    // First step moves by lr * g.
    auto w = Tensor::from({1}, {1.0}, true);
    RAdam o2({{"w", w}}, {.lr = 0.01});
    w.grad()[0] = 3.0;
    o2.step();
    EXPECT_NEAR(w.value()[0], 1.0 - 0.03, 1e-15);
}

TEST(RAdam, QuadraticConverges) {
    auto w = Tensor::from({1}, {2.0}, true);
    RAdam opt({{"w", w}}, {.lr = 1e-2});
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        auto d = add(w, Tensor::from({1}, {-1.5}));
        backward(mul(d, d));
        opt.step();
    }
    EXPECT_NEAR(w.value()[0], 1.5, 1e-3);
}

TEST(RAdam, NonFiniteGradientThrows) {
    auto w = Tensor::from({1}, {1.0}, true);
    RAdam opt({{"w", w}});
    w.grad()[0] = std::nan("");
    EXPECT_THROW(opt.step(), NonFiniteGradient);
}

TEST(Checkpoint, RoundTrip) {
    Buffer a{1.5, -2.25, 3e-300}, b{42};
    const auto path = (std::filesystem::temp_directory_path() / "eegscreen_ckpt_test.bin").string();
    save_checkpoint(path, {{"kind", "test"}}, {{"a", {3}, &a}, {"b", {1, 1}, &b}});
    Buffer a2(3), b2(1);
    const auto arch = load_checkpoint(path, {{"a", {3}, &a2}, {"b", {1, 1}, &b2}});
    EXPECT_EQ(arch.at("kind"), "test");
    EXPECT_EQ(a2, a);
    EXPECT_EQ(b2, b);
    Buffer wrong(2);
    EXPECT_THROW(load_checkpoint(path, {{"a", {2}, &wrong}, {"b", {1, 1}, &b2}}), eegscreen::Error);
    std::filesystem::remove(path);
}
