#include "anchor/optim.hpp"
#include "anchor/tensor.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace anchor;
using namespace testing_support;

namespace {

constexpr double kTol = 1e-5;
constexpr int kShapes = 20;

std::size_t dim_in(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

}  // namespace

TEST(GradCheck, Matmul) {
    Rng rng(1);
    for (int s = 0; s < kShapes; ++s) {
        const auto m = dim_in(rng, 1, 5), k = dim_in(rng, 1, 6), n = dim_in(rng, 1, 5);
        std::vector<T64> in{random_tensor({m, k}, rng), random_tensor({k, n}, rng)};
        const auto w = random_weights(m * n, rng);
        EXPECT_LT(gradient_error([&](auto& x) { return project(matmul(x[0], x[1]), w); }, in), kTol);
    }
}

TEST(GradCheck, ElementwiseAddMulScale) {
    Rng rng(2);
    for (int s = 0; s < kShapes; ++s) {
        const Shape sh{dim_in(rng, 1, 4), dim_in(rng, 1, 5)};
        std::vector<T64> in{random_tensor(sh, rng), random_tensor(sh, rng)};
        const auto w = random_weights(element_count(sh), rng);
        const double f = rng.normal();
        EXPECT_LT(gradient_error([&](auto& x) { return project(scale(add(mul(x[0], x[1]), x[0]), f), w); }, in), kTol);
    }
}

TEST(GradCheck, ReluAndGelu) {
    Rng rng(3);
    for (int s = 0; s < kShapes; ++s) {
        const Shape sh{dim_in(rng, 1, 4), dim_in(rng, 1, 6)};
        std::vector<T64> in{random_away_from_zero(sh, rng)};
        const auto w = random_weights(element_count(sh), rng);
        EXPECT_LT(gradient_error([&](auto& x) { return project(relu(x[0]), w); }, in), kTol);
        EXPECT_LT(gradient_error([&](auto& x) { return project(gelu(x[0]), w); }, in), kTol);
    }
}

TEST(GradCheck, SoftmaxRows) {
    Rng rng(4);
    for (int s = 0; s < kShapes; ++s) {
        const Shape sh{dim_in(rng, 1, 4), dim_in(rng, 2, 7)};
        std::vector<T64> in{random_tensor(sh, rng, 2.0)};
        const auto w = random_weights(element_count(sh), rng);
        EXPECT_LT(gradient_error([&](auto& x) { return project(softmax_rows(x[0]), w); }, in), kTol);
    }
}

TEST(GradCheck, Norms) {
    Rng rng(5);
    for (int s = 0; s < kShapes; ++s) {
        const auto rows = dim_in(rng, 1, 4), d = dim_in(rng, 2, 8);
        std::vector<T64> in{random_tensor({rows, d}, rng), random_tensor({d}, rng), random_tensor({d}, rng)};
        const auto w = random_weights(rows * d, rng);
        EXPECT_LT(gradient_error([&](auto& x) { return project(rms_norm(x[0], x[1]), w); }, in), kTol);
        EXPECT_LT(gradient_error([&](auto& x) { return project(layer_norm(x[0], x[1], x[2]), w); }, in), kTol);
    }
}

TEST(GradCheck, Embedding) {
    Rng rng(6);
    for (int s = 0; s < kShapes; ++s) {
        const auto vocab = dim_in(rng, 2, 8), d = dim_in(rng, 1, 5), n = dim_in(rng, 1, 7);
        std::vector<std::int32_t> ids(n);
        for (auto& i : ids) i = static_cast<std::int32_t>(rng.index(vocab));  // repeats exercise accumulation
        std::vector<T64> in{random_tensor({vocab, d}, rng)};
        const auto w = random_weights(n * d, rng);
        EXPECT_LT(gradient_error([&](auto& x) { return project(embedding(x[0], ids), w); }, in), kTol);
    }
}

TEST(GradCheck, CausalAttention) {
    Rng rng(7);
    for (int s = 0; s < kShapes; ++s) {
        const std::size_t heads = dim_in(rng, 1, 3), dh = dim_in(rng, 1, 3), steps = dim_in(rng, 1, 6);
        const std::size_t d = heads * dh;
        std::vector<T64> in{random_tensor({steps, d}, rng), random_tensor({steps, d}, rng), random_tensor({steps, d}, rng)};
        const auto w = random_weights(steps * d, rng);
        EXPECT_LT(gradient_error([&](auto& x) { return project(causal_attention(x[0], x[1], x[2], heads), w); }, in), kTol);
    }
}

TEST(GradCheck, MaskedCrossEntropy) {
    Rng rng(8);
    for (int s = 0; s < kShapes; ++s) {
        const auto rows = dim_in(rng, 1, 6), cols = dim_in(rng, 2, 7);
        std::vector<std::int32_t> targets(rows);
        std::vector<std::uint8_t> mask(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            targets[r] = static_cast<std::int32_t>(rng.index(cols));
            mask[r] = rng.bernoulli(0.7);
        }
        mask[0] = 1;
        std::vector<T64> in{random_tensor({rows, cols}, rng, 2.0)};
        const double norm = 1.0 + rng.uniform() * 5.0;
        EXPECT_LT(gradient_error([&](auto& x) { return masked_cross_entropy(x[0], targets, mask, norm).loss; }, in), kTol);
    }
}

TEST(Tensor, ShapeMismatchThrows) {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2, 3});
    EXPECT_THROW(matmul(a, b), ShapeError);
    EXPECT_THROW(add(a, Tensor<double>::zeros({3, 2})), ShapeError);
    EXPECT_THROW(Tensor<double>::from({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(Tensor, MatmulValues) {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from({2, 1}, {5, 6});
    auto c = matmul(a, b);
    EXPECT_DOUBLE_EQ(c.values()[0], 17.0);
    EXPECT_DOUBLE_EQ(c.values()[1], 39.0);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
    Rng rng(9);
    auto x = random_tensor({3, 5}, rng, 10.0, false);
    auto p = softmax_rows(x);
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 5; ++c) s += p.at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Tensor, CausalAttentionIgnoresFuture) {
    Rng rng(10);
    auto q = random_tensor({4, 4}, rng, 1.0, false);
    auto k = random_tensor({4, 4}, rng, 1.0, false);
    auto v = random_tensor({4, 4}, rng, 1.0, false);
    const auto before = causal_attention(q, k, v, 2);
    // altering the last key and value leaves rows 0..2 unchanged
    for (std::size_t c = 0; c < 4; ++c) {
        k.mutable_values()[12 + c] += 3.0;
        v.mutable_values()[12 + c] -= 2.0;
    }
    const auto after = causal_attention(q, k, v, 2);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(before.values()[i], after.values()[i]);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
    auto a = Tensor<double>::from({1}, {2.0}, true);
    {
        NoGradGuard g;
        auto b = scale(a, 3.0);
        EXPECT_FALSE(b.requires_grad());
    }
    auto c = scale(a, 3.0);
    EXPECT_TRUE(c.requires_grad());
}

TEST(Tensor, FullyMaskedLossIsZero) {
    auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    std::vector<std::int32_t> t{0, 1};
    std::vector<std::uint8_t> m{0, 0};
    auto ce = masked_cross_entropy(x, t, m);
    EXPECT_TRUE(ce.empty());
    EXPECT_EQ(ce.loss.item(), 0.0);
    ce.loss.backward();
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Optim, ScheduleWarmupThenCosine) {
    const auto s = LrSchedule::with_ratio(1e-3, 0.1, 100);
    EXPECT_EQ(s.warmup, 10u);
    EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(s, 5), 5e-4);
    EXPECT_DOUBLE_EQ(lr_at(s, 10), 1e-3);
    // cosine: halfway through decay gives half the peak
    EXPECT_NEAR(lr_at(s, 55), 5e-4, 1e-12);
    EXPECT_LT(lr_at(s, 99), 1e-5);
}

TEST(Optim, ClipsToUnitNorm) {
    auto p = Tensor<double>::from({2}, {0.0, 0.0}, true);
    p.mutable_grad()[0] = 30.0;
    p.mutable_grad()[1] = 40.0;
    std::vector<Tensor<double>> params{p};
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    auto state = make_optimizer_state<double>(params, cfg);
    const auto rep = adamw_step<double>(params, state, 1e-2);
    ASSERT_TRUE(rep.applied);
    EXPECT_DOUBLE_EQ(rep.grad_norm, 50.0);
    EXPECT_DOUBLE_EQ(rep.clip_scale, 1.0 / 50.0);
}

TEST(Optim, FirstStepMatchesHandComputedUpdate) {
    // with bias correction the first Adam step moves by lr * sign(g) (up to eps)
    auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
    p.mutable_grad()[0] = 0.1;
    p.mutable_grad()[1] = -0.2;
    p.mutable_grad()[2] = 0.0;
    std::vector<Tensor<double>> params{p};
    AdamWConfig cfg;
    cfg.weight_decay = 0.1;
    auto state = make_optimizer_state<double>(params, cfg);
    ASSERT_TRUE(adamw_step<double>(params, state, 0.01).applied);
    const auto v = params[0].values();
    const double lr = 0.01, wd = 0.1;
    EXPECT_NEAR(v[0], 1.0 - lr * 0.1 / (0.1 + 1e-8) - lr * wd * 1.0, 1e-12);
    EXPECT_NEAR(v[1], -2.0 + lr * 0.2 / (0.2 + 1e-8) - lr * wd * -2.0, 1e-12);
    EXPECT_NEAR(v[2], 0.5 - lr * wd * 0.5, 1e-12);
}

TEST(Optim, NonFiniteGradientAbortsStep) {
    auto p = Tensor<double>::from({2}, {1.0, 2.0}, true);
    p.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
    std::vector<Tensor<double>> params{p};
    auto state = make_optimizer_state<double>(params, AdamWConfig{});
    const auto rep = adamw_step<double>(params, state, 1e-3);
    EXPECT_FALSE(rep.applied);
    EXPECT_EQ(params[0].values()[0], 1.0);
    EXPECT_EQ(state.step, 0u);
}
