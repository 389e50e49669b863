#include <gtest/gtest.h>

#include <cmath>

#include "mode/repaint.hpp"
#include "support.hpp"

using namespace mode;
using namespace mode::repaint;
using diffusion::Denoiser;
using diffusion::make_schedule;

namespace {

struct Fixture {
    diffusion::NoiseSchedule sched = make_schedule(10, 1e-3, 0.2);
    Denoiser<float> model{mode::testing::tiny_denoiser_arch(10)};
    Fixture() {
        Rng rng(77);
        model.init(rng);
    }
};

OcclusionMask random_mask(Rng& rng, std::size_t h, std::size_t w) {
    OcclusionMask m(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) m.set(y, x, rng.uniform() < 0.5);
    return m;
}

Tensor<float> random_image(Rng& rng, const Shape& s) {
    Tensor<float> t(s);
    for (auto& v : t) v = static_cast<float>(2 * rng.uniform() - 1);
    return t;
}

}  // namespace

TEST(Plan, NoResampling) {
    auto p = build_plan(2, 1, 1);
    std::vector<PlanStep> expect{{2, 1, Direction::denoise}, {1, 0, Direction::denoise}};
    EXPECT_EQ(p.steps, expect);
}

TEST(Plan, TwoResamplesUnitJump) {
    auto p = build_plan(2, 2, 1);
    std::vector<PlanStep> expect{{2, 1, Direction::denoise}, {1, 2, Direction::renoise},
                                 {2, 1, Direction::denoise}, {1, 0, Direction::denoise},
                                 {0, 1, Direction::renoise}, {1, 0, Direction::denoise}};
    EXPECT_EQ(p.steps, expect);
}

TEST(Plan, StepCountIdentitiesOverGrid) {
    for (std::size_t T = 1; T <= 60; ++T)
        for (std::size_t r = 1; r <= 6; ++r)
            for (std::size_t j = 1; j <= T; ++j) {
                if (T % j) continue;
                auto p = build_plan(T, r, j);
                ASSERT_EQ(p.count(Direction::denoise), r * T);
                ASSERT_EQ(p.count(Direction::renoise), (r - 1) * T);
                // walk the trace: contiguous, within [0, T], ends at 0
                std::size_t pos = T;
                for (const auto& s : p.steps) {
                    ASSERT_EQ(s.from, pos);
                    ASSERT_EQ(s.to, s.direction == Direction::denoise ? pos - 1 : pos + 1);
                    ASSERT_LE(s.to, T);
                    pos = s.to;
                }
                ASSERT_EQ(pos, 0u);
            }
}

TEST(Plan, RenoiseRunsHaveJumpLength) {
    auto p = build_plan(20, 4, 5);
    std::size_t run = 0;
    for (std::size_t i = 0; i < p.steps.size(); ++i) {
        if (p.steps[i].direction == Direction::renoise) {
            ++run;
        } else if (run) {
            EXPECT_EQ(run, 5u);
            run = 0;
        }
    }
}

TEST(Plan, RejectsInvalid) {
    EXPECT_THROW(build_plan(10, 2, 3), ValueError);
    EXPECT_THROW(build_plan(10, 0, 1), ValueError);
    EXPECT_THROW(build_plan(10, 1, 11), ValueError);
    EXPECT_THROW(build_plan(0, 1, 1), ValueError);
}

TEST(Renoise, Examples) {
    auto s = make_schedule(3, 0.01, 0.02);
    Tensor<double> one({1}, 1.0), zero({1}, 0.0);
    EXPECT_DOUBLE_EQ(renoise_with_noise(one, 3, zero, s)[0], std::sqrt(0.98));
    EXPECT_EQ(renoise_with_noise(zero, 3, zero, s)[0], 0.0);
    EXPECT_NEAR(renoise_with_noise(one, 3, one, s)[0], std::sqrt(0.98) + std::sqrt(0.02), 1e-15);
}

TEST(Mask, RejectsNonBinaryAndWrongShape) {
    EXPECT_THROW(OcclusionMask(2, 2, std::vector<std::uint8_t>{0, 1, 2, 1}), ValueError);
    EXPECT_THROW(OcclusionMask(2, 2, std::vector<std::uint8_t>{0, 1, 1}), ShapeError);
    Fixture f;
    Rng rng(1);
    auto x = random_image(rng, {1, 8, 8});
    EXPECT_THROW(composite_step(x, OcclusionMask(4, 4), x, 3, f.model, rng, f.sched), ShapeError);
}

TEST(CompositeStep, AllKnownDoesNotDependOnModel) {
    Fixture f;
    Denoiser<float> other(mode::testing::tiny_denoiser_arch(10));
    Rng init(5);
    other.init(init);
    auto src = random_image(init, {1, 8, 8}), xt = random_image(init, {1, 8, 8});
    OcclusionMask m(8, 8, 1);
    Rng a(3), b(3);
    EXPECT_EQ(composite_step(src, m, xt, 6, f.model, a, f.sched), composite_step(src, m, xt, 6, other, b, f.sched));
}

TEST(CompositeStep, AllUnknownEqualsReverseStep) {
    Fixture f;
    Rng init(6);
    auto src = random_image(init, {1, 8, 8}), xt = random_image(init, {1, 8, 8});
    OcclusionMask m(8, 8, 0);
    for (std::size_t t : {1u, 4u, 10u}) {
        Rng a(9), b(9);
        EXPECT_EQ(composite_step(src, m, xt, t, f.model, a, f.sched), diffusion::p_sample(f.model, xt, t, b, f.sched));
    }
}

TEST(CompositeStep, CheckerboardWithZeroNoiseMatchesPerPixelOracle) {
    const auto s = make_schedule(10, 1e-3, 0.2);
    Denoiser<double> model(mode::testing::tiny_denoiser_arch(10));
    Rng rng(7);
    model.init(rng);
    auto src = mode::testing::random_tensor(rng, {1, 8, 8}), xt = mode::testing::random_tensor(rng, {1, 8, 8});
    OcclusionMask m(8, 8);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) m.set(y, x, (x + y) % 2 == 0);
    const std::size_t t = 5;
    auto eps_hat = model.infer(xt.reshaped({1, 1, 8, 8}), t).reshaped({1, 8, 8});
    Tensor<double> zero({1, 8, 8});
    auto out = composite_step_with_noise(src, m, xt, t, eps_hat, zero, zero, s);
    const double ab = mode::testing::alpha_bar_oracle(10, 1e-3, 0.2, t);
    const double beta = 1e-3 + (0.2 - 1e-3) * 4.0 / 9.0;
    for (std::size_t i = 0; i < 64; ++i) {
        const double expect = m.known(i) ? std::sqrt(ab) * src[i]
                                         : (xt[i] - beta / std::sqrt(1 - ab) * eps_hat[i]) / std::sqrt(1 - beta);
        EXPECT_NEAR(out[i], expect, 1e-12);
    }
}

TEST(Repaint, AllKnownIsIdentity) {
    Fixture f;
    Rng rng(8);
    auto plan = build_plan(10, 2, 5);
    for (int i = 0; i < 5; ++i) {
        auto x = random_image(rng, {1, 8, 8});
        EXPECT_EQ(repaint::repaint(x, OcclusionMask(8, 8, 1), f.model, plan, rng, f.sched), x);
    }
}

TEST(Repaint, DeterministicForFixedSeed) {
    Fixture f;
    Rng init(9);
    auto x = random_image(init, {1, 8, 8});
    auto m = random_mask(init, 8, 8);
    auto plan = build_plan(10, 3, 5);
    Rng a(4), b(4);
    EXPECT_EQ(repaint::repaint(x, m, f.model, plan, a, f.sched), repaint::repaint(x, m, f.model, plan, b, f.sched));
}

TEST(Repaint, SeedsGiveDiverseFills) {
    Fixture f;
    Rng init(10);
    auto x = random_image(init, {1, 8, 8});
    OcclusionMask m(8, 8);
    for (std::size_t y = 4; y < 8; ++y)
        for (std::size_t c = 0; c < 8; ++c) m.set(y, c, false);
    auto plan = build_plan(10, 2, 5);
    Rng a(1), b(2);
    auto ya = repaint::repaint(x, m, f.model, plan, a, f.sched), yb = repaint::repaint(x, m, f.model, plan, b, f.sched);
    double diff = 0;
    for (std::size_t i = 32; i < 64; ++i) diff += std::abs(ya[i] - yb[i]);
    EXPECT_GT(diff / 32, 0.0);
}

TEST(Repaint, KnownRegionExactOverRandomPairs) {
    Fixture f;
    Rng rng(11);
    auto plan = build_plan(10, 2, 5);
    float worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_image(rng, {1, 8, 8});
        auto m = random_mask(rng, 8, 8);
        auto y = repaint::repaint(x, m, f.model, plan, rng, f.sched);
        for (std::size_t i = 0; i < 64; ++i) {
            if (m.known(i)) worst = std::max(worst, std::abs(y[i] - x[i]));
            ASSERT_LE(std::abs(y[i]), 1.0f);
        }
    }
    EXPECT_EQ(worst, 0.0f);
}

TEST(Repaint, BatchMatchesSingleImages) {
    Fixture f;
    Rng init(12);
    const std::size_t n = 3;
    std::vector<Tensor<float>> xs;
    std::vector<OcclusionMask> masks;
    for (std::size_t i = 0; i < n; ++i) {
        xs.push_back(random_image(init, {1, 8, 8}));
        masks.push_back(random_mask(init, 8, 8));
    }
    auto plan = build_plan(10, 2, 5);
    std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3)};
    auto batch = repaint_batch(stack(xs), masks, f.model, plan, rngs, f.sched);
    for (std::size_t i = 0; i < n; ++i) {
        Rng r(i + 1);
        EXPECT_EQ(repaint::repaint(xs[i], masks[i], f.model, plan, r, f.sched), unstack(batch, i));
    }
}

TEST(KnownSource, ZeroFillsOccludedPixels) {
    Tensor<float> x({1, 2, 2}, std::vector<float>{0.5f, -0.5f, 0.25f, 1.0f});
    auto src = known_source(x, OcclusionMask(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1}));
    EXPECT_EQ(src, Tensor<float>({1, 2, 2}, std::vector<float>{0.5f, 0.0f, 0.0f, 1.0f}));
}
