#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "mode/rng.hpp"

using namespace mode;

TEST(Rng, SameSeedSameShapeGivesIdenticalTensors) {
    Rng a(42), b(42);
    EXPECT_EQ(sample_standard_normal<float>(a, {4, 5}), sample_standard_normal<float>(b, {4, 5}));
}

TEST(Rng, DifferentSeedsDiffer) {
    Rng a(1), b(2);
    EXPECT_NE(sample_standard_normal<float>(a, {16}), sample_standard_normal<float>(b, {16}));
}

TEST(Rng, EmptyShapeRejected) {
    Rng r(0);
    EXPECT_THROW(sample_standard_normal<float>(r, {}), ValueError);
    EXPECT_THROW(sample_standard_normal<float>(r, {3, 0}), ValueError);
}

TEST(Rng, MillionDrawsHaveUnitMoments) {
    Rng r(7);
    auto t = sample_standard_normal<double>(r, {1000000});
    double s = 0, s2 = 0;
    for (double v : t) s += v;
    const double mean = s / t.size();
    for (double v : t) s2 += (v - mean) * (v - mean);
    const double var = s2 / (t.size() - 1);
    EXPECT_GE(mean, -0.01);
    EXPECT_LE(mean, 0.01);
    EXPECT_GE(var, 0.98);
    EXPECT_LE(var, 1.02);
}

namespace {

bool shares_window(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b, std::size_t len) {
    std::set<std::vector<std::uint64_t>> windows;
    for (std::size_t i = 0; i + len <= a.size(); ++i) windows.emplace(a.begin() + i, a.begin() + i + len);
    for (std::size_t i = 0; i + len <= b.size(); ++i)
        if (windows.count(std::vector<std::uint64_t>(b.begin() + i, b.begin() + i + len))) return true;
    return false;
}

std::vector<std::uint64_t> draw(Rng& r, std::size_t n) {
    std::vector<std::uint64_t> v(n);
    for (auto& x : v) x = r.next_u64();
    return v;
}

}  // namespace

TEST(Rng, DisjointCallSequencesDoNotOverlap) {
    Rng root(2024);
    Rng a = root.fork("denoiser"), b = root.fork("embedder");
    EXPECT_FALSE(shares_window(draw(a, 4096), draw(b, 4096), 16));
    Rng c(2024);
    auto first = draw(c, 4096), second = draw(c, 4096);
    EXPECT_FALSE(shares_window(first, second, 16));
    Rng i0 = root.fork(std::uint64_t{0}), i1 = root.fork(std::uint64_t{1});
    EXPECT_FALSE(shares_window(draw(i0, 4096), draw(i1, 4096), 16));
}

TEST(Rng, DeriveSeedSeparatesStages) {
    EXPECT_NE(derive_seed(1, "data"), derive_seed(1, "split"));
    EXPECT_NE(derive_seed(1, "data"), derive_seed(2, "data"));
    EXPECT_EQ(derive_seed(9, "gate"), derive_seed(9, "gate"));
}

TEST(Rng, CounterTracksConsumption) {
    Rng r(3);
    r.next_u64();
    r.uniform();
    EXPECT_EQ(r.counter(), 2u);
}

TEST(Rng, BelowStaysInRange) {
    Rng r(5);
    for (int i = 0; i < 10000; ++i) EXPECT_LT(r.below(7), 7u);
    EXPECT_THROW(r.below(0), ValueError);
}
