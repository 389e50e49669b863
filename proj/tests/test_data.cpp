#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "mode/data.hpp"
#include "mode/recognition.hpp"
#include "support.hpp"

using namespace mode;
using namespace mode::data;

namespace {

GeneratorConfig small_config(std::uint64_t seed) {
    GeneratorConfig c;
    c.identities = 6;
    c.images_per_identity = 4;
    c.height = 16;
    c.width = 16;
    c.seed = seed;
    return c;
}

}  // namespace

TEST(Generate, SameSeedGivesIdenticalContainers) {
    auto a = generate_dataset(small_config(5)), b = generate_dataset(small_config(5));
    EXPECT_EQ(a, b);
    std::stringstream sa, sb;
    write_container(sa, a);
    write_container(sb, b);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_NE(a, generate_dataset(small_config(6)));
}

TEST(Generate, ZeroVariationMakesIdentitiesConstant) {
    auto c = small_config(7);
    c.variation = 0;
    auto ds = generate_dataset(c);
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < ds.size(); ++j)
            if (ds.labels[i] == ds.labels[j]) {
                EXPECT_EQ(ds.images[i], ds.images[j]);
            }
}

TEST(Generate, PixelsInRangeAndLabelsBalanced) {
    auto ds = generate_dataset(small_config(8));
    ASSERT_EQ(ds.size(), 24u);
    std::map<std::uint32_t, int> counts;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ++counts[ds.labels[i]];
        for (float v : ds.images[i]) {
            EXPECT_GE(v, -1.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    EXPECT_EQ(counts.size(), 6u);
    for (auto& [l, n] : counts) EXPECT_EQ(n, 4);
}

TEST(Generate, IdentitySignaturesAreDistinct) {
    GeneratorConfig c;
    c.seed = 9;
    auto ids = make_identities(c);
    for (std::size_t a = 0; a < ids.size(); ++a)
        for (std::size_t b = a + 1; b < ids.size(); ++b)
            EXPECT_NE(render_prototype(ids[a], 32, 32), render_prototype(ids[b], 32, 32));
}

TEST(Generate, RejectsDegenerateInputs) {
    auto c = small_config(1);
    c.identities = 1;
    EXPECT_THROW(generate_dataset(c), ValueError);
    c = small_config(1);
    c.height = 0;
    EXPECT_THROW(generate_dataset(c), ValueError);
}

TEST(Generate, DefaultCorpusIsLearnable) {
    GeneratorConfig c;
    c.seed = 1;
    auto ds = generate_dataset(c);
    auto sp = split(ds, 0.5, 1);
    auto gallery = ds.subset(sp.gallery), probe = ds.subset(sp.probe);
    std::vector<std::size_t> cls(gallery.labels.begin(), gallery.labels.end());
    auto trained = recognition::train_embedder(gallery.images, cls, c.identities, {30, 32, 1e-3, 1}, {});
    std::vector<recognition::FeatureVector> gf;
    for (const auto& im : gallery.images) gf.push_back(recognition::embed(trained.model, im));
    auto g = recognition::build_gallery(gf, gallery.labels);
    std::vector<recognition::SimilarityRow> rows;
    std::vector<std::size_t> truth;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        rows.push_back(recognition::similarity(recognition::embed(trained.model, probe.images[i]), g));
        truth.push_back(g.index_of(probe.labels[i]));
    }
    EXPECT_GT(recognition::topk_accuracy(rows, truth, 1), 90.0);
}

TEST(Mask, RectHalfOccludesLowerRows) {
    auto m = make_mask({OcclusionKind::rect_mask, 0.5, 3}, 32, 32);
    for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(m.known(y, x), y < 16) << y << "," << x;
}

TEST(Mask, RandomLossConcentrates) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double f = make_mask({OcclusionKind::random_loss, 0.3, seed}, 64, 64).occluded_fraction();
        EXPECT_GE(f, 0.27);
        EXPECT_LE(f, 0.33);
    }
}

TEST(Mask, SeverityOutsideUnitIntervalRejected) {
    for (double s : {0.0, -0.1, 1.5})
        for (auto k : {OcclusionKind::rect_mask, OcclusionKind::random_loss, OcclusionKind::lines, OcclusionKind::leaves})
            EXPECT_THROW(make_mask({k, s, 1}, 8, 8), ValueError);
}

TEST(Mask, CoverageTracksSeverity) {
    // 128 x 128 keeps the binomial spread of random_loss and the stripe
    // quantisation of lines well inside the band at severity 0.1
    for (auto k : {OcclusionKind::random_loss, OcclusionKind::lines, OcclusionKind::leaves})
        for (int i = 1; i <= 9; ++i) {
            const double s = i / 10.0;
            for (std::uint64_t seed = 0; seed < 3; ++seed) {
                const double f = make_mask({k, s, seed}, 128, 128).occluded_fraction();
                EXPECT_NEAR(f, s, 0.1 * s) << to_string(k) << " severity " << s << " seed " << seed;
            }
        }
}

TEST(Mask, LeavesCoverageOnDefaultImages) {
    for (int i = 1; i <= 9; ++i)
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const double s = i / 10.0;
            EXPECT_NEAR(make_mask({OcclusionKind::leaves, s, seed}, 32, 32).occluded_fraction(), s, 0.1 * s);
        }
}

TEST(Mask, DeterministicFromSeed) {
    for (auto k : {OcclusionKind::rect_mask, OcclusionKind::random_loss, OcclusionKind::lines, OcclusionKind::leaves}) {
        EXPECT_EQ(make_mask({k, 0.4, 11}, 32, 32), make_mask({k, 0.4, 11}, 32, 32));
    }
    EXPECT_NE(make_mask({OcclusionKind::leaves, 0.4, 11}, 32, 32), make_mask({OcclusionKind::leaves, 0.4, 12}, 32, 32));
}

TEST(Occlude, Examples) {
    Tensor<float> ramp({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) ramp[i] = -1.0f + static_cast<float>(i) / 8.0f;
    EXPECT_EQ(occlude(ramp, OcclusionMask(4, 4, 1)), ramp);
    EXPECT_EQ(occlude(ramp, OcclusionMask(4, 4, 0)), Tensor<float>({1, 4, 4}));
    OcclusionMask checker(4, 4);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) checker.set(y, x, (x + y) % 2 == 0);
    auto out = occlude(ramp, checker, 0.5f);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(out[y * 4 + x], (x + y) % 2 == 0 ? ramp[y * 4 + x] : 0.5f);
    EXPECT_THROW(occlude(ramp, OcclusionMask(3, 4)), ShapeError);
}

TEST(Split, TwoImagesPerIdentity) {
    auto c = small_config(10);
    c.images_per_identity = 2;
    auto ds = generate_dataset(c);
    auto sp = split(ds, 0.5, 4);
    std::map<std::uint32_t, int> g, p;
    for (auto i : sp.gallery) ++g[ds.labels[i]];
    for (auto i : sp.probe) ++p[ds.labels[i]];
    for (std::uint32_t l = 0; l < 6; ++l) {
        EXPECT_EQ(g[l], 1);
        EXPECT_EQ(p[l], 1);
    }
}

TEST(Split, DeterministicAndPartitions) {
    auto ds = generate_dataset(small_config(11));
    auto a = split(ds, 0.5, 4), b = split(ds, 0.5, 4);
    EXPECT_EQ(a.gallery, b.gallery);
    EXPECT_EQ(a.probe, b.probe);
    std::set<std::size_t> gs(a.gallery.begin(), a.gallery.end()), ps(a.probe.begin(), a.probe.end());
    std::set<std::size_t> all;
    for (std::size_t i = 0; i < ds.size(); ++i) all.insert(i);
    std::set<std::size_t> uni = gs;
    uni.insert(ps.begin(), ps.end());
    EXPECT_EQ(uni, all);
    for (auto i : gs) EXPECT_EQ(ps.count(i), 0u);
    std::set<std::uint32_t> gl, pl;
    for (auto i : a.gallery) gl.insert(ds.labels[i]);
    for (auto i : a.probe) pl.insert(ds.labels[i]);
    EXPECT_EQ(gl, pl);
}

TEST(Split, SingletonIdentityRejected) {
    Dataset ds{4, 4, 1, {0, 1, 1}, {Tensor<float>({1, 4, 4}), Tensor<float>({1, 4, 4}), Tensor<float>({1, 4, 4})}};
    EXPECT_THROW(split(ds, 0.5, 1), ValueError);
}

TEST(Container, RoundTripIsBitExact) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Dataset ds{1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(3), {}, {}};
        const std::size_t n = rng.below(6);
        for (std::size_t i = 0; i < n; ++i) {
            Tensor<float> im(ds.image_shape());
            for (auto& v : im) v = static_cast<float>(rng.uniform(-1.0, 1.0));
            ds.labels.push_back(static_cast<std::uint32_t>(rng.next_u64()));
            ds.images.push_back(im);
        }
        std::stringstream ss;
        write_container(ss, ds);
        std::stringstream copy(ss.str());
        auto back = read_container(copy);
        EXPECT_EQ(back, ds);
        std::stringstream again;
        write_container(again, back);
        EXPECT_EQ(again.str(), ss.str());
    }
}

TEST(Container, HeaderLayout) {
    Dataset ds{2, 3, 1, {7}, {Tensor<float>({1, 2, 3}, 0.5f)}};
    std::stringstream ss;
    write_container(ss, ds);
    const std::string s = ss.str();
    ASSERT_EQ(s.size(), 4u + 2 + 4 + 6 + 4 + 6 * 4);
    EXPECT_EQ(s.substr(0, 4), "MODE");
    EXPECT_EQ(static_cast<unsigned char>(s[6]), 1);   // count
    EXPECT_EQ(static_cast<unsigned char>(s[10]), 2);  // H
    EXPECT_EQ(static_cast<unsigned char>(s[12]), 3);  // W
    EXPECT_EQ(static_cast<unsigned char>(s[14]), 1);  // C
    EXPECT_EQ(static_cast<unsigned char>(s[16]), 7);  // label
}

TEST(Container, RejectsCorruption) {
    Dataset ds{2, 2, 1, {1}, {Tensor<float>({1, 2, 2}, 0.25f)}};
    std::stringstream ss;
    write_container(ss, ds);
    const std::string good = ss.str();
    std::stringstream cut(good.substr(0, good.size() - 1));
    EXPECT_THROW(read_container(cut), FormatError);
    std::stringstream extra(good + "x");
    EXPECT_THROW(read_container(extra), FormatError);
    std::string magic = good;
    magic[0] = 'X';
    std::stringstream bad(magic);
    EXPECT_THROW(read_container(bad), FormatError);
    Dataset out_of_range{1, 1, 1, {0}, {Tensor<float>({1, 1, 1}, 1.5f)}};
    std::stringstream sink;
    EXPECT_THROW(write_container(sink, out_of_range), FormatError);
}

TEST(Container, MasksRoundTrip) {
    std::vector<OcclusionMask> masks{make_mask({OcclusionKind::leaves, 0.3, 1}, 8, 8),
                                     make_mask({OcclusionKind::lines, 0.5, 2}, 8, 8)};
    auto ds = masks_to_container(masks, {3, 4});
    std::stringstream ss;
    write_container(ss, ds);
    EXPECT_EQ(masks_from_container(read_container(ss)), masks);
}
