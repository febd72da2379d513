#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "clickseg/distance.hpp"
#include "clickseg/interaction.hpp"
#include "oracles.hpp"

using namespace clickseg;

TEST(DistanceTransform, MatchesBruteForce) {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t h = 1 + rng.uniform_index(20), w = 1 + rng.uniform_index(20);
        std::vector<std::uint8_t> src(h * w);
        for (auto& s : src) s = rng.bernoulli(0.1) ? 1 : 0;
        src[rng.uniform_index(h * w)] = 1;
        auto fast = squared_distance_transform(src, h, w);
        for (std::size_t i = 0; i < h * w; ++i) {
            double best = 1e300;
            for (std::size_t j = 0; j < h * w; ++j) {
                if (!src[j]) continue;
                const double dr = double(i / w) - double(j / w), dc = double(i % w) - double(j % w);
                best = std::min(best, dr * dr + dc * dc);
            }
            EXPECT_EQ(fast[i], best);
        }
    }
}

TEST(RenderClickMaps, RadiusZeroSetsSinglePixel) {
    auto maps = render_click_maps({Click{3, 4, Polarity::positive, 0}, Click{1, 1, Polarity::negative, 1}}, 8, 8, 0);
    double pos = 0, neg = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        pos += maps[i];
        neg += maps[64 + i];
    }
    EXPECT_EQ(pos, 1.0);
    EXPECT_EQ(neg, 1.0);
    EXPECT_EQ(maps[3 * 8 + 4], 1.0);
    EXPECT_EQ(maps[64 + 9], 1.0);
}

TEST(RenderClickMaps, EmptyClickSetIsZero) {
    auto maps = render_click_maps({}, 16, 16, 3);
    for (double v : maps.data()) EXPECT_EQ(v, 0.0);
}

TEST(RenderClickMaps, RadiusTwoDiskHasThirteenPixels) {
    // Brute-force lattice count of dr^2 + dc^2 <= 4.
    int expected = 0;
    for (int dr = -5; dr <= 5; ++dr)
        for (int dc = -5; dc <= 5; ++dc) expected += (dr * dr + dc * dc <= 4) ? 1 : 0;
    ASSERT_EQ(expected, 13);
    auto maps = render_click_maps({Click{10, 10, Polarity::positive, 0}}, 64, 64, 2);
    double total = 0;
    for (double v : maps.data()) total += v;
    EXPECT_EQ(total, expected);
}

TEST(RenderClickMaps, OutOfBoundsThrows) {
    EXPECT_THROW(render_click_maps({Click{8, 0, Polarity::positive, 0}}, 8, 8, 1), DomainError);
}

TEST(RenderClickMaps, AddingClicksIsMonotone) {
    Rng rng(4);
    ClickSet clicks;
    auto prev = render_click_maps(clicks, 24, 24, 3);
    for (int i = 0; i < 15; ++i) {
        clicks.push_back(Click{rng.uniform_index(24), rng.uniform_index(24),
                               rng.bernoulli(0.5) ? Polarity::positive : Polarity::negative, clicks.size()});
        auto next = render_click_maps(clicks, 24, 24, 3);
        for (std::size_t j = 0; j < prev.numel(); ++j)
            if (prev[j] == 1.0) EXPECT_EQ(next[j], 1.0);
        prev = next;
    }
}

TEST(NextClick, PerfectPredictionYieldsNone) {
    auto gt = oracle::random_blob_mask(24, 24, 5);
    EXPECT_FALSE(next_click(gt, gt).has_value());
}

TEST(NextClick, SingleFalseNegativePixel) {
    Mask gt(10, 10), pred(10, 10);
    gt.set(4, 7, true);
    auto click = next_click(pred, gt);
    ASSERT_TRUE(click);
    EXPECT_EQ(click->row, 4u);
    EXPECT_EQ(click->col, 7u);
    EXPECT_TRUE(click->positive());
}

TEST(NextClick, SizeMismatchThrows) {
    EXPECT_THROW(next_click(Mask(4, 4), Mask(4, 5)), ShapeError);
}

TEST(NextClick, MatchesExhaustiveOracleOnRandomPairs) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        auto gt = oracle::random_blob_mask(24, 24, rng.next_u64());
        auto pred = oracle::random_blob_mask(24, 24, rng.next_u64());
        auto expected = oracle::brute_force_next_click(pred, gt);
        auto got = next_click(pred, gt);
        ASSERT_EQ(expected.has_value(), got.has_value()) << "seed " << seed;
        if (!got) continue;
        EXPECT_EQ(got->row, expected->row) << "seed " << seed;
        EXPECT_EQ(got->col, expected->col) << "seed " << seed;
        EXPECT_EQ(got->polarity, expected->polarity) << "seed " << seed;
        // Never on a correct pixel; polarity follows the ground truth.
        EXPECT_NE(pred(got->row, got->col), gt(got->row, got->col));
        EXPECT_EQ(got->positive(), gt(got->row, got->col));
    }
}

TEST(InitialClicks, CenteredSquareGetsCenterClick) {
    Mask gt(32, 32);
    for (std::size_t r = 12; r < 20; ++r)
        for (std::size_t c = 12; c < 20; ++c) gt.set(r, c, true);
    Rng rng(1);
    auto clicks = initial_clicks(gt, rng);
    ASSERT_FALSE(clicks.empty());
    EXPECT_TRUE(clicks[0].positive());
    // Interior distance ties at rows/cols 15 and 16; lexicographic rule picks (15,15).
    EXPECT_EQ(clicks[0].row, 15u);
    EXPECT_EQ(clicks[0].col, 15u);
}

TEST(InitialClicks, FullFrameObjectHasNoNegatives) {
    Mask gt(16, 16, std::vector<std::uint8_t>(256, 1));
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        auto clicks = initial_clicks(gt, rng);
        ASSERT_EQ(clicks.size(), 1u);
        EXPECT_GE(clicks[0].row, 7u);
        EXPECT_LE(clicks[0].row, 8u);
        EXPECT_GE(clicks[0].col, 7u);
        EXPECT_LE(clicks[0].col, 8u);
    }
}

TEST(InitialClicks, EmptyGroundTruthThrows) {
    Rng rng(0);
    EXPECT_THROW(initial_clicks(Mask(8, 8), rng), DomainError);
}

TEST(InitialClicks, NegativesStayInsideBand) {
    auto gt = oracle::random_blob_mask(32, 32, 77);
    std::size_t negatives = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        auto clicks = initial_clicks(gt, rng);
        EXPECT_LE(clicks.size(), 4u);
        for (const auto& c : clicks) {
            if (c.positive()) continue;
            ++negatives;
            // Rejection check by brute force: distance to the nearest object pixel.
            double best = 1e300;
            for (std::size_t r = 0; r < 32; ++r)
                for (std::size_t q = 0; q < 32; ++q)
                    if (gt(r, q)) best = std::min(best, std::hypot(double(r) - double(c.row), double(q) - double(c.col)));
            EXPECT_GE(best, 5.0);
            EXPECT_LE(best, 10.0);
        }
    }
    EXPECT_GT(negatives, 500u);
}

TEST(Schedule, ZeroProbabilityAddsNothing) {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_added_clicks({24, 0.0}, rng, 23), 0u);
}

TEST(Schedule, ProbabilityOneHitsCap) {
    Rng rng(3);
    auto always_empty = [](const ClickSet&, const std::vector<double>&) { return std::vector<double>(64 * 64, 0.0); };
    auto gt = oracle::random_blob_mask(64, 64, 2);
    auto start = initial_clicks(gt, rng);
    auto traj = iterative_clicks(always_empty, gt, start, std::vector<double>(64 * 64, 0.0), {24, 1.0}, rng);
    EXPECT_EQ(traj.clicks.size(), 24u);
    for (std::size_t i = 0; i < traj.clicks.size(); ++i) EXPECT_EQ(traj.clicks[i].ordinal, i);
}

TEST(Schedule, ZeroProbabilityKeepsInitialClicks) {
    Rng rng(8);
    auto gt = oracle::random_blob_mask(32, 32, 4);
    auto start = initial_clicks(gt, rng);
    int calls = 0;
    auto model = [&](const ClickSet&, const std::vector<double>&) {
        ++calls;
        return std::vector<double>(32 * 32, 0.0);
    };
    auto traj = iterative_clicks(model, gt, start, std::vector<double>(32 * 32, 0.0), {24, 0.0}, rng);
    EXPECT_EQ(traj.clicks, start);
    EXPECT_EQ(calls, 0);
}

TEST(Schedule, TrajectoriesAreReproducible) {
    auto gt = oracle::random_blob_mask(32, 32, 12);
    auto run = [&] {
        Rng rng(55);
        auto start = initial_clicks(gt, rng);
        auto model = [](const ClickSet& clicks, const std::vector<double>&) {
            std::vector<double> p(32 * 32, 0.0);
            for (const auto& c : clicks)
                if (c.positive()) p[c.row * 32 + c.col] = 1.0;
            return p;
        };
        return iterative_clicks(model, gt, start, std::vector<double>(32 * 32, 0.0), {24, 0.8}, rng).clicks;
    };
    EXPECT_EQ(run(), run());
}
