#include <gtest/gtest.h>

#include <map>
#include <set>

#include "r1a/regions.hpp"
#include "r1a/rng.hpp"

using namespace r1a;

namespace {

WarpedImage mask_rect(int cw, int ch, int x0, int x1, int y0, int y1, double fill = 1.0) {
    WarpedImage w;
    w.intensities = Image(cw, ch);
    w.mask.assign(std::size_t(cw) * ch, 0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            w.mask[std::size_t(y) * cw + x] = 1;
            w.intensities.at(x, y) = fill;
        }
    return w;
}

// Brute-force reference: group pixels by exact covering set represented as a
// sorted id vector, order groups by (cardinality desc, std::vector lex asc).
std::vector<std::pair<std::vector<int>, std::vector<std::size_t>>> oracle_regions(
    const std::vector<WarpedImage>& warped) {
    std::map<std::vector<int>, std::vector<std::size_t>> groups;
    const std::size_t npix = warped[0].mask.size();
    for (std::size_t p = 0; p < npix; ++p) {
        std::vector<int> cover;
        for (std::size_t i = 0; i < warped.size(); ++i)
            if (warped[i].mask[p]) cover.push_back(int(i));
        if (cover.size() >= 2) groups[cover].push_back(p);
    }
    std::vector<std::pair<std::vector<int>, std::vector<std::size_t>>> out(groups.begin(),
                                                                           groups.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.first.size() != b.first.size()) return a.first.size() > b.first.size();
        return a.first < b.first;
    });
    return out;
}

}  // namespace

TEST(DiscoverRegions, TwoHalfOverlappingRectangles) {
    std::vector<WarpedImage> w;
    w.push_back(mask_rect(10, 4, 0, 6, 0, 4));
    w.push_back(mask_rect(10, 4, 4, 10, 0, 4));
    const RegionDecomposition d = discover_regions(w);
    ASSERT_EQ(d.regions.size(), 1u);
    EXPECT_EQ(d.regions[0].images, (std::vector<int>{0, 1}));
    EXPECT_EQ(d.regions[0].size(), 2u * 4);
    for (std::size_t p : d.regions[0].pixels) {
        const int x = int(p % 10);
        EXPECT_TRUE(x == 4 || x == 5);
    }
}

TEST(DiscoverRegions, ThreeImageChainMatchesRegionModel) {
    // Chain of three images: middle image overlaps both ends, center strip
    // shared by all three. Greedy order puts the triple first; in the {1,2}
    // region the columns are image 1 -> 0, image 2 -> 1 (1-based bookkeeping
    // in the region model reads f = 1 and f = 2).
    std::vector<WarpedImage> w;
    w.push_back(mask_rect(12, 4, 0, 6, 0, 4));
    w.push_back(mask_rect(12, 4, 2, 10, 0, 4));
    w.push_back(mask_rect(12, 4, 4, 12, 0, 4));
    const RegionDecomposition d = discover_regions(w);
    ASSERT_EQ(d.regions.size(), 3u);
    EXPECT_EQ(d.regions[0].images, (std::vector<int>{0, 1, 2}));
    EXPECT_EQ(d.regions[1].images, (std::vector<int>{0, 1}));
    EXPECT_EQ(d.regions[2].images, (std::vector<int>{1, 2}));
    EXPECT_EQ(d.regions[2].column_of(1), 0);
    EXPECT_EQ(d.regions[2].column_of(2), 1);
    EXPECT_THROW(d.regions[1].column_of(2), std::out_of_range);
    EXPECT_EQ(d.regions_of[0], (std::vector<int>{0, 1}));
    EXPECT_EQ(d.regions_of[1], (std::vector<int>{0, 1, 2}));
    EXPECT_EQ(d.regions_of[2], (std::vector<int>{0, 2}));
}

TEST(DiscoverRegions, MatchesBruteForceOracleOnRandomStacks) {
    Rng rng(53);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 2 + rng.below(3);  // 2..4 images
        std::vector<WarpedImage> w;
        for (std::size_t i = 0; i < n; ++i) {
            if (trial < 5) {
                WarpedImage m;
                m.intensities = Image(16, 16);
                m.mask.assign(256, 0);
                for (auto& b : m.mask) b = rng.uniform() < 0.5 ? 1 : 0;
                w.push_back(std::move(m));
            } else {
                const int x0 = int(rng.below(10)), y0 = int(rng.below(10));
                w.push_back(mask_rect(16, 16, x0, x0 + 4 + int(rng.below(6)), y0,
                                      y0 + 4 + int(rng.below(6))));
            }
        }
        const RegionDecomposition d = discover_regions(w);
        const auto want = oracle_regions(w);
        ASSERT_EQ(d.regions.size(), want.size()) << "trial " << trial;
        for (std::size_t r = 0; r < want.size(); ++r) {
            EXPECT_EQ(d.regions[r].images, want[r].first) << "trial " << trial << " region " << r;
            EXPECT_EQ(d.regions[r].pixels, want[r].second) << "trial " << trial << " region " << r;
        }
    }
}

TEST(DiscoverRegions, CoverageCountAndGreedyOrderInvariants) {
    Rng rng(59);
    std::vector<WarpedImage> w;
    for (int i = 0; i < 4; ++i) {
        WarpedImage m;
        m.intensities = Image(16, 16);
        m.mask.assign(256, 0);
        for (auto& b : m.mask) b = rng.uniform() < 0.6 ? 1 : 0;
        w.push_back(std::move(m));
    }
    const RegionDecomposition d = discover_regions(w);
    std::size_t covered_twice = 0;
    for (std::size_t p = 0; p < 256; ++p) {
        int c = 0;
        for (const auto& m : w) c += m.mask[p] ? 1 : 0;
        if (c >= 2) ++covered_twice;
    }
    std::size_t total = 0;
    for (std::size_t r = 0; r < d.regions.size(); ++r) {
        total += d.regions[r].size();
        EXPECT_GE(d.regions[r].images.size(), 2u);
        if (r > 0) EXPECT_GE(d.regions[r - 1].images.size(), d.regions[r].images.size());
        for (int i : d.regions[r].images)
            for (std::size_t p : d.regions[r].pixels) EXPECT_TRUE(w[i].mask[p]);
    }
    EXPECT_EQ(total, covered_twice);
}

TEST(DiscoverRegions, RerunIsBitIdentical) {
    Rng rng(61);
    std::vector<WarpedImage> w;
    for (int i = 0; i < 3; ++i) {
        WarpedImage m;
        m.intensities = Image(12, 12);
        m.mask.assign(144, 0);
        for (auto& b : m.mask) b = rng.uniform() < 0.5 ? 1 : 0;
        w.push_back(std::move(m));
    }
    const RegionDecomposition a = discover_regions(w);
    const RegionDecomposition b = discover_regions(w);
    ASSERT_EQ(a.regions.size(), b.regions.size());
    for (std::size_t r = 0; r < a.regions.size(); ++r) {
        EXPECT_EQ(a.regions[r].images, b.regions[r].images);
        EXPECT_EQ(a.regions[r].pixels, b.regions[r].pixels);
    }
    EXPECT_EQ(a.regions_of, b.regions_of);
}

TEST(DiscoverRegions, ZeroOverlapYieldsEmptyDecomposition) {
    std::vector<WarpedImage> w;
    w.push_back(mask_rect(10, 4, 0, 5, 0, 4));
    w.push_back(mask_rect(10, 4, 5, 10, 0, 4));
    const RegionDecomposition d = discover_regions(w);
    EXPECT_TRUE(d.regions.empty());
    ASSERT_EQ(d.regions_of.size(), 2u);
    EXPECT_TRUE(d.regions_of[0].empty());
    EXPECT_TRUE(d.regions_of[1].empty());
}

TEST(DiscoverRegions, MoreThanSixtyFourImagesRejected) {
    std::vector<WarpedImage> w(65, mask_rect(2, 2, 0, 2, 0, 2));
    EXPECT_THROW(discover_regions(w), std::invalid_argument);
}

TEST(ExtractRegionMatrix, TwoIdenticalImagesGiveEqualColumns) {
    Rng rng(67);
    WarpedImage a = mask_rect(8, 6, 0, 8, 0, 6);
    for (double& v : a.intensities.px) v = 255.0 * rng.uniform();
    WarpedImage b = a;
    const std::vector<WarpedImage> w{a, b};
    const RegionDecomposition d = discover_regions(w);
    ASSERT_EQ(d.regions.size(), 1u);
    const Matrix D = extract_region_matrix(w, d.regions[0]);
    ASSERT_EQ(D.rows(), 48u);
    ASSERT_EQ(D.cols(), 2u);
    for (std::size_t p = 0; p < D.rows(); ++p) EXPECT_EQ(D(p, 0), D(p, 1));
}

TEST(ExtractRegionMatrix, OnePixelThreeImagesGivesRow) {
    std::vector<WarpedImage> w;
    for (int i = 0; i < 3; ++i) w.push_back(mask_rect(3, 3, 0, 0, 0, 0));
    for (int i = 0; i < 3; ++i) {
        w[i].mask[4] = 1;  // center pixel only
        w[i].intensities.at(1, 1) = 10.0 * (i + 1);
    }
    const RegionDecomposition d = discover_regions(w);
    ASSERT_EQ(d.regions.size(), 1u);
    const Matrix D = extract_region_matrix(w, d.regions[0]);
    ASSERT_EQ(D.rows(), 1u);
    ASSERT_EQ(D.cols(), 3u);
    EXPECT_EQ(D(0, 0), 10.0);
    EXPECT_EQ(D(0, 1), 20.0);
    EXPECT_EQ(D(0, 2), 30.0);
}

TEST(ExtractRegionMatrix, MatchesDirectLookupOracle) {
    Rng rng(71);
    std::vector<WarpedImage> w;
    for (int i = 0; i < 3; ++i) {
        WarpedImage m;
        m.intensities = Image(10, 10);
        m.mask.assign(100, 0);
        for (std::size_t p = 0; p < 100; ++p) {
            m.mask[p] = rng.uniform() < 0.7 ? 1 : 0;
            if (m.mask[p]) m.intensities.px[p] = 255.0 * rng.uniform();
        }
        w.push_back(std::move(m));
    }
    const RegionDecomposition d = discover_regions(w);
    ASSERT_FALSE(d.regions.empty());
    for (const Region& r : d.regions) {
        const Matrix D = extract_region_matrix(w, r);
        for (std::size_t p = 0; p < r.pixels.size(); ++p)
            for (std::size_t c = 0; c < r.images.size(); ++c)
                EXPECT_EQ(D(p, c), w[r.images[c]].intensities.px[r.pixels[p]]);
    }
}

TEST(ExtractRegionMatrix, MaskViolationThrows) {
    std::vector<WarpedImage> w;
    w.push_back(mask_rect(6, 4, 0, 6, 0, 4));
    w.push_back(mask_rect(6, 4, 0, 6, 0, 4));
    RegionDecomposition d = discover_regions(w);
    w[1].mask[5] = 0;  // masks changed after discovery
    EXPECT_THROW(extract_region_matrix(w, d.regions[0]), std::logic_error);
}

TEST(DropUndersized, RemovesSliversAndRebuildsIndex) {
    std::vector<WarpedImage> w;
    w.push_back(mask_rect(40, 8, 0, 21, 0, 8));   // overlap with image 1: 1 col
    w.push_back(mask_rect(40, 8, 20, 40, 0, 8));  // wide overlap with image 2
    w.push_back(mask_rect(40, 8, 24, 40, 0, 8));
    const RegionDecomposition d = discover_regions(w);
    const RegionDecomposition kept = drop_undersized(d, 16);
    ASSERT_LT(kept.regions.size(), d.regions.size());
    for (const Region& r : kept.regions) EXPECT_GE(r.size(), 16u * r.images.size());
    for (std::size_t i = 0; i < kept.regions_of.size(); ++i)
        for (int rid : kept.regions_of[i]) {
            const auto& imgs = kept.regions[rid].images;
            EXPECT_NE(std::find(imgs.begin(), imgs.end(), int(i)), imgs.end());
        }
}
