#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "r1a/matrix.hpp"
#include "r1a/warp.hpp"

namespace r1a {

/// One maximal overlap region: the canvas pixels whose covering image set is
/// exactly `images`. Pixels covered by the same image subset may form
/// disconnected components; they still share one region (one low-rank model),
/// since region identity is image membership, not connectivity.
struct Region {
    std::vector<std::size_t> pixels;  // flat canvas indices, raster order
    std::vector<int> images;          // contributing image ids, ascending

    std::size_t size() const { return pixels.size(); }
    int width() const { return int(images.size()); }

    /// Column of image i in this region's data matrix (0-based).
    int column_of(int image) const {
        const auto it = std::lower_bound(images.begin(), images.end(), image);
        if (it == images.end() || *it != image)
            throw std::out_of_range("Region::column_of: image not in region");
        return int(it - images.begin());
    }
};

struct RegionDecomposition {
    std::vector<Region> regions;
    std::vector<std::vector<int>> regions_of;  // image id -> region indices

    static RegionDecomposition from_regions(std::vector<Region> rs, std::size_t n_images) {
        RegionDecomposition d;
        d.regions = std::move(rs);
        d.regions_of.assign(n_images, {});
        for (std::size_t r = 0; r < d.regions.size(); ++r)
            for (int i : d.regions[r].images) d.regions_of[i].push_back(int(r));
        return d;
    }
};

/// Greedy peeling of overlap regions: repeatedly take the largest covering
/// image subset still present (ties by lexicographic image-id order), emit
/// the pixels it covers, retire them. Retiring never changes the remaining
/// pixels' covering sets, so this equals grouping pixels by exact covering
/// set and ordering groups by (cardinality desc, lexicographic asc).
inline RegionDecomposition discover_regions(const std::vector<WarpedImage>& warped) {
    if (warped.empty()) throw std::invalid_argument("discover_regions: no images");
    if (warped.size() > 64) throw std::invalid_argument("discover_regions: more than 64 images");
    const std::size_t npix = warped[0].mask.size();
    for (const WarpedImage& w : warped)
        if (w.mask.size() != npix)
            throw std::invalid_argument("discover_regions: masks disagree on canvas shape");

    std::map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (std::size_t p = 0; p < npix; ++p) {
        std::uint64_t cover = 0;
        for (std::size_t i = 0; i < warped.size(); ++i)
            if (warped[i].mask[p]) cover |= std::uint64_t(1) << i;
        if (std::popcount(cover) >= 2) buckets[cover].push_back(p);
    }

    std::vector<std::uint64_t> order;
    order.reserve(buckets.size());
    for (const auto& [cover, pixels] : buckets) order.push_back(cover);
    std::sort(order.begin(), order.end(), [](std::uint64_t a, std::uint64_t b) {
        const int ca = std::popcount(a), cb = std::popcount(b);
        if (ca != cb) return ca > cb;
        // Equal cardinality: the set holding the lowest differing image id
        // comes first (lexicographic order of the ascending id sequences).
        return (a & ((a ^ b) & -(a ^ b))) != 0;
    });

    std::vector<Region> regions;
    regions.reserve(order.size());
    for (std::uint64_t cover : order) {
        Region r;
        r.pixels = std::move(buckets[cover]);
        for (int i = 0; i < 64; ++i)
            if (cover & (std::uint64_t(1) << i)) r.images.push_back(i);
        regions.push_back(std::move(r));
    }
    return RegionDecomposition::from_regions(std::move(regions), warped.size());
}

/// Remove regions too thin to constrain a rank-1 fit (fewer than
/// `rows_per_column` pixels per contributing image); degenerate slivers from
/// mask rounding destabilize the shrinkage schedules.
inline RegionDecomposition drop_undersized(const RegionDecomposition& d,
                                           std::size_t rows_per_column = 16) {
    std::vector<Region> kept;
    for (const Region& r : d.regions)
        if (r.size() >= rows_per_column * r.images.size()) kept.push_back(r);
    return RegionDecomposition::from_regions(std::move(kept), d.regions_of.size());
}

/// Region data matrix: entry (p, column_of(i)) = intensity of image i at the
/// region's p-th pixel.
inline Matrix extract_region_matrix(const std::vector<WarpedImage>& warped, const Region& region) {
    Matrix D(region.pixels.size(), region.images.size());
    for (std::size_t c = 0; c < region.images.size(); ++c) {
        const WarpedImage& w = warped[region.images[c]];
        for (std::size_t p = 0; p < region.pixels.size(); ++p) {
            const std::size_t flat = region.pixels[p];
            if (!w.mask[flat])
                throw std::logic_error("extract_region_matrix: region pixel not covered");
            D(p, c) = w.intensities.px[flat];
        }
    }
    return D;
}

}  // namespace r1a
