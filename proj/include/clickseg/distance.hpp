#ifndef CLICKSEG_DISTANCE_HPP
#define CLICKSEG_DISTANCE_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

namespace clickseg {

namespace detail {

// Stand-in for "no source"; small enough that kFar + r^2 stays exact in a double.
constexpr double kFar = 1e12;

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line.
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    std::size_t k = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    auto meet = [&](std::size_t q, std::size_t p) {
        const double qd = static_cast<double>(q), pd = static_cast<double>(p);
        return ((f[q] + qd * qd) - (f[p] + pd * pd)) / (2.0 * qd - 2.0 * pd);
    };
    for (std::size_t q = 1; q < n; ++q) {
        double s = meet(q, v[k]);
        while (s <= z[k]) {
            --k;
            s = meet(q, v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = diff * diff + f[v[k]];
    }
}

} // namespace detail

/// Exact squared Euclidean distance from each pixel to the nearest source pixel.
/// Pixels are sources where `is_source` is nonzero. With no source at all every
/// entry is `detail::kFar` or larger. Values are integers stored in doubles.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& is_source, std::size_t height,
                                                      std::size_t width) {
    std::vector<double> grid(height * width);
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = is_source[i] ? 0.0 : detail::kFar;
    std::vector<std::size_t> v;
    std::vector<double> z;
    std::vector<double> f(std::max(height, width)), d(std::max(height, width));
    for (std::size_t c = 0; c < width; ++c) {
        for (std::size_t r = 0; r < height; ++r) f[r] = grid[r * width + c];
        detail::edt_1d(f.data(), d.data(), height, v, z);
        for (std::size_t r = 0; r < height; ++r) grid[r * width + c] = d[r];
    }
    for (std::size_t r = 0; r < height; ++r) {
        detail::edt_1d(grid.data() + r * width, d.data(), width, v, z);
        for (std::size_t c = 0; c < width; ++c) grid[r * width + c] = d[c];
    }
    return grid;
}

/// Squared distance from each pixel inside `region` to the nearest pixel outside it,
/// where everything beyond the image border counts as outside. Zero outside the region.
inline std::vector<double> squared_distance_to_boundary(const std::vector<std::uint8_t>& region, std::size_t height,
                                                        std::size_t width) {
    const std::size_t ph = height + 2, pw = width + 2;
    std::vector<std::uint8_t> outside(ph * pw, 1);
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) outside[(r + 1) * pw + c + 1] = region[r * width + c] ? 0 : 1;
    auto padded = squared_distance_transform(outside, ph, pw);
    std::vector<double> out(height * width);
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = padded[(r + 1) * pw + c + 1];
    return out;
}

} // namespace clickseg

#endif // CLICKSEG_DISTANCE_HPP
