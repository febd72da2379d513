#ifndef CLICKSEG_DATASET_HPP
#define CLICKSEG_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "clickseg/distance.hpp"
#include "clickseg/error.hpp"
#include "clickseg/image_io.hpp"
#include "clickseg/interaction.hpp"
#include "clickseg/mask.hpp"
#include "clickseg/rng.hpp"
#include "clickseg/sample.hpp"

namespace clickseg {

enum class ShapeKind { ellipse, rectangle, blob };

struct ShapeOptions {
    std::size_t size = 64;
    std::size_t max_distractors = 2;
    std::size_t min_area = 16;
    double max_area_fraction = 0.6;
    double texture = 0.12;        // amplitude of the smooth background texture
    double noise = 0.02;          // per-pixel noise amplitude
    double distractor_jitter = 0.08; // max per-channel color offset of distractors from the target
};

namespace detail {

using Color = std::array<double, 3>;

// Smooth noise in [0,1]: a coarse random grid, bilinearly upsampled.
inline std::vector<double> value_noise(std::size_t size, std::size_t cells, Rng& rng) {
    const std::size_t g = cells + 1;
    std::vector<double> grid(g * g);
    for (auto& v : grid) v = rng.uniform();
    std::vector<double> out(size * size);
    const double step = static_cast<double>(cells) / static_cast<double>(size);
    for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
            const double y = (static_cast<double>(r) + 0.5) * step, x = (static_cast<double>(c) + 0.5) * step;
            const auto y0 = std::min(static_cast<std::size_t>(y), cells - 1), x0 = std::min(static_cast<std::size_t>(x), cells - 1);
            const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
            const double a = grid[y0 * g + x0], b = grid[y0 * g + x0 + 1];
            const double cc = grid[(y0 + 1) * g + x0], d = grid[(y0 + 1) * g + x0 + 1];
            out[r * size + c] = (a * (1 - fx) + b * fx) * (1 - fy) + (cc * (1 - fx) + d * fx) * fy;
        }
    return out;
}

// Keeps only the largest 4-connected component (first in raster order on ties).
inline Mask largest_component(const Mask& m) {
    auto [labels, sizes] = label_components(m.bits(), m.height(), m.width());
    if (sizes.size() < 2) return m;
    std::size_t best = 1;
    for (std::size_t i = 2; i < sizes.size(); ++i)
        if (sizes[i] > sizes[best]) best = i;
    Mask out(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i)
        if (labels[i] == best) out.set(i / m.width(), i % m.width(), true);
    return out;
}

inline Mask random_shape(ShapeKind kind, std::size_t size, Rng& rng) {
    const double n = static_cast<double>(size);
    const double cy = rng.uniform(0.2 * n, 0.8 * n), cx = rng.uniform(0.2 * n, 0.8 * n);
    Mask m(size, size);
    if (kind == ShapeKind::blob) {
        const double radius = rng.uniform(0.12 * n, 0.3 * n);
        const auto noise = value_noise(size, 5, rng);
        for (std::size_t r = 0; r < size; ++r)
            for (std::size_t c = 0; c < size; ++c) {
                const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
                const double falloff = 1.0 - std::sqrt(dy * dy + dx * dx) / radius;
                m.set(r, c, falloff + 0.6 * (noise[r * size + c] - 0.5) > 0.0);
            }
        return largest_component(m);
    }
    const double a = rng.uniform(0.06 * n, 0.3 * n), b = rng.uniform(0.06 * n, 0.3 * n);
    const double theta = rng.uniform(0.0, 3.141592653589793);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
            const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
            const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
            const bool in = kind == ShapeKind::ellipse ? (u * u) / (a * a) + (v * v) / (b * b) <= 1.0
                                                       : std::abs(u) <= a && std::abs(v) <= b;
            m.set(r, c, in);
        }
    return largest_component(m);
}

inline Mask dilate(const Mask& m, double radius) {
    const auto d2 = squared_distance_transform(m.bits(), m.height(), m.width());
    Mask out(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i) out.set(i / m.width(), i % m.width(), d2[i] <= radius * radius);
    return out;
}

inline double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

} // namespace detail

/// One synthetic sample: a target shape over a textured background plus up to
/// max_distractors separate shapes of a similar color. Values are quantized to
/// 8 bits so a PNG round trip is exact.
inline Sample generate_shape_sample(Rng& rng, const ShapeOptions& opt, std::string id) {
    const std::size_t n = opt.size, px = n * n;
    const double max_area = opt.max_area_fraction * static_cast<double>(px);

    Mask target;
    for (int attempt = 0;; ++attempt) {
        if (attempt > 1000) throw Error("generate_shapes: could not place a target shape");
        const auto kind = static_cast<ShapeKind>(rng.uniform_index(3));
        target = detail::random_shape(kind, n, rng);
        const std::size_t area = target.count();
        if (area >= opt.min_area && static_cast<double>(area) <= max_area) break;
    }

    detail::Color background, color;
    for (auto& c : background) c = rng.uniform(0.1, 0.9);
    // Keep the target distinguishable from the mean background color.
    for (;;) {
        for (auto& c : color) c = rng.uniform(0.05, 0.95);
        double d = 0.0;
        for (std::size_t k = 0; k < 3; ++k) d += std::abs(color[k] - background[k]);
        if (d > 0.45) break;
    }

    std::vector<double> img(3 * px);
    const auto texture = detail::value_noise(n, 4, rng);
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < px; ++i)
            img[ch * px + i] = background[ch] + opt.texture * (texture[i] - 0.5) + rng.uniform(-opt.noise, opt.noise);

    auto paint = [&](const Mask& m, const detail::Color& col) {
        const auto shade = detail::value_noise(n, 3, rng);
        for (std::size_t i = 0; i < px; ++i) {
            if (!m.bits()[i]) continue;
            for (std::size_t ch = 0; ch < 3; ++ch)
                img[ch * px + i] = col[ch] + 0.08 * (shade[i] - 0.5) + rng.uniform(-opt.noise, opt.noise);
        }
    };

    const std::size_t distractors = opt.max_distractors ? rng.uniform_index(opt.max_distractors + 1) : 0;
    Mask occupied = detail::dilate(target, 2.0);
    for (std::size_t d = 0; d < distractors; ++d) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const auto kind = static_cast<ShapeKind>(rng.uniform_index(3));
            const Mask shape = detail::random_shape(kind, n, rng);
            if (shape.count() < opt.min_area || static_cast<double>(shape.count()) > 0.3 * static_cast<double>(px)) continue;
            bool overlaps = false;
            for (std::size_t i = 0; i < px && !overlaps; ++i) overlaps = shape.bits()[i] && occupied.bits()[i];
            if (overlaps) continue;
            detail::Color c = color;
            for (auto& v : c) v = std::clamp(v + rng.uniform(-opt.distractor_jitter, opt.distractor_jitter), 0.0, 1.0);
            paint(shape, c);
            const Mask grown = detail::dilate(shape, 2.0);
            for (std::size_t i = 0; i < px; ++i)
                if (grown.bits()[i]) occupied.set(i / n, i % n, true);
            break;
        }
    }
    paint(target, color);
    for (auto& v : img) v = detail::quantize(v);
    return Sample{Tensor({3, n, n}, std::move(img)), std::move(target), std::move(id)};
}

/// n samples; sample i depends only on (seed, i, options).
inline std::vector<Sample> generate_shapes(std::uint64_t seed, std::size_t n, const ShapeOptions& opt = {}) {
    if (n == 0) throw DomainError("generate_shapes: n must be at least 1");
    std::vector<Sample> out;
    out.reserve(n);
    const Rng root(seed);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = root.fork(i);
        out.push_back(generate_shape_sample(rng, opt, "shape-" + std::to_string(seed) + "-" + std::to_string(i)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resizing and augmentation

/// Bilinear resize of a [C,H,W] tensor (half-pixel centres, edge clamped).
inline Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    if (image.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W]");
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == 0 || w == 0 || out_h == 0 || out_w == 0) throw DomainError("resize_bilinear: empty size");
    auto taps = [](std::size_t in, std::size_t out, std::size_t i) {
        double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(src);
        const std::size_t hi = std::min(lo + 1, in - 1);
        return std::tuple{lo, hi, src - static_cast<double>(lo)};
    };
    std::vector<double> out(ch * out_h * out_w);
    for (std::size_t r = 0; r < out_h; ++r) {
        const auto [y0, y1, fy] = taps(h, out_h, r);
        for (std::size_t c = 0; c < out_w; ++c) {
            const auto [x0, x1, fx] = taps(w, out_w, c);
            for (std::size_t k = 0; k < ch; ++k) {
                const double* p = image.data().data() + k * h * w;
                const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
                const double bot = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
                out[(k * out_h + r) * out_w + c] = top * (1 - fy) + bot * fy;
            }
        }
    }
    return Tensor({ch, out_h, out_w}, std::move(out));
}

inline Mask resize_nearest(const Mask& m, std::size_t out_h, std::size_t out_w) {
    Mask out(out_h, out_w);
    for (std::size_t r = 0; r < out_h; ++r)
        for (std::size_t c = 0; c < out_w; ++c) {
            const std::size_t sr = std::min(m.height() - 1, (2 * r + 1) * m.height() / (2 * out_h));
            const std::size_t sc = std::min(m.width() - 1, (2 * c + 1) * m.width() / (2 * out_w));
            out.set(r, c, m(sr, sc));
        }
    return out;
}

struct AugmentOptions {
    bool flip = true;
    double min_scale = 0.75;
    double max_scale = 1.4;
};

/// Random horizontal flip, then a random rescale placed back into the original frame
/// (cropped when enlarged, padded with the border color when shrunk). Falls back to the
/// flipped sample if the rescaled object would be smaller than `min_area` pixels.
inline Sample augment(const Sample& s, Rng& rng, const AugmentOptions& opt = {}, std::size_t min_area = 16) {
    const std::size_t ch = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
    Sample out{s.image, s.gt, s.id};
    if (opt.flip && rng.bernoulli(0.5)) {
        std::vector<double> v(s.image.numel());
        Mask g(h, w);
        for (std::size_t k = 0; k < ch; ++k)
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t c = 0; c < w; ++c) v[(k * h + r) * w + c] = s.image[(k * h + r) * w + (w - 1 - c)];
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) g.set(r, c, s.gt(r, w - 1 - c));
        out.image = Tensor({ch, h, w}, std::move(v));
        out.gt = std::move(g);
    }
    const double scale = rng.uniform(opt.min_scale, opt.max_scale);
    const auto nh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(h))));
    const auto nw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(w))));
    const Tensor big = resize_bilinear(out.image, nh, nw);
    const Mask big_gt = resize_nearest(out.gt, nh, nw);
    // Offset of the resized frame inside the original one (negative when cropping).
    const long oy = static_cast<long>(rng.uniform_index(std::max<std::size_t>(1, h > nh ? h - nh + 1 : nh - h + 1)));
    const long ox = static_cast<long>(rng.uniform_index(std::max<std::size_t>(1, w > nw ? w - nw + 1 : nw - w + 1)));
    const long dy = h > nh ? oy : -oy, dx = w > nw ? ox : -ox;
    std::vector<double> v(ch * h * w);
    Mask g(h, w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const long sr = std::clamp(static_cast<long>(r) - dy, 0L, static_cast<long>(nh) - 1);
            const long sc = std::clamp(static_cast<long>(c) - dx, 0L, static_cast<long>(nw) - 1);
            const bool inside = static_cast<long>(r) - dy == sr && static_cast<long>(c) - dx == sc;
            for (std::size_t k = 0; k < ch; ++k) v[(k * h + r) * w + c] = big[(k * nh + sr) * nw + sc];
            g.set(r, c, inside && big_gt(sr, sc));
        }
    Mask connected = detail::largest_component(g);
    if (connected.count() < min_area) return out;
    out.image = Tensor({ch, h, w}, std::move(v));
    out.gt = std::move(connected);
    return out;
}

// ---------------------------------------------------------------------------
// Files

/// Reads an RGB image and a single-channel mask (>= 128 is foreground).
inline Sample load_sample(const std::string& image_path, const std::string& mask_path, std::string id = {}) {
    Sample s{load_image(image_path), load_mask(mask_path), id.empty() ? image_path : std::move(id)};
    if (s.image.dim(1) != s.gt.height() || s.image.dim(2) != s.gt.width()) {
        throw ShapeError("load_sample: " + image_path + " is " + std::to_string(s.image.dim(2)) + "x" +
                         std::to_string(s.image.dim(1)) + " but " + mask_path + " is " +
                         std::to_string(s.gt.width()) + "x" + std::to_string(s.gt.height()));
    }
    return s;
}

/// Manifest: one line per sample, `<id>\t<image path>\t<mask path>`, paths relative to the
/// manifest's directory. Blank lines and lines starting with '#' are ignored.
inline std::vector<Sample> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_manifest: cannot open " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string id, image, mask;
        if (!std::getline(fields, id, '\t') || !std::getline(fields, image, '\t') || !std::getline(fields, mask)) {
            throw IoError("load_manifest: " + path + ":" + std::to_string(lineno) + ": expected three tab-separated fields");
        }
        out.push_back(load_sample((base / image).string(), (base / mask).string(), id));
    }
    if (out.empty()) throw IoError("load_manifest: " + path + " lists no samples");
    return out;
}

/// Writes `<id>.png`, `<id>_mask.png` and `manifest.txt` into `dir` (created if needed).
inline void write_dataset(const std::vector<Sample>& samples, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(std::filesystem::path(dir) / "manifest.txt");
    if (!manifest) throw IoError("write_dataset: cannot create manifest in " + dir);
    for (const auto& s : samples) {
        const std::string image = s.id + ".png", mask = s.id + "_mask.png";
        save_image(s.image, (std::filesystem::path(dir) / image).string());
        save_mask(s.gt, (std::filesystem::path(dir) / mask).string());
        manifest << s.id << '\t' << image << '\t' << mask << '\n';
    }
}

} // namespace clickseg

#endif // CLICKSEG_DATASET_HPP
