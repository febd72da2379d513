#ifndef CLICKSEG_INTERACTION_HPP
#define CLICKSEG_INTERACTION_HPP

#include <cmath>
#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "clickseg/distance.hpp"
#include "clickseg/mask.hpp"
#include "clickseg/rng.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// Radius used for 64x64 inputs.
inline constexpr std::size_t kDefaultClickRadius = 3;

/// Two binary channels [positive, negative] with a filled Euclidean disk per click.
inline Tensor render_click_maps(const ClickSet& clicks, std::size_t height, std::size_t width,
                                std::size_t radius = kDefaultClickRadius) {
    std::vector<double> maps(2 * height * width, 0.0);
    const long rad = static_cast<long>(radius);
    for (const auto& click : clicks) {
        require_in_bounds(click, height, width);
        double* channel = maps.data() + (click.positive() ? 0 : height * width);
        const long r0 = static_cast<long>(click.row), c0 = static_cast<long>(click.col);
        for (long dr = -rad; dr <= rad; ++dr) {
            for (long dc = -rad; dc <= rad; ++dc) {
                if (dr * dr + dc * dc > rad * rad) continue;
                const long r = r0 + dr, c = c0 + dc;
                if (r < 0 || c < 0 || r >= static_cast<long>(height) || c >= static_cast<long>(width)) continue;
                channel[static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c)] = 1.0;
            }
        }
    }
    return Tensor({2, height, width}, std::move(maps));
}

/// 4-connected components of the set pixels, labelled 1.. in raster order of first pixel.
/// Returns labels (0 = unset) and the size of each component (index 0 unused).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
label_components(const std::vector<std::uint8_t>& set, std::size_t height, std::size_t width) {
    std::vector<std::size_t> labels(set.size(), 0);
    std::vector<std::size_t> sizes{0};
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < set.size(); ++start) {
        if (!set[start] || labels[start]) continue;
        const std::size_t id = sizes.size();
        sizes.push_back(0);
        labels[start] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++sizes[id];
            const std::size_t r = p / width, c = p % width;
            auto visit = [&](std::size_t q) {
                if (set[q] && !labels[q]) {
                    labels[q] = id;
                    stack.push_back(q);
                }
            };
            if (r > 0) visit(p - width);
            if (r + 1 < height) visit(p + width);
            if (c > 0) visit(p - 1);
            if (c + 1 < width) visit(p + 1);
        }
    }
    return {std::move(labels), std::move(sizes)};
}

/// Next simulated click: the interior-most pixel of the largest error region.
///
/// Errors are pred XOR gt. The largest 4-connected error component is chosen
/// (equal sizes: the one whose first pixel comes first in raster order). Inside
/// it, the pixel farthest (Euclidean) from any pixel outside the component is
/// clicked, with the image border counting as outside; ties go to the smallest
/// row, then the smallest column. A false negative yields a positive click.
/// Returns nothing when pred == gt.
inline std::optional<Click> next_click(const Mask& pred, const Mask& gt) {
    require_same_size(pred, gt, "next_click");
    const std::size_t h = gt.height(), w = gt.width();
    std::vector<std::uint8_t> error(h * w);
    bool any = false;
    for (std::size_t i = 0; i < error.size(); ++i) {
        error[i] = pred.bits()[i] != gt.bits()[i] ? 1 : 0;
        any = any || error[i];
    }
    if (!any) return std::nullopt;

    auto [labels, sizes] = label_components(error, h, w);
    std::size_t best = 1;
    for (std::size_t id = 2; id < sizes.size(); ++id)
        if (sizes[id] > sizes[best]) best = id;

    std::vector<std::uint8_t> component(h * w);
    for (std::size_t i = 0; i < component.size(); ++i) component[i] = labels[i] == best ? 1 : 0;
    const auto dist = squared_distance_to_boundary(component, h, w);

    std::size_t pick = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < component.size(); ++i) {
        if (component[i] && dist[i] > best_d) {
            best_d = dist[i];
            pick = i;
        }
    }
    Click click;
    click.row = pick / w;
    click.col = pick % w;
    click.polarity = gt.bits()[pick] ? Polarity::positive : Polarity::negative;
    return click;
}

struct InitialClickOptions {
    double margin = 5.0;           // negatives lie at object distance in [margin, 2*margin]
    std::size_t max_negatives = 3; // negatives drawn uniformly from 0..max_negatives
};

/// Training-time starting clicks: one positive at the object's interior-most pixel and
/// a few negatives sampled uniformly from a band around the object.
inline ClickSet initial_clicks(const Mask& gt, Rng& rng, const InitialClickOptions& opts = {}) {
    if (gt.empty()) throw DomainError("initial_clicks: empty ground truth");
    const std::size_t h = gt.height(), w = gt.width();
    const auto inside = squared_distance_to_boundary(gt.bits(), h, w);
    std::size_t pick = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < inside.size(); ++i) {
        if (gt.bits()[i] && inside[i] > best) {
            best = inside[i];
            pick = i;
        }
    }
    ClickSet clicks{Click{pick / w, pick % w, Polarity::positive, 0}};

    const auto to_object = squared_distance_transform(gt.bits(), h, w);
    const double lo = opts.margin * opts.margin, hi = 4.0 * opts.margin * opts.margin;
    std::vector<std::size_t> band;
    for (std::size_t i = 0; i < to_object.size(); ++i)
        if (!gt.bits()[i] && to_object[i] >= lo && to_object[i] <= hi) band.push_back(i);

    const std::size_t wanted = rng.uniform_index(opts.max_negatives + 1);
    const std::size_t n = std::min(wanted, band.size());
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = k + rng.uniform_index(band.size() - k);
        std::swap(band[k], band[j]);
        clicks.push_back(Click{band[k] / w, band[k] % w, Polarity::negative, clicks.size()});
    }
    return clicks;
}

/// Iterative click schedule used during training.
struct ClickSchedule {
    std::size_t max_clicks = 24;
    double continue_probability = 0.8;
};

/// Number of clicks to add: successes of Bernoulli(p) before the first failure, capped.
inline std::size_t sample_added_clicks(const ClickSchedule& schedule, Rng& rng, std::size_t cap) {
    std::size_t n = 0;
    while (n < cap && rng.uniform() < schedule.continue_probability) ++n;
    return n;
}

inline Mask threshold_mask(const std::vector<double>& prob, std::size_t height, std::size_t width) {
    Mask m(height, width);
    for (std::size_t i = 0; i < prob.size(); ++i) m.set(i / width, i % width, prob[i] > 0.5);
    return m;
}

struct ClickTrajectory {
    ClickSet clicks;
    std::vector<double> prev_mask; // probability map fed as the prior-mask channel
    std::size_t added = 0;
};

/// Extends `start` with clicks sampled against the model's own predictions.
///
/// `predict(clicks, prev_mask)` returns a full-resolution foreground probability
/// map. The number of added clicks follows the schedule, capped so the total
/// stays within schedule.max_clicks; it stops early if the prediction is exact.
template <typename Predict>
ClickTrajectory iterative_clicks(Predict&& predict, const Mask& gt, ClickSet start, std::vector<double> prev_mask,
                                 const ClickSchedule& schedule, Rng& rng) {
    ClickTrajectory traj{std::move(start), std::move(prev_mask), 0};
    const std::size_t cap = schedule.max_clicks > traj.clicks.size() ? schedule.max_clicks - traj.clicks.size() : 0;
    const std::size_t wanted = sample_added_clicks(schedule, rng, cap);
    for (std::size_t i = 0; i < wanted; ++i) {
        std::vector<double> prob = predict(traj.clicks, traj.prev_mask);
        auto click = next_click(threshold_mask(prob, gt.height(), gt.width()), gt);
        if (!click) break;
        click->ordinal = traj.clicks.size();
        traj.clicks.push_back(*click);
        traj.prev_mask = std::move(prob);
        ++traj.added;
    }
    return traj;
}

} // namespace clickseg

#endif // CLICKSEG_INTERACTION_HPP
