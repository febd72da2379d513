#ifndef CLICKSEG_EVALUATION_HPP
#define CLICKSEG_EVALUATION_HPP

#include <algorithm>
#include <concepts>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "clickseg/distance.hpp"
#include "clickseg/encoder.hpp"
#include "clickseg/interaction.hpp"
#include "clickseg/mask.hpp"
#include "clickseg/rng.hpp"
#include "clickseg/sample.hpp"

namespace clickseg {

/// |a and b| / |a or b|; two empty masks count as a perfect match.
inline double iou(const Mask& a, const Mask& b) {
    require_same_size(a, b, "iou");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a.bits()[i] & b.bits()[i];
        uni += a.bits()[i] | b.bits()[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Anything that maps (sample, clicks, previous probability map) to a prediction.
template <typename S>
concept Segmenter = requires(S s, const Sample& x, const ClickSet& c, const Tensor& p) {
    { s(x, c, p) } -> std::convertible_to<Prediction>;
};

/// Runs a Model without recording gradients.
struct ModelSegmenter {
    const Model* model = nullptr;
    bool click_attention = true;

    Prediction operator()(const Sample& sample, const ClickSet& clicks, const Tensor& prev) const {
        NoGradGuard guard;
        return forward(*model, sample.image, clicks, prev, click_attention).prediction;
    }
};

struct EvalOptions {
    double target_iou = 0.85;
    std::size_t max_clicks = 20;
    /// Trajectories continue until this IoU (or the target, if higher) so that NoC at
    /// every threshold up to it can be read off one run.
    double track_iou = 0.90;
};

struct SampleResult {
    std::string id;
    std::vector<double> ious; // IoU after click 1, 2, ...
    std::size_t clicks_used = 0;
    double final_iou = 0.0;
    bool failed = false;
};

struct EvalReport {
    double target_iou = 0.85;
    double track_iou = 0.90;
    std::size_t max_clicks = 20;
    std::vector<SampleResult> samples;

    /// Clicks needed by one sample to reach `t`, or max_clicks if it never does.
    std::size_t clicks_to_reach(const SampleResult& s, double t) const {
        require_tracked(t);
        for (std::size_t k = 0; k < s.ious.size(); ++k)
            if (s.ious[k] >= t) return k + 1;
        return max_clicks;
    }

    double noc(double t) const {
        if (samples.empty()) return 0.0;
        double total = 0.0;
        for (const auto& s : samples) total += static_cast<double>(clicks_to_reach(s, t));
        return total / static_cast<double>(samples.size());
    }

    std::size_t nof(double t) const {
        require_tracked(t);
        std::size_t n = 0;
        for (const auto& s : samples)
            if (std::none_of(s.ious.begin(), s.ious.end(), [t](double v) { return v >= t; })) ++n;
        return n;
    }

    double mean_final_iou() const {
        double total = 0.0;
        for (const auto& s : samples) total += s.final_iou;
        return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
    }

private:
    void require_tracked(double t) const {
        if (t > std::max(target_iou, track_iou)) {
            throw DomainError("EvalReport: threshold " + std::to_string(t) + " above the tracked IoU");
        }
    }
};

/// Standard click protocol: each click goes to the centre of the largest error region,
/// the previous probability map is fed back, and a sample stops once it reaches the
/// tracked IoU or the click cap.
template <Segmenter S>
EvalReport evaluate_noc(S&& segmenter, const std::vector<Sample>& samples, const EvalOptions& options = {},
                        const std::vector<Tensor>* initial_masks = nullptr) {
    if (samples.empty()) throw DomainError("evaluate_noc: no samples");
    if (!(options.target_iou > 0.0 && options.target_iou < 1.0)) throw DomainError("evaluate_noc: target outside (0,1)");
    if (options.max_clicks == 0) throw DomainError("evaluate_noc: max_clicks must be positive");
    if (initial_masks && initial_masks->size() != samples.size()) {
        throw ShapeError("evaluate_noc: one initial mask per sample required");
    }
    const double stop = std::max(options.target_iou, options.track_iou);
    EvalReport report;
    report.target_iou = options.target_iou;
    report.track_iou = options.track_iou;
    report.max_clicks = options.max_clicks;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& sample = samples[i];
        validate_sample(sample);
        const std::size_t h = sample.gt.height(), w = sample.gt.width();
        Tensor prev = Tensor::zeros({1, h, w});
        if (initial_masks) {
            prev = (*initial_masks)[i];
            if (prev.shape() != Shape{1, h, w}) throw ShapeError("evaluate_noc: initial mask size mismatch");
        }
        Mask current = threshold_mask(prev.values(), h, w);
        ClickSet clicks;
        SampleResult result;
        result.id = sample.id;
        for (std::size_t k = 0; k < options.max_clicks; ++k) {
            auto click = next_click(current, sample.gt);
            if (!click) {
                // Already exact: the remaining clicks would change nothing.
                result.ious.push_back(1.0);
                break;
            }
            click->ordinal = clicks.size();
            clicks.push_back(*click);
            Prediction pred = segmenter(sample, clicks, prev);
            current = pred.mask;
            prev = pred.probability;
            result.ious.push_back(iou(current, sample.gt));
            if (result.ious.back() >= stop) break;
        }
        result.final_iou = result.ious.back();
        result.clicks_used = report.clicks_to_reach(result, options.target_iou);
        result.failed = std::none_of(result.ious.begin(), result.ious.end(),
                                     [&](double v) { return v >= options.target_iou; });
        if (!result.failed) result.final_iou = result.ious[result.clicks_used - 1];
        report.samples.push_back(std::move(result));
    }
    return report;
}

/// Mean IoU after k = 1..max_clicks clicks; samples that stopped early keep their last value.
inline std::vector<std::pair<std::size_t, double>> iou_curve(const EvalReport& report) {
    std::vector<std::pair<std::size_t, double>> curve;
    if (report.samples.empty()) return curve;
    for (std::size_t k = 1; k <= report.max_clicks; ++k) {
        double total = 0.0;
        for (const auto& s : report.samples) total += s.ious[std::min(k, s.ious.size()) - 1];
        curve.emplace_back(k, total / static_cast<double>(report.samples.size()));
    }
    return curve;
}

namespace detail {
inline std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}
} // namespace detail

/// Writes the report as text:
///
///   sample id=<id> clicks=<n> final_iou=<x> failed=<0|1> ious=<x1,x2,...>
///   ...
///   summary samples=<n> target=<t> max_clicks=<c> noc85=<x> noc90=<x> nof85=<n> nof90=<n> mean_final_iou=<x>
///   curve k=<k> iou=<x>
///   ...
///
/// Floats use six decimals. noc90/nof90 are omitted when the run did not track IoU 0.90.
inline void write_report(const EvalReport& report, std::ostream& out) {
    for (const auto& s : report.samples) {
        out << "sample id=" << s.id << " clicks=" << s.clicks_used << " final_iou=" << detail::fixed(s.final_iou)
            << " failed=" << (s.failed ? 1 : 0) << " ious=";
        for (std::size_t k = 0; k < s.ious.size(); ++k) out << (k ? "," : "") << detail::fixed(s.ious[k]);
        out << '\n';
    }
    const double tracked = std::max(report.target_iou, report.track_iou);
    out << "summary samples=" << report.samples.size() << " target=" << detail::fixed(report.target_iou, 2)
        << " max_clicks=" << report.max_clicks;
    if (tracked >= 0.85) out << " noc85=" << detail::fixed(report.noc(0.85), 4);
    if (tracked >= 0.90) out << " noc90=" << detail::fixed(report.noc(0.90), 4);
    if (tracked >= 0.85) out << " nof85=" << report.nof(0.85);
    if (tracked >= 0.90) out << " nof90=" << report.nof(0.90);
    out << " mean_final_iou=" << detail::fixed(report.mean_final_iou()) << '\n';
    for (const auto& [k, v] : iou_curve(report)) out << "curve k=" << k << " iou=" << detail::fixed(v) << '\n';
}

inline void write_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_report: cannot open " + path);
    write_report(report, out);
    if (!out) throw IoError("write_report: write failed for " + path);
}

/// Degrades `gt` into a starting mask with IoU drawn uniformly from [lo, hi]: either the
/// nearest background pixels are added or the foreground pixels nearest the boundary are
/// removed. Distance ties are broken randomly. Returns a [1,H,W] 0/1 map.
inline Tensor synthesize_initial_mask(const Mask& gt, Rng& rng, double lo = 0.75, double hi = 0.85) {
    if (gt.empty()) throw DomainError("synthesize_initial_mask: empty ground truth");
    if (!(0.0 < lo && lo <= hi && hi < 1.0)) throw DomainError("synthesize_initial_mask: bad IoU range");
    const std::size_t h = gt.height(), w = gt.width(), fg = gt.count();
    const double target = rng.uniform(lo, hi);
    const std::size_t bg = gt.size() - fg;
    const auto add_needed = static_cast<std::size_t>(std::llround(static_cast<double>(fg) * (1.0 / target - 1.0)));
    const bool dilate = add_needed <= bg && (rng.bernoulli(0.5) || fg < 4);
    std::vector<std::uint8_t> bits = gt.bits();

    std::vector<double> dist;
    std::vector<std::size_t> candidates;
    std::size_t count = 0;
    if (dilate) {
        dist = squared_distance_transform(gt.bits(), h, w);
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (!bits[i]) candidates.push_back(i);
        count = add_needed;
    } else {
        dist = squared_distance_to_boundary(gt.bits(), h, w);
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) candidates.push_back(i);
        count = static_cast<std::size_t>(std::llround(static_cast<double>(fg) * (1.0 - target)));
        count = std::min(count, fg - 1);
    }
    std::vector<std::uint64_t> key(bits.size());
    for (auto& k : key) k = rng.next_u64();
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        return dist[a] != dist[b] ? dist[a] < dist[b] : key[a] < key[b];
    });
    for (std::size_t i = 0; i < count; ++i) bits[candidates[i]] = dilate ? 1 : 0;
    std::vector<double> out(bits.begin(), bits.end());
    return Tensor({1, h, w}, std::move(out));
}

} // namespace clickseg

#endif // CLICKSEG_EVALUATION_HPP
