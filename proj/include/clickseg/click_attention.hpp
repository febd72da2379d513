#ifndef CLICKSEG_CLICK_ATTENTION_HPP
#define CLICKSEG_CLICK_ATTENTION_HPP

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clickseg/mask.hpp"
#include "clickseg/model_config.hpp"
#include "clickseg/nn.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// Two-layer projection of patch features into the space where click similarity is measured.
struct MappingHead {
    Linear fc1;
    Linear fc2;

    MappingHead() = default;
    MappingHead(std::size_t in, std::size_t width, Rng& rng) : fc1(in, width, rng), fc2(width, width, rng) {}

    Tensor operator()(const Tensor& features) const { return fc2(gelu(fc1(features))); }

    std::size_t output_dim() const { return fc2.weight.dim(1); }

    void collect(const std::string& prefix, NamedParameters& out) const {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

/// Per-stage click attention: similarity of every patch to the positively clicked patches.
struct SimilarityField {
    std::size_t stage = 0;
    Tensor values;        // [L_i, 1], entries in [0,1]
    bool neutral = false; // no positive clicks: all ones, carries no gradient
};

/// Patch index of `click` at `stage` (0-based), row-major over the stage grid.
inline std::size_t click_to_patch(const Click& click, std::size_t stage, const ModelConfig& config) {
    require_in_bounds(click, config.input_size, config.input_size);
    const std::size_t p = config.patch_extent(stage);
    return (click.row / p) * config.grid(stage) + click.col / p;
}

/// Patch indices of the positive clicks in click order; repeated patches are kept.
inline std::vector<std::size_t> positive_patches(const ClickSet& clicks, std::size_t stage, const ModelConfig& config) {
    std::vector<std::size_t> out;
    for (const auto& c : clicks)
        if (c.positive()) out.push_back(click_to_patch(c, stage, config));
    return out;
}

/// Similarity field from stage features.
///
/// g = head(features); for each clicked patch k, s^k[j] = (1 + cos(g_j, g_k)) / 2;
/// s = mean over k. Without positive patches the field is all ones.
inline SimilarityField compute_similarity(const Tensor& features, const std::vector<std::size_t>& patches,
                                          const MappingHead& head, std::size_t stage = 0) {
    detail::require_rank(features, 2, "compute_similarity");
    const std::size_t n = features.dim(0);
    for (auto p : patches)
        if (p >= n) throw DomainError("compute_similarity: patch index " + std::to_string(p) + " out of range");
    if (patches.empty()) return SimilarityField{stage, Tensor::full({n, 1}, 1.0), true};

    const Tensor unit = normalize_rows(head(features));
    const std::size_t width = unit.dim(1);
    std::vector<std::size_t> index;
    index.reserve(patches.size() * width);
    for (auto p : patches)
        for (std::size_t j = 0; j < width; ++j) index.push_back(p * width + j);
    auto pick = std::make_shared<SparseMap>(SparseMap::gather(unit.shape(), {patches.size(), width}, index));
    const Tensor clicked = apply_map(pick, unit);                      // [K, C']
    const Tensor cosine = matmul(unit, transpose(clicked));            // [L, K]
    const Tensor per_click = clamp(scale(add_scalar(cosine, 1.0), 0.5), 0.0, 1.0);
    const Tensor total = matmul(per_click, Tensor::full({patches.size(), 1}, 1.0));
    return SimilarityField{stage, scale(total, 1.0 / static_cast<double>(patches.size())), false};
}

/// Patch labels at `stage`: 1 when at least half of the patch's pixels are foreground.
inline Tensor patch_labels(const Mask& gt, std::size_t stage, const ModelConfig& config) {
    if (gt.height() != config.input_size || gt.width() != config.input_size) {
        throw ShapeError("patch_labels: mask does not match model input size");
    }
    const std::size_t p = config.patch_extent(stage), g = config.grid(stage);
    std::vector<double> labels(g * g);
    for (std::size_t pr = 0; pr < g; ++pr)
        for (std::size_t pc = 0; pc < g; ++pc) {
            std::size_t fg = 0;
            for (std::size_t r = pr * p; r < (pr + 1) * p; ++r)
                for (std::size_t c = pc * p; c < (pc + 1) * p; ++c) fg += gt(r, c) ? 1 : 0;
            labels[pr * g + pc] = (2 * fg >= p * p) ? 1.0 : 0.0;
        }
    return Tensor({g * g, 1}, std::move(labels));
}

/// Mean over stages with positive clicks of mse(s_i, y_i). Zero when no stage qualifies.
inline Tensor click_loss(const std::array<std::optional<SimilarityField>, kStages>& fields, const Mask& gt,
                         const ModelConfig& config) {
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < kStages; ++i) {
        if (!fields[i] || fields[i]->neutral) continue;
        terms.push_back(mse(fields[i]->values, patch_labels(gt, i, config)));
    }
    if (terms.empty()) return Tensor::scalar(0.0);
    Tensor total = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
    return scale(total, 1.0 / static_cast<double>(terms.size()));
}

} // namespace clickseg

#endif // CLICKSEG_CLICK_ATTENTION_HPP
