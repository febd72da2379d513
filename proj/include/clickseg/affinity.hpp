#ifndef CLICKSEG_AFFINITY_HPP
#define CLICKSEG_AFFINITY_HPP

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "clickseg/encoder.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// Mean post-softmax attention of one stage over its layers and heads.
struct StageAttention {
    std::size_t stage = 0;
    Tensor map; // [L, L]
};

struct RelevancePair {
    Tensor positive; // [L, 1]
    Tensor negative; // [L, 1]
};

/// Inputs of the affinity term for one stage.
struct AffinityTerm {
    Tensor attention;  // A_i, [L, L]
    Tensor similarity; // s_i, [L, 1]
    Tensor foreground; // x'_P, [L, 1]
    Tensor background; // x'_P-hat, [L, 1]
};

inline StageAttention aggregate_attention(const std::vector<AttentionRecord>& records) {
    if (records.empty()) throw ShapeError("aggregate_attention: no attention records");
    const Shape& shape = records.front().post_softmax.shape();
    Tensor total = records.front().post_softmax;
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].post_softmax.shape() != shape) throw ShapeError("aggregate_attention: mixed shapes");
        total = add(total, records[i].post_softmax);
    }
    if (records.size() > 1) total = scale(total, 1.0 / static_cast<double>(records.size()));
    return {records.front().stage, total};
}

/// Y_pos = (A masked by s over keys) x'_P and Y_neg = (A masked by 1 - s) x'_P-hat.
inline RelevancePair relevance(const Tensor& attention, const Tensor& similarity, const Tensor& foreground,
                               const Tensor& background) {
    detail::require_rank(attention, 2, "relevance");
    const std::size_t n = attention.dim(0);
    if (attention.dim(1) != n) throw ShapeError("relevance: attention must be square, got " + shape_str(attention.shape()));
    const Shape column{n, 1};
    if (similarity.shape() != column || foreground.shape() != column || background.shape() != column) {
        throw ShapeError("relevance: similarity and predictions must be [" + std::to_string(n) + ",1]");
    }
    const Tensor s_keys = reshape(similarity, {1, n});
    return {matmul(mul(attention, s_keys), foreground), matmul(mul(attention, one_minus(s_keys)), background)};
}

/// Constants of the affinity term: the targets x'_P s and x'_P-hat (1 - s), plus the s and
/// predictions used to mask the attention, so only A carries gradient.
struct AffinityTarget {
    Tensor positive;
    Tensor negative;
    Tensor similarity;
    Tensor foreground;
    Tensor background;
};

inline std::vector<AffinityTarget> affinity_targets(const std::vector<AffinityTerm>& terms) {
    std::vector<AffinityTarget> out;
    out.reserve(terms.size());
    for (const auto& t : terms) {
        const Tensor s = t.similarity.detach();
        NoGradGuard guard;
        const Tensor fg = t.foreground.detach(), bg = t.background.detach();
        out.push_back({mul(fg, s), mul(bg, one_minus(s)), s, fg, bg});
    }
    return out;
}

/// Mean over stages of |Y_pos - target_pos|_1 + |Y_neg - target_neg|_1, each norm averaged over patches.
inline Tensor affinity_loss(const std::vector<AffinityTerm>& terms, const std::vector<AffinityTarget>& targets) {
    if (terms.size() != targets.size()) throw ShapeError("affinity_loss: one target per term required");
    if (terms.empty()) return Tensor::scalar(0.0);
    std::optional<Tensor> total;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        const auto& c = targets[i];
        const RelevancePair y = relevance(terms[i].attention, c.similarity, c.foreground, c.background);
        const Tensor term = add(l1(y.positive, c.positive), l1(y.negative, c.negative));
        total = total ? add(*total, term) : term;
    }
    return scale(*total, 1.0 / static_cast<double>(terms.size()));
}

/// Affinity loss with constants taken from the terms themselves. Gradients flow only into
/// the attention maps.
inline Tensor affinity_loss(const std::vector<AffinityTerm>& terms) {
    return affinity_loss(terms, affinity_targets(terms));
}

/// Predicted foreground probability pooled to every stage resolution, as [L_i, 1] columns.
inline std::array<Tensor, kStages> stage_predictions(const Model& model, const Tensor& logits) {
    const Tensor prob = sigmoid(logits);
    std::array<Tensor, kStages> out;
    for (std::size_t i = 0; i < kStages; ++i) out[i] = apply_map(model.pool(i), prob);
    return out;
}

/// Affinity terms of a forward pass run with click attention on.
inline std::vector<AffinityTerm> affinity_terms(const Model& model, const ForwardResult& result) {
    const auto pooled = stage_predictions(model, result.logits);
    std::vector<AffinityTerm> terms;
    for (std::size_t i = 0; i < kStages; ++i) {
        const auto& s = result.encoder.similarity[i];
        if (!s) throw ContractError("affinity_terms: forward pass ran without click attention");
        const StageAttention a = aggregate_attention(result.encoder.attention[i]);
        terms.push_back({a.map, s->values, pooled[i], one_minus(pooled[i])});
    }
    return terms;
}

} // namespace clickseg

#endif // CLICKSEG_AFFINITY_HPP
