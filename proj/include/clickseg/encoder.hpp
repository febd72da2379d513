#ifndef CLICKSEG_ENCODER_HPP
#define CLICKSEG_ENCODER_HPP

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/click_attention.hpp"
#include "clickseg/interaction.hpp"
#include "clickseg/mask.hpp"
#include "clickseg/model_config.hpp"
#include "clickseg/nn.hpp"
#include "clickseg/rng.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

inline constexpr std::size_t kInputChannels = 6; // RGB, positive map, negative map, previous mask

/// Attention of one head in one layer: scaled logits before any click bias, and the
/// row-stochastic weights actually applied.
struct AttentionRecord {
    std::size_t stage = 0;
    std::size_t layer = 0;
    std::size_t head = 0;
    Tensor pre_softmax;  // [L, L/R^2]
    Tensor post_softmax; // [L, L/R^2]
};

using StageFeatures = std::array<Tensor, kStages>;

struct EncoderOutput {
    StageFeatures features;
    std::array<std::vector<AttentionRecord>, kStages> attention;
    std::array<std::optional<SimilarityField>, kStages> similarity; // set only with click attention on
};

struct AttentionWeights {
    Linear query, key, value, proj;
    std::optional<Linear> reduce; // spatial reduction of keys/values when R > 1
    Norm reduce_norm;
};

struct Block {
    Norm norm1;
    AttentionWeights attn;
    Norm norm2;
    Linear fc1, fc2;
};

struct Stage {
    Linear embed; // patch embedding (stage 1) or 2x2 patch merging (later stages)
    Norm embed_norm;
    std::vector<Block> blocks;
    Norm norm;
    MappingHead mapping;
};

struct Decoder {
    std::array<Linear, kStages> proj;
    Linear fuse;
    Linear head;
};

namespace detail {

// [g*g, C] -> [(g/f)^2, f*f*C], features ordered (dy, dx, channel).
inline SparseMapPtr merge_map(std::size_t g, std::size_t channels, std::size_t f) {
    const std::size_t go = g / f, width = f * f * channels;
    std::vector<std::size_t> index(go * go * width);
    for (std::size_t r = 0; r < go; ++r)
        for (std::size_t c = 0; c < go; ++c)
            for (std::size_t dy = 0; dy < f; ++dy)
                for (std::size_t dx = 0; dx < f; ++dx)
                    for (std::size_t ch = 0; ch < channels; ++ch)
                        index[(r * go + c) * width + (dy * f + dx) * channels + ch] =
                            ((r * f + dy) * g + c * f + dx) * channels + ch;
    return std::make_shared<SparseMap>(SparseMap::gather({g * g, channels}, {go * go, width}, index));
}

// [C, H, W] -> [(H/p)(W/p), C*p*p], features ordered (channel, dy, dx).
inline SparseMapPtr patchify_map(std::size_t channels, std::size_t size, std::size_t p) {
    const std::size_t g = size / p, width = channels * p * p;
    std::vector<std::size_t> index(g * g * width);
    for (std::size_t r = 0; r < g; ++r)
        for (std::size_t c = 0; c < g; ++c)
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx)
                        index[(r * g + c) * width + (ch * p + dy) * p + dx] =
                            (ch * size + r * p + dy) * size + c * p + dx;
    return std::make_shared<SparseMap>(SparseMap::gather({channels, size, size}, {g * g, width}, index));
}

// Nearest-neighbour upsampling of a [gi*gi, D] grid to [go*go, D].
inline SparseMapPtr upsample_nearest_map(std::size_t gi, std::size_t go, std::size_t dim) {
    const std::size_t f = go / gi;
    std::vector<std::size_t> index(go * go * dim);
    for (std::size_t r = 0; r < go; ++r)
        for (std::size_t c = 0; c < go; ++c)
            for (std::size_t d = 0; d < dim; ++d) index[(r * go + c) * dim + d] = ((r / f) * gi + c / f) * dim + d;
    return std::make_shared<SparseMap>(SparseMap::gather({gi * gi, dim}, {go * go, dim}, index));
}

// Bilinear (half-pixel centres, edge clamped) upsampling [1,g,g] -> [1,g*f,g*f].
inline SparseMapPtr upsample_bilinear_map(std::size_t g, std::size_t f) {
    const std::size_t n = g * f;
    struct Tap {
        std::size_t lo, hi;
        double w_hi;
    };
    std::vector<Tap> taps(n);
    for (std::size_t y = 0; y < n; ++y) {
        double src = (static_cast<double>(y) + 0.5) / static_cast<double>(f) - 0.5;
        src = std::max(src, 0.0);
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        lo = std::min(lo, g - 1);
        const std::size_t hi = std::min(lo + 1, g - 1);
        taps[y] = {lo, hi, hi == lo ? 0.0 : src - static_cast<double>(lo)};
    }
    auto m = std::make_shared<SparseMap>();
    m->in_shape = {1, g, g};
    m->out_shape = {1, n, n};
    m->row_begin.push_back(0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const auto& ty = taps[y];
            const auto& tx = taps[x];
            const std::array<std::pair<std::size_t, double>, 2> ys{{{ty.lo, 1.0 - ty.w_hi}, {ty.hi, ty.w_hi}}};
            const std::array<std::pair<std::size_t, double>, 2> xs{{{tx.lo, 1.0 - tx.w_hi}, {tx.hi, tx.w_hi}}};
            for (const auto& [yy, wy] : ys)
                for (const auto& [xx, wx] : xs) {
                    if (wy * wx == 0.0) continue;
                    m->cols.push_back(yy * g + xx);
                    m->weights.push_back(wy * wx);
                }
            m->row_begin.push_back(m->cols.size());
        }
    return m;
}

// Area-average pooling of a [1,g,g] map to a [(g/f)^2, 1] column.
inline SparseMapPtr area_pool_map(std::size_t g, std::size_t f) {
    const std::size_t go = g / f;
    auto m = std::make_shared<SparseMap>();
    m->in_shape = {1, g, g};
    m->out_shape = {go * go, 1};
    m->row_begin.push_back(0);
    const double w = 1.0 / static_cast<double>(f * f);
    for (std::size_t r = 0; r < go; ++r)
        for (std::size_t c = 0; c < go; ++c) {
            for (std::size_t dy = 0; dy < f; ++dy)
                for (std::size_t dx = 0; dx < f; ++dx) {
                    m->cols.push_back((r * f + dy) * g + c * f + dx);
                    m->weights.push_back(w);
                }
            m->row_begin.push_back(m->cols.size());
        }
    return m;
}

} // namespace detail

/// Hierarchical patch-transformer segmenter with click-biased attention.
///
/// Parameters are leaves that require grad; copies of a Model share them. Use
/// clone() for an independent copy. Forward passes only read parameters, so one
/// Model can serve several threads as long as none of them records a tape.
class Model {
public:
    Model() : Model(ModelConfig{}, 0) {}

    Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        const std::size_t p = config_.patch_size;
        pos_embed_ = init_uniform({config_.patches(0), config_.stage_dims[0]},
                                  1.0 / std::sqrt(static_cast<double>(config_.stage_dims[0])), rng);
        for (std::size_t i = 0; i < kStages; ++i) {
            const std::size_t dim = config_.stage_dims[i];
            Stage& st = stages_[i];
            const std::size_t in = i == 0 ? kInputChannels * p * p : 4 * config_.stage_dims[i - 1];
            st.embed = Linear(in, dim, rng);
            st.embed_norm = Norm(dim);
            for (std::size_t l = 0; l < config_.layers[i]; ++l) {
                Block b;
                b.norm1 = Norm(dim);
                b.attn.query = Linear(dim, dim, rng);
                b.attn.key = Linear(dim, dim, rng);
                b.attn.value = Linear(dim, dim, rng);
                b.attn.proj = Linear(dim, dim, rng);
                const std::size_t r = config_.reduction[i];
                if (r > 1) {
                    b.attn.reduce = Linear(r * r * dim, dim, rng);
                    b.attn.reduce_norm = Norm(dim);
                }
                b.norm2 = Norm(dim);
                b.fc1 = Linear(dim, dim * config_.mlp_ratio, rng);
                b.fc2 = Linear(dim * config_.mlp_ratio, dim, rng);
                st.blocks.push_back(std::move(b));
            }
            st.norm = Norm(dim);
            st.mapping = MappingHead(dim, config_.mapping_dim, rng);
        }
        for (std::size_t i = 0; i < kStages; ++i)
            decoder_.proj[i] = Linear(config_.stage_dims[i], config_.decoder_dim, rng);
        decoder_.fuse = Linear(kStages * config_.decoder_dim, config_.decoder_dim, rng);
        decoder_.head = Linear(config_.decoder_dim, config_.n_cls, rng);
        build_maps();
    }

    const ModelConfig& config() const { return config_; }
    const Tensor& pos_embed() const { return pos_embed_; }
    const Stage& stage(std::size_t i) const { return stages_.at(i); }
    const Decoder& decoder() const { return decoder_; }

    /// Every parameter with its stable name. The order is part of the checkpoint format.
    NamedParameters parameters() const {
        NamedParameters out;
        out.emplace_back("pos_embed", pos_embed_);
        for (std::size_t i = 0; i < kStages; ++i) {
            const std::string s = "stage" + std::to_string(i + 1);
            const Stage& st = stages_[i];
            st.embed.collect(s + ".embed", out);
            st.embed_norm.collect(s + ".embed_norm", out);
            for (std::size_t l = 0; l < st.blocks.size(); ++l) {
                const std::string b = s + ".block" + std::to_string(l + 1);
                const Block& blk = st.blocks[l];
                blk.norm1.collect(b + ".norm1", out);
                blk.attn.query.collect(b + ".attn.query", out);
                blk.attn.key.collect(b + ".attn.key", out);
                blk.attn.value.collect(b + ".attn.value", out);
                blk.attn.proj.collect(b + ".attn.proj", out);
                if (blk.attn.reduce) {
                    blk.attn.reduce->collect(b + ".attn.reduce", out);
                    blk.attn.reduce_norm.collect(b + ".attn.reduce_norm", out);
                }
                blk.norm2.collect(b + ".norm2", out);
                blk.fc1.collect(b + ".mlp.fc1", out);
                blk.fc2.collect(b + ".mlp.fc2", out);
            }
            st.norm.collect(s + ".norm", out);
            st.mapping.collect(s + ".mapping", out);
        }
        for (std::size_t i = 0; i < kStages; ++i) decoder_.proj[i].collect("decoder.proj" + std::to_string(i + 1), out);
        decoder_.fuse.collect("decoder.fuse", out);
        decoder_.head.collect("decoder.head", out);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : parameters()) n += t.numel();
        return n;
    }

    /// Deep copy with independent parameter storage.
    Model clone() const {
        Model copy(*this);
        copy.pos_embed_ = fresh(pos_embed_);
        for (auto& st : copy.stages_) {
            relink(st.embed);
            relink(st.embed_norm);
            for (auto& b : st.blocks) {
                relink(b.norm1);
                relink(b.attn.query);
                relink(b.attn.key);
                relink(b.attn.value);
                relink(b.attn.proj);
                if (b.attn.reduce) relink(*b.attn.reduce);
                relink(b.attn.reduce_norm);
                relink(b.norm2);
                relink(b.fc1);
                relink(b.fc2);
            }
            relink(st.norm);
            relink(st.mapping.fc1);
            relink(st.mapping.fc2);
        }
        for (auto& p : copy.decoder_.proj) relink(p);
        relink(copy.decoder_.fuse);
        relink(copy.decoder_.head);
        return copy;
    }

    // Fixed index maps shared by every forward pass.
    const SparseMapPtr& patchify() const { return patchify_; }
    const SparseMapPtr& merge(std::size_t stage) const { return merge_.at(stage); }
    const SparseMapPtr& reduce(std::size_t stage) const { return reduce_.at(stage); }
    const SparseMapPtr& upsample(std::size_t stage) const { return upsample_.at(stage); }
    const SparseMapPtr& bilinear() const { return bilinear_; }
    const SparseMapPtr& pool(std::size_t stage) const { return pool_.at(stage); }

private:
    static Tensor fresh(const Tensor& t) {
        Tensor copy(t.shape(), t.values(), true);
        return copy;
    }
    static void relink(Linear& l) {
        l.weight = fresh(l.weight);
        l.bias = fresh(l.bias);
    }
    static void relink(Norm& n) {
        if (n.gamma.numel() == 0) return;
        n.gamma = fresh(n.gamma);
        n.beta = fresh(n.beta);
    }

    void build_maps() {
        const std::size_t g1 = config_.grid(0);
        patchify_ = detail::patchify_map(kInputChannels, config_.input_size, config_.patch_size);
        for (std::size_t i = 0; i < kStages; ++i) {
            if (i > 0) merge_[i] = detail::merge_map(config_.grid(i - 1), config_.stage_dims[i - 1], 2);
            const std::size_t r = config_.reduction[i];
            if (r > 1) reduce_[i] = detail::merge_map(config_.grid(i), config_.stage_dims[i], r);
            upsample_[i] = detail::upsample_nearest_map(config_.grid(i), g1, config_.decoder_dim);
            pool_[i] = detail::area_pool_map(g1, std::size_t{1} << i);
        }
        bilinear_ = detail::upsample_bilinear_map(g1, config_.patch_size);
    }

    ModelConfig config_;
    Tensor pos_embed_;
    std::array<Stage, kStages> stages_;
    Decoder decoder_;

    SparseMapPtr patchify_;
    std::array<SparseMapPtr, kStages> merge_{};
    std::array<SparseMapPtr, kStages> reduce_{};
    std::array<SparseMapPtr, kStages> upsample_{};
    std::array<SparseMapPtr, kStages> pool_{};
    SparseMapPtr bilinear_;
};

// ---------------------------------------------------------------------------
// Forward pipeline

/// Stacks [image(3), positive map, negative map, previous mask] into a [6,H,W] input.
inline Tensor assemble_input(const Tensor& image, const Tensor& click_maps, const Tensor& prev_mask) {
    detail::require_rank(image, 3, "assemble_input");
    detail::require_rank(click_maps, 3, "assemble_input");
    detail::require_rank(prev_mask, 3, "assemble_input");
    if (image.dim(0) != 3 || click_maps.dim(0) != 2 || prev_mask.dim(0) != 1) {
        throw ShapeError("assemble_input: expected 3 image, 2 click and 1 mask channel");
    }
    const std::size_t h = image.dim(1), w = image.dim(2);
    if (click_maps.dim(1) != h || click_maps.dim(2) != w || prev_mask.dim(1) != h || prev_mask.dim(2) != w) {
        throw ShapeError("assemble_input: spatial sizes differ");
    }
    for (double v : image.data())
        if (v < 0.0 || v > 1.0) throw DomainError("assemble_input: image values must lie in [0,1]");
    for (double v : click_maps.data())
        if (v != 0.0 && v != 1.0) throw DomainError("assemble_input: click maps must be binary");
    for (double v : prev_mask.data())
        if (v < 0.0 || v > 1.0) throw DomainError("assemble_input: previous mask must lie in [0,1]");
    std::vector<double> out;
    out.reserve(kInputChannels * h * w);
    out.insert(out.end(), image.data().begin(), image.data().end());
    out.insert(out.end(), click_maps.data().begin(), click_maps.data().end());
    out.insert(out.end(), prev_mask.data().begin(), prev_mask.data().end());
    return Tensor({kInputChannels, h, w}, std::move(out));
}

/// Stage-1 patch features: flatten each patch, project, add position embedding, normalize.
inline Tensor patch_embed(const Model& model, const Tensor& x6) {
    const auto& cfg = model.config();
    if (x6.rank() != 3 || x6.dim(0) != kInputChannels) throw ShapeError("patch_embed: expected [6,H,W] input");
    if (x6.dim(1) % cfg.patch_size != 0 || x6.dim(2) % cfg.patch_size != 0) {
        throw ShapeError("patch_embed: input size not divisible by patch size");
    }
    if (x6.dim(1) != cfg.input_size || x6.dim(2) != cfg.input_size) {
        throw ShapeError("patch_embed: model expects " + std::to_string(cfg.input_size) + "x" +
                         std::to_string(cfg.input_size) + " input");
    }
    const Stage& st = model.stage(0);
    return st.embed_norm(add(st.embed(apply_map(model.patchify(), x6)), model.pos_embed()));
}

/// Multi-head attention with optional spatial reduction and optional click bias.
///
/// Per head: logits = Q K^T / sqrt(d); with a bias s, row j of the logits is
/// scaled by s_j; weights = softmax over keys; output = concat(weights V) then
/// projected.
inline std::pair<Tensor, std::vector<AttentionRecord>>
sra_attention(const Tensor& features, const AttentionWeights& w, std::size_t heads, const SimilarityField* bias,
              const SparseMapPtr& reduce = nullptr, std::size_t stage = 0, std::size_t layer = 0) {
    detail::require_rank(features, 2, "sra_attention");
    const std::size_t n = features.dim(0), dim = features.dim(1);
    if (heads == 0 || dim % heads != 0) throw ShapeError("sra_attention: width not divisible by head count");
    if (bias != nullptr) {
        if (bias->values.shape() != Shape{n, 1}) throw ShapeError("sra_attention: bias must be [L,1]");
        for (double v : bias->values.data())
            if (v < 0.0 || v > 1.0) throw DomainError("sra_attention: bias outside [0,1]");
    }
    Tensor kv_source = features;
    if (w.reduce) kv_source = w.reduce_norm((*w.reduce)(apply_map(reduce, features)));
    const Tensor q = w.query(features);
    const Tensor k = w.key(kv_source);
    const Tensor v = w.value(kv_source);
    const std::size_t hd = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> outs;
    std::vector<AttentionRecord> records;
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
        const Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
        const Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
        const Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
        const Tensor biased = bias ? mul(logits, bias->values) : logits;
        const Tensor weights = softmax(biased, 1);
        records.push_back(AttentionRecord{stage, layer, h, logits, weights});
        outs.push_back(matmul(weights, vh));
    }
    const Tensor merged = heads == 1 ? outs.front() : concat_cols(outs);
    return {w.proj(merged), std::move(records)};
}

/// Runs the four stages. With click attention on, each stage computes one similarity
/// field from its input features and biases every attention layer in the stage with it.
inline EncoderOutput encoder_forward(const Model& model, const Tensor& x6, const ClickSet& clicks,
                                     bool use_click_attention) {
    const auto& cfg = model.config();
    EncoderOutput out;
    Tensor x = patch_embed(model, x6);
    for (std::size_t i = 0; i < kStages; ++i) {
        const Stage& st = model.stage(i);
        if (i > 0) x = st.embed_norm(st.embed(apply_map(model.merge(i), out.features[i - 1])));
        const SimilarityField* bias = nullptr;
        if (use_click_attention) {
            out.similarity[i] = compute_similarity(x, positive_patches(clicks, i, cfg), st.mapping, i);
            bias = &*out.similarity[i];
        }
        for (std::size_t l = 0; l < st.blocks.size(); ++l) {
            const Block& b = st.blocks[l];
            auto [attended, records] = sra_attention(b.norm1(x), b.attn, cfg.heads[i], bias, model.reduce(i), i, l);
            x = add(x, attended);
            x = add(x, b.fc2(gelu(b.fc1(b.norm2(x)))));
            for (auto& r : records) out.attention[i].push_back(std::move(r));
        }
        out.features[i] = st.norm(x);
    }
    return out;
}

/// Logits x_P of shape [1, H/p, W/p]: per-stage projection, nearest upsampling to the
/// stage-1 grid, concatenation, fusion and a 1-channel head.
inline Tensor mlp_decode(const Model& model, const StageFeatures& features) {
    const auto& cfg = model.config();
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < kStages; ++i) {
        if (features[i].rank() != 2 || features[i].dim(0) != cfg.patches(i)) {
            throw ShapeError("mlp_decode: stage " + std::to_string(i + 1) + " features missing or malformed");
        }
        parts.push_back(apply_map(model.upsample(i), model.decoder().proj[i](features[i])));
    }
    const Tensor fused = gelu(model.decoder().fuse(concat_cols(parts)));
    const std::size_t g = cfg.grid(0);
    return reshape(model.decoder().head(fused), {1, g, g});
}

struct Prediction {
    Tensor probability; // x_m, [1,H,W]
    Mask mask;          // probability > 0.5
};

/// Sigmoid, bilinear upsampling to full resolution, and a 0.5 threshold (ties are background).
inline Prediction predict_mask(const Model& model, const Tensor& logits) {
    Tensor prob = apply_map(model.bilinear(), sigmoid(logits));
    const std::size_t n = model.config().input_size;
    Mask mask(n, n);
    for (std::size_t i = 0; i < prob.numel(); ++i) mask.set(i / n, i % n, prob[i] > 0.5);
    return {std::move(prob), std::move(mask)};
}

/// Everything one interactive step produces.
struct ForwardResult {
    EncoderOutput encoder;
    Tensor logits;
    Prediction prediction;
};

inline ForwardResult forward(const Model& model, const Tensor& image, const ClickSet& clicks, const Tensor& prev_mask,
                             bool use_click_attention) {
    const auto& cfg = model.config();
    const Tensor maps = render_click_maps(clicks, cfg.input_size, cfg.input_size, cfg.click_radius);
    const Tensor x6 = assemble_input(image, maps, prev_mask);
    ForwardResult result;
    result.encoder = encoder_forward(model, x6, clicks, use_click_attention);
    result.logits = mlp_decode(model, result.encoder.features);
    result.prediction = predict_mask(model, result.logits);
    return result;
}

} // namespace clickseg

#endif // CLICKSEG_ENCODER_HPP
