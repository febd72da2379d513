#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "clickseg/encoder.hpp"
#include "toy.hpp"

using namespace clickseg;

namespace {

Tensor random_image(std::size_t n, Rng& rng) {
    std::vector<double> v(3 * n * n);
    for (auto& x : v) x = rng.uniform();
    return Tensor({3, n, n}, std::move(v));
}

Tensor random_prob(std::size_t n, Rng& rng) {
    std::vector<double> v(n * n);
    for (auto& x : v) x = rng.uniform();
    return Tensor({1, n, n}, std::move(v));
}

ClickSet random_clicks(std::size_t n, std::size_t count, Rng& rng) {
    ClickSet out;
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(Click{rng.uniform_index(n), rng.uniform_index(n),
                            rng.bernoulli(0.6) ? Polarity::positive : Polarity::negative, i});
    return out;
}

Linear identity_linear(std::size_t n) {
    std::vector<double> eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    Linear l;
    l.weight = Tensor({n, n}, eye, true);
    l.bias = Tensor::zeros({1, n}, true);
    return l;
}

void zero(Tensor t) {
    for (auto& v : t.mutable_data()) v = 0.0;
}

void expect_rows_stochastic(const Tensor& a, double tol) {
    for (std::size_t r = 0; r < a.dim(0); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.dim(1); ++c) {
            EXPECT_GE(a.at(r, c), 0.0);
            s += a.at(r, c);
        }
        EXPECT_NEAR(s, 1.0, tol);
    }
}

} // namespace

TEST(Encoder, StageShapes) {
    Model model(ModelConfig{}, 1);
    Rng rng(2);
    auto out = forward(model, random_image(64, rng), random_clicks(64, 3, rng), Tensor::zeros({1, 64, 64}), true);
    const std::array<std::size_t, kStages> expect{256, 64, 16, 4};
    for (std::size_t i = 0; i < kStages; ++i) {
        EXPECT_EQ(out.encoder.features[i].dim(0), expect[i]);
        EXPECT_EQ(out.encoder.features[i].dim(1), model.config().stage_dims[i]);
        EXPECT_TRUE(out.encoder.similarity[i].has_value());
        EXPECT_EQ(out.encoder.attention[i].size(), model.config().layers[i] * model.config().heads[i]);
    }
    EXPECT_EQ(out.logits.shape(), (Shape{1, 16, 16}));
    EXPECT_EQ(out.prediction.probability.shape(), (Shape{1, 64, 64}));
}

TEST(Encoder, ConfigValidation) {
    ModelConfig c;
    c.input_size = 60;
    EXPECT_THROW(Model(c, 0), DomainError);
    c = ModelConfig{};
    c.heads[1] = 5;
    EXPECT_THROW(Model(c, 0), DomainError);
    c = ModelConfig{};
    c.n_cls = 2;
    EXPECT_THROW(Model(c, 0), DomainError);
}

TEST(AssembleInput, ChannelOrderAndRoundTrip) {
    Rng rng(3);
    const Tensor img = random_image(16, rng);
    const Tensor maps = render_click_maps({Click{4, 5, Polarity::positive, 0}}, 16, 16, 2);
    const Tensor prev = random_prob(16, rng);
    const Tensor x = assemble_input(img, maps, prev);
    ASSERT_EQ(x.shape(), (Shape{6, 16, 16}));
    const std::size_t plane = 256;
    for (std::size_t i = 0; i < 3 * plane; ++i) EXPECT_EQ(x[i], img[i]);
    double pos = 0, neg = 0;
    for (std::size_t i = 0; i < plane; ++i) {
        pos += x[3 * plane + i];
        neg += x[4 * plane + i];
        EXPECT_EQ(x[5 * plane + i], prev[i]);
    }
    EXPECT_EQ(pos, 13.0);
    EXPECT_EQ(neg, 0.0);
}

TEST(AssembleInput, NoClicksNoPrior) {
    Rng rng(4);
    const Tensor x = assemble_input(random_image(8, rng), Tensor::zeros({2, 8, 8}), Tensor::zeros({1, 8, 8}));
    for (std::size_t i = 3 * 64; i < 6 * 64; ++i) EXPECT_EQ(x[i], 0.0);
}

TEST(AssembleInput, RejectsBadInputs) {
    Rng rng(5);
    const Tensor img = random_image(8, rng);
    Tensor maps = Tensor::full({2, 8, 8}, 0.5);
    EXPECT_THROW(assemble_input(img, maps, Tensor::zeros({1, 8, 8})), DomainError);
    EXPECT_THROW(assemble_input(img, Tensor::zeros({2, 8, 4}), Tensor::zeros({1, 8, 8})), ShapeError);
    EXPECT_THROW(assemble_input(Tensor::full({3, 8, 8}, 1.5), Tensor::zeros({2, 8, 8}), Tensor::zeros({1, 8, 8})),
                 DomainError);
}

TEST(PatchEmbed, ZeroInputZeroBiasGivesZeroFeatures) {
    Model model(ModelConfig{}, 6);
    zero(model.stage(0).embed.bias);
    zero(model.pos_embed());
    const Tensor f = patch_embed(model, Tensor::zeros({6, 64, 64}));
    EXPECT_EQ(f.shape(), (Shape{256, 16}));
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, PermutingPatchesPermutesRows) {
    Model model(ModelConfig{}, 7);
    zero(model.pos_embed());
    Rng rng(8);
    std::vector<double> v(6 * 64 * 64);
    for (auto& x : v) x = rng.uniform();
    std::vector<double> swapped = v;
    // Swap patch (1,2) with patch (10,7).
    const std::size_t ar = 1, ac = 2, br = 10, bc = 7;
    for (std::size_t ch = 0; ch < 6; ++ch)
        for (std::size_t dy = 0; dy < 4; ++dy)
            for (std::size_t dx = 0; dx < 4; ++dx) {
                const std::size_t ia = (ch * 64 + ar * 4 + dy) * 64 + ac * 4 + dx;
                const std::size_t ib = (ch * 64 + br * 4 + dy) * 64 + bc * 4 + dx;
                std::swap(swapped[ia], swapped[ib]);
            }
    const Tensor f = patch_embed(model, Tensor({6, 64, 64}, v));
    const Tensor g = patch_embed(model, Tensor({6, 64, 64}, swapped));
    const std::size_t pa = ar * 16 + ac, pb = br * 16 + bc;
    for (std::size_t r = 0; r < 256; ++r) {
        const std::size_t src = r == pa ? pb : (r == pb ? pa : r);
        for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(g.at(r, c), f.at(src, c));
    }
}

TEST(PatchEmbed, RejectsWrongSize) {
    Model model(ModelConfig{}, 9);
    EXPECT_THROW(patch_embed(model, Tensor::zeros({6, 62, 62})), ShapeError);
    EXPECT_THROW(patch_embed(model, Tensor::zeros({6, 32, 32})), ShapeError);
    EXPECT_THROW(patch_embed(model, Tensor::zeros({5, 64, 64})), ShapeError);
}

TEST(Attention, SingletonSequenceIsOne) {
    Rng rng(10);
    AttentionWeights w{Linear(4, 4, rng), Linear(4, 4, rng), Linear(4, 4, rng), Linear(4, 4, rng), {}, {}};
    const Tensor f({1, 4}, {0.3, -2.0, 5.0, 1.0});
    auto [out, recs] = sra_attention(f, w, 2, nullptr);
    ASSERT_EQ(recs.size(), 2u);
    for (const auto& r : recs) EXPECT_EQ(r.post_softmax.values(), std::vector<double>{1.0});
}

TEST(Attention, HandComputedFourPatch) {
    // Q = K = V = features (identity projections), single head, d = 2.
    AttentionWeights w{identity_linear(2), identity_linear(2), identity_linear(2), identity_linear(2), {}, {}};
    const std::vector<double> f{1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5};
    auto [out, recs] = sra_attention(Tensor({4, 2}, f), w, 1, nullptr);
    const double inv = 1.0 / std::sqrt(2.0);
    for (std::size_t j = 0; j < 4; ++j) {
        double logits[4], mx = -1e300, z = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            logits[k] = (f[j * 2] * f[k * 2] + f[j * 2 + 1] * f[k * 2 + 1]) * inv;
            mx = std::max(mx, logits[k]);
        }
        for (double& l : logits) z += std::exp(l - mx);
        double o0 = 0.0, o1 = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            const double a = std::exp(logits[k] - mx) / z;
            EXPECT_NEAR(recs[0].post_softmax.at(j, k), a, 1e-14);
            EXPECT_NEAR(recs[0].pre_softmax.at(j, k), logits[k], 1e-14);
            o0 += a * f[k * 2];
            o1 += a * f[k * 2 + 1];
        }
        EXPECT_NEAR(out.at(j, 0), o0, 1e-14);
        EXPECT_NEAR(out.at(j, 1), o1, 1e-14);
    }
}

TEST(Attention, BiasScalesQueryRows) {
    AttentionWeights w{identity_linear(2), identity_linear(2), identity_linear(2), identity_linear(2), {}, {}};
    const Tensor f({3, 2}, {1.0, 2.0, -1.0, 0.5, 0.3, 0.3});
    SimilarityField s{0, Tensor({3, 1}, {1.0, 0.0, 0.5}), false};
    auto [out, recs] = sra_attention(f, w, 1, &s);
    auto [plain, precs] = sra_attention(f, w, 1, nullptr);
    // Row with s = 0 becomes uniform.
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(recs[0].post_softmax.at(1, k), 1.0 / 3.0, 1e-15);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(recs[0].post_softmax.at(0, k), precs[0].post_softmax.at(0, k));
    EXPECT_EQ(recs[0].pre_softmax.values(), precs[0].pre_softmax.values());
}

TEST(Attention, AllOnesBiasIsNeutral) {
    Rng rng(11);
    AttentionWeights w{Linear(8, 8, rng), Linear(8, 8, rng), Linear(8, 8, rng), Linear(8, 8, rng), {}, {}};
    std::vector<double> v(16 * 8);
    for (auto& x : v) x = rng.uniform(-2, 2);
    const Tensor f({16, 8}, v);
    SimilarityField ones{0, Tensor::full({16, 1}, 1.0), false};
    auto [a, ra] = sra_attention(f, w, 2, &ones);
    auto [b, rb] = sra_attention(f, w, 2, nullptr);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Attention, RejectsBadBias) {
    Rng rng(12);
    AttentionWeights w{Linear(4, 4, rng), Linear(4, 4, rng), Linear(4, 4, rng), Linear(4, 4, rng), {}, {}};
    const Tensor f = Tensor::full({3, 4}, 0.1);
    SimilarityField wrong{0, Tensor::full({2, 1}, 1.0), false};
    EXPECT_THROW(sra_attention(f, w, 1, &wrong), ShapeError);
    SimilarityField high{0, Tensor::full({3, 1}, 1.5), false};
    EXPECT_THROW(sra_attention(f, w, 1, &high), DomainError);
    EXPECT_THROW(sra_attention(f, w, 3, nullptr), ShapeError);
}

TEST(Encoder, NoPositiveClicksMatchesUnbiased) {
    Model model(ModelConfig{}, 13);
    Rng rng(14);
    const Tensor img = random_image(64, rng);
    ClickSet negatives{{5, 5, Polarity::negative, 0}, {40, 12, Polarity::negative, 1}};
    auto on = forward(model, img, negatives, Tensor::zeros({1, 64, 64}), true);
    auto off = forward(model, img, negatives, Tensor::zeros({1, 64, 64}), false);
    EXPECT_EQ(on.logits.values(), off.logits.values());
    for (std::size_t i = 0; i < kStages; ++i) {
        EXPECT_TRUE(on.encoder.similarity[i]->neutral);
        EXPECT_FALSE(off.encoder.similarity[i].has_value());
    }
}

TEST(Encoder, AttentionRowsStochasticWithAndWithoutBias) {
    Model model(ModelConfig{}, 15);
    Rng rng(16);
    for (int t = 0; t < 5; ++t) {
        const Tensor img = random_image(64, rng);
        const ClickSet clicks = random_clicks(64, 1 + rng.uniform_index(5), rng);
        for (bool ca : {false, true}) {
            auto out = forward(model, img, clicks, random_prob(64, rng), ca);
            for (const auto& stage : out.encoder.attention)
                for (const auto& rec : stage) expect_rows_stochastic(rec.post_softmax, 1e-9);
        }
    }
}

TEST(Encoder, Deterministic) {
    Model a(ModelConfig{}, 17), b(ModelConfig{}, 17);
    Rng rng(18);
    const Tensor img = random_image(64, rng);
    const ClickSet clicks = random_clicks(64, 3, rng);
    auto x = forward(a, img, clicks, Tensor::zeros({1, 64, 64}), true);
    auto y = forward(b, img, clicks, Tensor::zeros({1, 64, 64}), true);
    EXPECT_EQ(x.logits.values(), y.logits.values());
    EXPECT_EQ(x.prediction.mask, y.prediction.mask);
}

TEST(Encoder, SpatialReductionShapes) {
    ModelConfig c;
    c.reduction = {4, 2, 2, 1};
    Model model(c, 19);
    Rng rng(20);
    auto out = forward(model, random_image(64, rng), random_clicks(64, 2, rng), Tensor::zeros({1, 64, 64}), true);
    EXPECT_EQ(out.encoder.attention[0][0].post_softmax.shape(), (Shape{256, 16}));
    EXPECT_EQ(out.encoder.attention[1][0].post_softmax.shape(), (Shape{64, 16}));
    EXPECT_EQ(out.encoder.attention[3][0].post_softmax.shape(), (Shape{4, 4}));
    for (const auto& stage : out.encoder.attention)
        for (const auto& rec : stage) expect_rows_stochastic(rec.post_softmax, 1e-9);
}

TEST(Decoder, ZeroFeaturesZeroBiasGiveZeroLogits) {
    Model model(ModelConfig{}, 21);
    for (const auto& l : model.decoder().proj) zero(l.bias);
    zero(model.decoder().fuse.bias);
    zero(model.decoder().head.bias);
    StageFeatures feats;
    for (std::size_t i = 0; i < kStages; ++i)
        feats[i] = Tensor::zeros({model.config().patches(i), model.config().stage_dims[i]});
    const Tensor logits = mlp_decode(model, feats);
    EXPECT_EQ(logits.shape(), (Shape{1, 16, 16}));
    for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, MissingStageThrows) {
    Model model(ModelConfig{}, 22);
    StageFeatures feats;
    for (std::size_t i = 0; i < 3; ++i)
        feats[i] = Tensor::zeros({model.config().patches(i), model.config().stage_dims[i]});
    EXPECT_THROW(mlp_decode(model, feats), ShapeError);
}

TEST(Decoder, UpsamplingPreservesConstants) {
    Model model(ModelConfig{}, 23);
    for (std::size_t i = 0; i < kStages; ++i) {
        const Tensor c = Tensor::full({model.config().patches(i), 32}, 0.37);
        const Tensor up = apply_map(model.upsample(i), c);
        for (double v : up.data()) EXPECT_EQ(v, 0.37);
    }
    const Tensor smooth = apply_map(model.bilinear(), Tensor::full({1, 16, 16}, -1.25));
    for (double v : smooth.data()) EXPECT_NEAR(v, -1.25, 1e-15);
}

TEST(PredictMask, ThresholdTiesAreBackground) {
    Model model(ModelConfig{}, 24);
    auto half = predict_mask(model, Tensor::zeros({1, 16, 16}));
    for (double v : half.probability.data()) EXPECT_EQ(v, 0.5);
    EXPECT_TRUE(half.mask.empty());
    auto full = predict_mask(model, Tensor::full({1, 16, 16}, 10.0));
    EXPECT_EQ(full.mask.count(), 64u * 64u);
    Rng rng(25);
    std::vector<double> v(256);
    for (auto& x : v) x = rng.uniform(-5, 5);
    auto p = predict_mask(model, Tensor({1, 16, 16}, v));
    for (double x : p.probability.data()) {
        EXPECT_GT(x, 0.0);
        EXPECT_LT(x, 1.0);
        EXPECT_NEAR(x + (1.0 - x), 1.0, 1e-12);
    }
}

TEST(Model, CloneIsIndependent) {
    Model a(toy::tiny_config(), 26);
    Model b = a.clone();
    auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].first, pb[i].first);
        EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
        EXPECT_FALSE(pa[i].second.same_node(pb[i].second));
    }
    pb[0].second.mutable_data()[0] += 1.0;
    EXPECT_NE(pa[0].second[0], pb[0].second[0]);
}

TEST(Model, ParameterNamesUnique) {
    Model m(ModelConfig{}, 27);
    std::set<std::string> names;
    for (const auto& [n, t] : m.parameters()) EXPECT_TRUE(names.insert(n).second) << n;
    EXPECT_GT(m.parameter_count(), 1000u);
}

TEST(Gradient, SegmentationLossOnTinyModel) {
    const ModelConfig cfg = toy::tiny_config();
    Model model(cfg, 28);
    Rng rng(29);
    const Tensor img = random_image(8, rng);
    const Tensor prev = random_prob(8, rng);
    const ClickSet clicks{{2, 3, Polarity::positive, 0}, {6, 6, Polarity::negative, 1}, {3, 3, Polarity::positive, 2}};
    std::vector<double> y(64);
    for (std::size_t i = 0; i < 64; ++i) y[i] = (i / 8 >= 1 && i / 8 <= 4 && i % 8 >= 2 && i % 8 <= 5) ? 1.0 : 0.0;
    const Tensor target({1, 8, 8}, y);
    std::vector<Tensor> leaves;
    for (auto& [n, t] : model.parameters()) leaves.push_back(t);
    auto loss = [&] { return bce(forward(model, img, clicks, prev, true).prediction.probability, target); };
    EXPECT_LT(grad_check(loss, leaves), 1e-4);
}
