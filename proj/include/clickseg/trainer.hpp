#ifndef CLICKSEG_TRAINER_HPP
#define CLICKSEG_TRAINER_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "clickseg/affinity.hpp"
#include "clickseg/click_attention.hpp"
#include "clickseg/dataset.hpp"
#include "clickseg/encoder.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/interaction.hpp"

namespace clickseg {

struct TrainConfig {
    ModelConfig model;
    std::size_t epochs = 30;
    std::size_t samples_per_epoch = 200;
    double lr = 1e-3;
    std::vector<std::size_t> lr_decay_epochs; // empty: 80% and 95% of epochs
    double lr_decay_factor = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double lambda_click = 1.0;
    double lambda_aff = 1.0;
    bool click_attention = true;
    std::uint64_t seed = 1;          // weights, click simulation, augmentation
    std::uint64_t data_seed = 1;     // training shapes; held-out shapes use other seeds
    std::size_t train_pool = 1000;   // distinct training shapes
    std::size_t distractors = 2;     // max distractor shapes per image
    bool augment = true;
    std::size_t max_clicks = 24;
    double continue_probability = 0.8;

    /// Epochs (0-based) at whose start the learning rate is multiplied by lr_decay_factor.
    std::vector<std::size_t> decay_epochs() const {
        if (!lr_decay_epochs.empty()) return lr_decay_epochs;
        return {static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(epochs))),
                static_cast<std::size_t>(std::llround(0.95 * static_cast<double>(epochs)))};
    }

    double lr_at(std::size_t epoch) const {
        double v = lr;
        for (auto e : decay_epochs())
            if (epoch >= e) v *= lr_decay_factor;
        return v;
    }

    void validate() const {
        model.validate();
        if (!(lr > 0.0)) throw DomainError("TrainConfig: lr must be positive");
        if (lambda_click < 0.0 || lambda_aff < 0.0) throw DomainError("TrainConfig: loss weights must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw DomainError("TrainConfig: betas in [0,1)");
        if (!(eps > 0.0)) throw DomainError("TrainConfig: eps must be positive");
        if (weight_decay < 0.0) throw DomainError("TrainConfig: weight_decay must be >= 0");
        if (train_pool == 0) throw DomainError("TrainConfig: train_pool must be positive");
        if (max_clicks == 0) throw DomainError("TrainConfig: max_clicks must be positive");
        if (continue_probability < 0.0 || continue_probability > 1.0) {
            throw DomainError("TrainConfig: continue_probability outside [0,1]");
        }
        if ((lambda_click > 0.0 || lambda_aff > 0.0) && !click_attention) {
            throw DomainError("TrainConfig: click and affinity losses need click_attention = true");
        }
    }
};

// ---------------------------------------------------------------------------
// Config file: `key = value` lines, '#' starts a comment, lists are comma separated.

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw DomainError("config: " + key + " expects a non-negative integer, got '" + v + "'");
    }
    if (pos != v.size()) throw DomainError("config: " + key + " expects an integer, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw DomainError("config: " + key + " expects a number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(x)) throw DomainError("config: " + key + " expects a number, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw DomainError("config: " + key + " expects true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
    return out;
}

inline std::array<std::size_t, kStages> parse_stages(const std::string& key, const std::string& v) {
    const auto list = parse_list(key, v);
    if (list.size() != kStages) throw DomainError("config: " + key + " needs exactly 4 values");
    return {list[0], list[1], list[2], list[3]};
}

template <typename T>
std::string join(const T& values) {
    std::string out;
    for (const auto& v : values) out += (out.empty() ? "" : ",") + std::to_string(v);
    return out;
}

/// Shortest text that reads back to the same double.
inline std::string num(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

} // namespace detail

inline void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& v) {
    using namespace detail;
    static const std::map<std::string, std::function<void(TrainConfig&, const std::string&)>> setters = {
        {"input_size", [](TrainConfig& c, const std::string& v) { c.model.input_size = parse_size("input_size", v); }},
        {"patch_size", [](TrainConfig& c, const std::string& v) { c.model.patch_size = parse_size("patch_size", v); }},
        {"stage_dims", [](TrainConfig& c, const std::string& v) { c.model.stage_dims = parse_stages("stage_dims", v); }},
        {"heads", [](TrainConfig& c, const std::string& v) { c.model.heads = parse_stages("heads", v); }},
        {"layers", [](TrainConfig& c, const std::string& v) { c.model.layers = parse_stages("layers", v); }},
        {"reduction", [](TrainConfig& c, const std::string& v) { c.model.reduction = parse_stages("reduction", v); }},
        {"n_cls", [](TrainConfig& c, const std::string& v) { c.model.n_cls = parse_size("n_cls", v); }},
        {"mapping_dim", [](TrainConfig& c, const std::string& v) { c.model.mapping_dim = parse_size("mapping_dim", v); }},
        {"decoder_dim", [](TrainConfig& c, const std::string& v) { c.model.decoder_dim = parse_size("decoder_dim", v); }},
        {"mlp_ratio", [](TrainConfig& c, const std::string& v) { c.model.mlp_ratio = parse_size("mlp_ratio", v); }},
        {"click_radius", [](TrainConfig& c, const std::string& v) { c.model.click_radius = parse_size("click_radius", v); }},
        {"epochs", [](TrainConfig& c, const std::string& v) { c.epochs = parse_size("epochs", v); }},
        {"samples_per_epoch",
         [](TrainConfig& c, const std::string& v) { c.samples_per_epoch = parse_size("samples_per_epoch", v); }},
        {"lr", [](TrainConfig& c, const std::string& v) { c.lr = parse_double("lr", v); }},
        {"lr_decay_epochs",
         [](TrainConfig& c, const std::string& v) { c.lr_decay_epochs = parse_list("lr_decay_epochs", v); }},
        {"lr_decay_factor",
         [](TrainConfig& c, const std::string& v) { c.lr_decay_factor = parse_double("lr_decay_factor", v); }},
        {"beta1", [](TrainConfig& c, const std::string& v) { c.beta1 = parse_double("beta1", v); }},
        {"beta2", [](TrainConfig& c, const std::string& v) { c.beta2 = parse_double("beta2", v); }},
        {"eps", [](TrainConfig& c, const std::string& v) { c.eps = parse_double("eps", v); }},
        {"weight_decay", [](TrainConfig& c, const std::string& v) { c.weight_decay = parse_double("weight_decay", v); }},
        {"lambda_click", [](TrainConfig& c, const std::string& v) { c.lambda_click = parse_double("lambda_click", v); }},
        {"lambda_aff", [](TrainConfig& c, const std::string& v) { c.lambda_aff = parse_double("lambda_aff", v); }},
        {"click_attention",
         [](TrainConfig& c, const std::string& v) { c.click_attention = parse_bool("click_attention", v); }},
        {"seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_size("seed", v); }},
        {"data_seed", [](TrainConfig& c, const std::string& v) { c.data_seed = parse_size("data_seed", v); }},
        {"train_pool", [](TrainConfig& c, const std::string& v) { c.train_pool = parse_size("train_pool", v); }},
        {"distractors", [](TrainConfig& c, const std::string& v) { c.distractors = parse_size("distractors", v); }},
        {"augment", [](TrainConfig& c, const std::string& v) { c.augment = parse_bool("augment", v); }},
        {"max_clicks", [](TrainConfig& c, const std::string& v) { c.max_clicks = parse_size("max_clicks", v); }},
        {"continue_probability",
         [](TrainConfig& c, const std::string& v) { c.continue_probability = parse_double("continue_probability", v); }},
    };
    auto it = setters.find(key);
    if (it == setters.end()) throw DomainError("config: unknown key '" + key + "'");
    it->second(c, v);
}

inline TrainConfig parse_train_config(std::istream& in, const std::string& source = "config") {
    TrainConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DomainError(source + ":" + std::to_string(lineno) + ": expected key = value");
        }
        try {
            apply_config_entry(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const DomainError& e) {
            throw DomainError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    return parse_train_config(in, path);
}

/// Every key with its current value, in a form parse_train_config reads back.
inline std::string train_config_text(const TrainConfig& c) {
    using detail::join;
    using detail::num;
    std::ostringstream o;
    o << "# model\n"
      << "input_size = " << c.model.input_size << "\npatch_size = " << c.model.patch_size
      << "\nstage_dims = " << join(c.model.stage_dims) << "\nheads = " << join(c.model.heads)
      << "\nlayers = " << join(c.model.layers) << "\nreduction = " << join(c.model.reduction)
      << "\nn_cls = " << c.model.n_cls << "\nmapping_dim = " << c.model.mapping_dim
      << "\ndecoder_dim = " << c.model.decoder_dim << "\nmlp_ratio = " << c.model.mlp_ratio
      << "\nclick_radius = " << c.model.click_radius << "\n\n# training\n"
      << "epochs = " << c.epochs << "\nsamples_per_epoch = " << c.samples_per_epoch << "\nlr = " << num(c.lr)
      << "\nlr_decay_epochs = " << join(c.decay_epochs()) << "\nlr_decay_factor = " << num(c.lr_decay_factor)
      << "\nbeta1 = " << num(c.beta1) << "\nbeta2 = " << num(c.beta2) << "\neps = " << num(c.eps)
      << "\nweight_decay = " << num(c.weight_decay) << "\nlambda_click = " << num(c.lambda_click)
      << "\nlambda_aff = " << num(c.lambda_aff) << "\nclick_attention = " << (c.click_attention ? "true" : "false")
      << "\nseed = " << c.seed << "\n\n# data and click simulation\n"
      << "data_seed = " << c.data_seed << "\ntrain_pool = " << c.train_pool << "\ndistractors = " << c.distractors
      << "\naugment = " << (c.augment ? "true" : "false") << "\nmax_clicks = " << c.max_clicks
      << "\ncontinue_probability = " << num(c.continue_probability) << "\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW with bias-corrected moments and decoupled weight decay:
///   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2
///   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps) + lr * wd * p
/// Parameters without a gradient this step are left untouched.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
          double weight_decay = 0.0)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
        for (const auto& p : params_) {
            if (!p.is_leaf()) throw ContractError("AdamW: parameters must be leaves");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    std::size_t steps() const { return t_; }

    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad()) continue;
            const auto g = p.grad();
            if (g.size() != p.numel()) throw ShapeError("AdamW: gradient size mismatch");
            auto w = p.mutable_data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
                v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
                const double mhat = m[k] / c1, vhat = v[k] / c2;
                w[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[k]);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    double beta1_, beta2_, eps_, wd_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Losses

struct LossBreakdown {
    Tensor total;
    double seg = 0.0;
    double click = 0.0;
    double aff = 0.0;
};

/// Binary cross-entropy against the mask, taken on the logits upsampled to full
/// resolution so saturated predictions keep their gradient.
inline Tensor segmentation_loss(const Model& model, const Tensor& logits, const Mask& gt) {
    std::vector<double> y(gt.bits().begin(), gt.bits().end());
    const Tensor target({1, gt.height(), gt.width()}, std::move(y));
    return bce_with_logits(reshape(apply_map(model.bilinear(), logits), target.shape()), target);
}

/// L = L_seg + lambda_click L_click + lambda_aff L_aff for one forward pass.
/// `aff_targets`, when given, replaces the targets derived from this pass (they are
/// constants of the loss either way).
inline LossBreakdown total_loss(const Model& model, const ForwardResult& result, const Mask& gt, double lambda_click,
                                double lambda_aff, const std::vector<AffinityTarget>* aff_targets = nullptr) {
    LossBreakdown out;
    Tensor total = segmentation_loss(model, result.logits, gt);
    out.seg = total.item();
    if (lambda_click > 0.0) {
        const Tensor lc = click_loss(result.encoder.similarity, gt, model.config());
        out.click = lc.item();
        total = add(total, scale(lc, lambda_click));
    }
    if (lambda_aff > 0.0) {
        const auto terms = affinity_terms(model, result);
        const Tensor la = aff_targets ? affinity_loss(terms, *aff_targets) : affinity_loss(terms);
        out.aff = la.item();
        total = add(total, scale(la, lambda_aff));
    }
    out.total = total;
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
    std::size_t epoch = 0; // 1-based
    double lr = 0.0;
    double loss = 0.0;
    double seg = 0.0;
    double click = 0.0;
    double aff = 0.0;
    double iou = 0.0;       // IoU of the trained-on prediction, averaged over the epoch
    double clicks = 0.0;    // mean clicks per training step
};

inline std::string format_epoch(const EpochLog& e) {
    using detail::fixed;
    char lr[32];
    std::snprintf(lr, sizeof lr, "%.3e", e.lr);
    return "epoch=" + std::to_string(e.epoch) + " lr=" + lr + " loss=" + fixed(e.loss) + " seg=" + fixed(e.seg) +
           " click=" + fixed(e.click) + " aff=" + fixed(e.aff) + " iou=" + fixed(e.iou, 4) +
           " clicks=" + fixed(e.clicks, 3);
}

struct TrainResult {
    Model model;
    std::vector<EpochLog> log;
};

inline ShapeOptions train_shape_options(const TrainConfig& c) {
    ShapeOptions o;
    o.size = c.model.input_size;
    o.max_distractors = c.distractors;
    return o;
}

/// Trains from scratch. `on_epoch` is called after every epoch.
inline TrainResult train(const TrainConfig& config, const std::vector<Sample>& dataset,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
    config.validate();
    if (dataset.empty()) throw DomainError("train: empty dataset");
    for (const auto& s : dataset) {
        validate_sample(s);
        if (s.gt.height() != config.model.input_size || s.gt.width() != config.model.input_size) {
            throw ShapeError("train: sample " + s.id + " does not match the model input size");
        }
    }
    const Rng root(config.seed);
    Model model(config.model, root.fork(0).next_u64());
    std::vector<Tensor> leaves;
    for (auto& [name, t] : model.parameters()) leaves.push_back(t);
    AdamW opt(leaves, config.beta1, config.beta2, config.eps, config.weight_decay);
    const ClickSchedule schedule{config.max_clicks, config.continue_probability};
    const std::size_t n = config.model.input_size;
    const double lambda_click = config.click_attention ? config.lambda_click : 0.0;
    const double lambda_aff = config.click_attention ? config.lambda_aff : 0.0;

    std::vector<EpochLog> history;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng = root.fork(epoch + 1);
        const double lr = config.lr_at(epoch);
        EpochLog log{epoch + 1, lr};
        for (std::size_t step = 0; step < config.samples_per_epoch; ++step) {
            const Sample& base = dataset[rng.uniform_index(dataset.size())];
            const Sample sample = config.augment ? augment(base, rng) : base;
            const ClickSet start = initial_clicks(sample.gt, rng);
            auto predict = [&](const ClickSet& clicks, const std::vector<double>& prev) {
                NoGradGuard guard;
                return forward(model, sample.image, clicks, Tensor({1, n, n}, prev), config.click_attention)
                    .prediction.probability.values();
            };
            const ClickTrajectory traj =
                iterative_clicks(predict, sample.gt, start, std::vector<double>(n * n, 0.0), schedule, rng);

            Tape tape;
            const ForwardResult out =
                forward(model, sample.image, traj.clicks, Tensor({1, n, n}, traj.prev_mask), config.click_attention);
            const LossBreakdown loss = total_loss(model, out, sample.gt, lambda_click, lambda_aff);
            const double value = loss.total.item();
            if (!std::isfinite(value)) {
                throw Error("train: loss is not finite at epoch " + std::to_string(epoch + 1) + " step " +
                            std::to_string(step + 1));
            }
            opt.zero_grad();
            tape.backward(loss.total);
            opt.step(lr);

            log.loss += value;
            log.seg += loss.seg;
            log.click += loss.click;
            log.aff += loss.aff;
            log.iou += iou(out.prediction.mask, sample.gt);
            log.clicks += static_cast<double>(traj.clicks.size());
        }
        const double k = config.samples_per_epoch ? static_cast<double>(config.samples_per_epoch) : 1.0;
        log.loss /= k;
        log.seg /= k;
        log.click /= k;
        log.aff /= k;
        log.iou /= k;
        log.clicks /= k;
        history.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return {std::move(model), std::move(history)};
}

inline void write_loss_log(const std::vector<EpochLog>& log, std::ostream& out) {
    for (const auto& e : log) out << format_epoch(e) << '\n';
}

} // namespace clickseg

#endif // CLICKSEG_TRAINER_HPP
