#ifndef CLICKSEG_CHECKPOINT_HPP
#define CLICKSEG_CHECKPOINT_HPP

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "clickseg/encoder.hpp"
#include "clickseg/error.hpp"

namespace clickseg {

inline constexpr int kCheckpointVersion = 1;

/// ModelConfig as a JSON object; field names match the struct members.
inline nlohmann::json config_json(const ModelConfig& c) {
    return {{"input_size", c.input_size}, {"patch_size", c.patch_size}, {"stage_dims", c.stage_dims},
            {"heads", c.heads},           {"layers", c.layers},         {"reduction", c.reduction},
            {"n_cls", c.n_cls},           {"mapping_dim", c.mapping_dim}, {"decoder_dim", c.decoder_dim},
            {"mlp_ratio", c.mlp_ratio},   {"click_radius", c.click_radius}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.input_size = j.at("input_size").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.stage_dims = j.at("stage_dims").get<std::array<std::size_t, kStages>>();
        c.heads = j.at("heads").get<std::array<std::size_t, kStages>>();
        c.layers = j.at("layers").get<std::array<std::size_t, kStages>>();
        c.reduction = j.at("reduction").get<std::array<std::size_t, kStages>>();
        c.n_cls = j.at("n_cls").get<std::size_t>();
        c.mapping_dim = j.at("mapping_dim").get<std::size_t>();
        c.decoder_dim = j.at("decoder_dim").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.click_radius = j.at("click_radius").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Checkpoint document:
///
///   {"format": "clickseg-checkpoint", "version": 1,
///    "click_attention": true,
///    "config": {...ModelConfig fields...},
///    "parameters": [{"name": "...", "shape": [r, c], "data": [f64, ...]}, ...]}
///
/// Parameters appear in Model::parameters() order. Doubles are written in shortest
/// round-trip form, so save -> load -> save is byte-identical.
inline std::string checkpoint_json(const Model& model, bool click_attention = true) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& [name, t] : model.parameters())
        params.push_back({{"name", name}, {"shape", t.shape()}, {"data", t.values()}});
    nlohmann::json doc = {{"format", "clickseg-checkpoint"},
                          {"version", kCheckpointVersion},
                          {"click_attention", click_attention},
                          {"config", config_json(model.config())},
                          {"parameters", std::move(params)}};
    return doc.dump() + "\n";
}

/// A loaded model and whether it was trained with click attention.
struct Checkpoint {
    Model model;
    bool click_attention = true;
};

inline Checkpoint checkpoint_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: not valid JSON: ") + e.what());
    }
    if (doc.value("format", "") != "clickseg-checkpoint") throw IoError("checkpoint: missing format tag");
    if (doc.value("version", 0) != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported version " + doc.value("version", nlohmann::json()).dump());
    }
    const auto ca = doc.find("click_attention");
    if (ca != doc.end() && !ca->is_boolean()) throw IoError("checkpoint: click_attention must be a boolean");
    Model model(config_from_json(doc.at("config")), 0);
    std::map<std::string, const nlohmann::json*> stored;
    for (const auto& p : doc.at("parameters")) stored[p.at("name").get<std::string>()] = &p;
    auto params = model.parameters();
    if (stored.size() != params.size()) {
        throw IoError("checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                      std::to_string(stored.size()));
    }
    for (auto& [name, t] : params) {
        auto it = stored.find(name);
        if (it == stored.end()) throw IoError("checkpoint: missing parameter " + name);
        const auto shape = it->second->at("shape").get<Shape>();
        if (shape != t.shape()) {
            throw IoError("checkpoint: parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                          shape_str(t.shape()));
        }
        const auto data = it->second->at("data").get<std::vector<double>>();
        if (data.size() != t.numel()) throw IoError("checkpoint: parameter " + name + " has wrong value count");
        auto dst = t.mutable_data();
        std::copy(data.begin(), data.end(), dst.begin());
    }
    return {std::move(model), ca == doc.end() || ca->get<bool>()};
}

inline Model model_from_json(const std::string& text) { return checkpoint_from_json(text).model; }

inline void save_checkpoint(const Model& model, const std::string& path, bool click_attention = true) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot create " + path);
    out << checkpoint_json(model, click_attention);
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_checkpoint: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_json(buf.str());
}

inline Model load_checkpoint(const std::string& path) { return read_checkpoint(path).model; }

} // namespace clickseg

#endif // CLICKSEG_CHECKPOINT_HPP
