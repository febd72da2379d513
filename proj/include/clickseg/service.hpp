#ifndef CLICKSEG_SERVICE_HPP
#define CLICKSEG_SERVICE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include "clickseg/affinity.hpp"
#include "clickseg/dataset.hpp"
#include "clickseg/encoder.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/image_io.hpp"

namespace clickseg {

/// A failure with the HTTP status it maps to.
class ServiceError : public Error {
public:
    ServiceError(int status, const std::string& what) : Error(what), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

// ---------------------------------------------------------------------------
// Base64 (standard alphabet, padded) via OpenSSL.

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw ServiceError(400, "base64: length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * (text.size() / 4));
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw ServiceError(400, "base64: invalid characters");
    std::size_t pad = 0;
    for (auto it = text.rbegin(); it != text.rend() && *it == '=' && pad < 2; ++it) ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

// ---------------------------------------------------------------------------
// Aspect-preserving fit of an H x W image into the N x N model input, centred with
// zero padding. Pixel (r, c) maps to the model pixel containing its centre.

struct Letterbox {
    std::size_t height = 0, width = 0; // original
    std::size_t size = 0;              // model input side
    std::size_t inner_h = 0, inner_w = 0, top = 0, left = 0;

    static Letterbox fit(std::size_t height, std::size_t width, std::size_t size) {
        Letterbox b{height, width, size};
        const double s = static_cast<double>(size) / static_cast<double>(std::max(height, width));
        b.inner_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(height * s)), 1, size);
        b.inner_w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(width * s)), 1, size);
        b.top = (size - b.inner_h) / 2;
        b.left = (size - b.inner_w) / 2;
        return b;
    }

    std::size_t model_row(std::size_t r) const {
        return top + std::min(inner_h - 1, static_cast<std::size_t>((r + 0.5) * inner_h / height));
    }
    std::size_t model_col(std::size_t c) const {
        return left + std::min(inner_w - 1, static_cast<std::size_t>((c + 0.5) * inner_w / width));
    }

    /// [C,H,W] image to [C,N,N] model input.
    Tensor to_model(const Tensor& image) const {
        const std::size_t ch = image.dim(0);
        const Tensor inner = resize_bilinear(image, inner_h, inner_w);
        std::vector<double> out(ch * size * size, 0.0);
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t r = 0; r < inner_h; ++r)
                for (std::size_t k = 0; k < inner_w; ++k)
                    out[(c * size + top + r) * size + left + k] = inner[(c * inner_h + r) * inner_w + k];
        return Tensor({ch, size, size}, std::move(out));
    }

    Tensor mask_to_model(const Mask& m) const {
        const Mask inner = resize_nearest(m, inner_h, inner_w);
        std::vector<double> out(size * size, 0.0);
        for (std::size_t r = 0; r < inner_h; ++r)
            for (std::size_t k = 0; k < inner_w; ++k) out[(top + r) * size + left + k] = inner(r, k);
        return Tensor({1, size, size}, std::move(out));
    }

    /// An N x N model-space map sampled back to H x W.
    std::vector<double> from_model(std::span<const double> values) const {
        std::vector<double> out(height * width);
        for (std::size_t r = 0; r < height; ++r) {
            const std::size_t mr = model_row(r);
            for (std::size_t c = 0; c < width; ++c) out[r * width + c] = values[mr * size + model_col(c)];
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Sessions

struct ServiceOptions {
    std::size_t max_sessions = 64;
    std::size_t max_image_side = 4096;
    std::size_t max_body_bytes = 32u << 20;
    bool click_attention = true;
};

/// One committed state. Everything is in model space.
struct HistoryEntry {
    ClickSet clicks;    // model coordinates
    ClickSet submitted; // the same clicks in image coordinates
    Tensor input_prev;  // previous-mask channel fed to the forward pass
    Tensor probability; // [1,N,N] output; the initial entry holds the initial mask
    Mask mask;
};

struct Session {
    std::string id;
    Letterbox box;
    Tensor image; // [3,N,N]
    std::optional<Mask> gt; // original size
    std::vector<HistoryEntry> history;
    std::mutex mutex;
};

struct SessionRequest {
    std::vector<std::uint8_t> image_png;
    std::optional<std::vector<std::uint8_t>> initial_mask_png;
    std::optional<std::vector<std::uint8_t>> gt_png;
};

/// What a client sees of a session after an operation.
struct SessionView {
    std::string id;
    std::size_t width = 0, height = 0;
    ClickSet clicks; // image coordinates
    std::vector<std::uint8_t> mask_png;
    std::vector<std::uint8_t> probability_png;
    std::optional<double> iou;
    std::size_t history_depth = 0;
};

struct OverlayView {
    std::size_t stage = 0; // 1-based
    bool neutral = false;
    std::vector<std::uint8_t> similarity_png;
    std::vector<std::uint8_t> attention_png;
};

class SessionService {
public:
    SessionService(Model model, ServiceOptions options = {}) : model_(std::move(model)), options_(options) {
        if (options_.max_sessions == 0) throw DomainError("SessionService: max_sessions must be positive");
    }

    const Model& model() const { return model_; }
    const ServiceOptions& options() const { return options_; }

    std::size_t session_count() const {
        std::lock_guard lock(mutex_);
        return sessions_.size();
    }

    SessionView create(const SessionRequest& req) {
        const RawImage raw = decode_checked(req.image_png, 3, false, "image");
        auto s = std::make_shared<Session>();
        s->id = new_id();
        s->box = Letterbox::fit(raw.height, raw.width, model_.config().input_size);
        s->image = s->box.to_model(image_tensor(raw));
        const auto check_size = [&](const Mask& m, const char* what) {
            if (m.height() != raw.height || m.width() != raw.width) {
                throw ServiceError(400, std::string(what) + " is " + std::to_string(m.width()) + "x" +
                                            std::to_string(m.height()) + " but the image is " +
                                            std::to_string(raw.width) + "x" + std::to_string(raw.height));
            }
        };
        HistoryEntry initial;
        initial.input_prev = Tensor::zeros({1, s->box.size, s->box.size});
        if (req.initial_mask_png) {
            const Mask m = mask_from_gray(decode_checked(*req.initial_mask_png, 1, true, "initial mask"));
            check_size(m, "initial mask");
            initial.input_prev = s->box.mask_to_model(m);
        }
        if (req.gt_png) {
            Mask m = mask_from_gray(decode_checked(*req.gt_png, 1, true, "ground truth"));
            check_size(m, "ground truth");
            s->gt = std::move(m);
        }
        initial.probability = initial.input_prev;
        initial.mask = threshold_mask(initial.probability.values(), s->box.size, s->box.size);
        s->history.push_back(std::move(initial));
        SessionView view = render(*s);
        insert(s);
        return view;
    }

    SessionView state(const std::string& id) {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        return render(*s);
    }

    SessionView click(const std::string& id, std::int64_t row, std::int64_t col, Polarity polarity) {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        if (row < 0 || col < 0 || static_cast<std::size_t>(row) >= s->box.height ||
            static_cast<std::size_t>(col) >= s->box.width) {
            throw ServiceError(422, "click (" + std::to_string(row) + ", " + std::to_string(col) +
                                        ") outside the " + std::to_string(s->box.width) + "x" +
                                        std::to_string(s->box.height) + " image");
        }
        const HistoryEntry& last = s->history.back();
        HistoryEntry next;
        next.clicks = last.clicks;
        next.submitted = last.submitted;
        next.submitted.push_back({static_cast<std::size_t>(row), static_cast<std::size_t>(col), polarity,
                                  last.clicks.size()});
        next.clicks.push_back({s->box.model_row(static_cast<std::size_t>(row)),
                               s->box.model_col(static_cast<std::size_t>(col)), polarity, last.clicks.size()});
        next.input_prev = last.probability;
        {
            NoGradGuard guard;
            Prediction p =
                forward(model_, s->image, next.clicks, next.input_prev, options_.click_attention).prediction;
            next.probability = std::move(p.probability);
            next.mask = std::move(p.mask);
        }
        s->history.push_back(std::move(next));
        return render(*s);
    }

    SessionView undo(const std::string& id) {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        if (s->history.size() == 1) throw ServiceError(409, "nothing to undo");
        s->history.pop_back();
        return render(*s);
    }

    SessionView reset(const std::string& id) {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        s->history.resize(1);
        return render(*s);
    }

    /// Similarity field s_i and the positive-click rows of the aggregated attention A_i
    /// (all rows without positive clicks), each scaled to [0,1] and sampled to image size.
    OverlayView overlays(const std::string& id, std::size_t stage) {
        auto s = find(id);
        if (stage < 1 || stage > kStages) throw ServiceError(422, "stage must be in 1..4");
        std::lock_guard lock(s->mutex);
        const std::size_t i = stage - 1;
        const auto& cfg = model_.config();
        const HistoryEntry& e = s->history.back();
        ForwardResult r;
        {
            NoGradGuard guard;
            r = forward(model_, s->image, e.clicks, e.input_prev, options_.click_attention);
        }
        OverlayView out{stage};
        const std::size_t g = cfg.grid(i), n = cfg.input_size;

        std::vector<double> sim(g * g, 1.0);
        const auto& field = r.encoder.similarity[i];
        out.neutral = !field || field->neutral;
        if (field) sim = field->values.values();

        const Tensor& a = aggregate_attention(r.encoder.attention[i]).map;
        const std::size_t keys = a.dim(1);
        auto rows = positive_patches(e.clicks, i, cfg);
        if (rows.empty())
            for (std::size_t q = 0; q < a.dim(0); ++q) rows.push_back(q);
        std::vector<double> att(keys, 0.0);
        for (auto q : rows)
            for (std::size_t k = 0; k < keys; ++k) att[k] += a[q * keys + k];
        const double peak = *std::max_element(att.begin(), att.end());
        for (auto& v : att) v = peak > 0.0 ? v / peak : 0.0;

        const auto render_grid = [&](const std::vector<double>& cells) {
            const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cells.size()))));
            const std::size_t extent = n / side;
            std::vector<double> full(n * n);
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) full[y * n + x] = cells[(y / extent) * side + x / extent];
            const auto back = s->box.from_model(full);
            return encode_png(gray_raw(Tensor({s->box.height, s->box.width}, back), s->box.height, s->box.width));
        };
        out.similarity_png = render_grid(sim);
        out.attention_png = render_grid(att);
        return out;
    }

private:
    RawImage decode_checked(std::span<const std::uint8_t> bytes, std::size_t channels, bool gray,
                            const std::string& what) const {
        std::size_t w = 0, h = 0;
        if (!png_dimensions(bytes, w, h)) throw ServiceError(400, what + " is not a decodable PNG");
        if (w > options_.max_image_side || h > options_.max_image_side) {
            throw ServiceError(413, what + " is " + std::to_string(w) + "x" + std::to_string(h) + ", limit is " +
                                        std::to_string(options_.max_image_side) + " per side");
        }
        try {
            return decode_png(bytes, channels, gray);
        } catch (const IoError& e) {
            throw ServiceError(400, what + ": " + e.what());
        }
    }

    static SessionView render(const Session& s) {
        const HistoryEntry& e = s.history.back();
        SessionView v;
        v.id = s.id;
        v.width = s.box.width;
        v.height = s.box.height;
        v.history_depth = s.history.size();
        v.clicks = e.submitted;
        const auto prob = s.box.from_model(e.probability.data());
        const Mask mask = threshold_mask(prob, s.box.height, s.box.width);
        v.mask_png = encode_png(mask_raw(mask));
        v.probability_png = encode_png(gray_raw(Tensor({s.box.height, s.box.width}, prob), s.box.height, s.box.width));
        if (s.gt) v.iou = iou(mask, *s.gt);
        return v;
    }

    std::string new_id() {
        std::uint8_t bytes[12];
        if (RAND_bytes(bytes, sizeof bytes) != 1) throw Error("session id: RAND_bytes failed");
        static const char* hex = "0123456789abcdef";
        std::string id;
        for (auto b : bytes) {
            id += hex[b >> 4];
            id += hex[b & 15];
        }
        return id;
    }

    std::shared_ptr<Session> find(const std::string& id) {
        std::lock_guard lock(mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw ServiceError(404, "unknown session " + id);
        lru_.splice(lru_.begin(), lru_, it->second.second);
        return it->second.first;
    }

    void insert(const std::shared_ptr<Session>& s) {
        std::lock_guard lock(mutex_);
        lru_.push_front(s->id);
        sessions_[s->id] = {s, lru_.begin()};
        while (sessions_.size() > options_.max_sessions) {
            sessions_.erase(lru_.back());
            lru_.pop_back();
        }
    }

    Model model_;
    ServiceOptions options_;
    mutable std::mutex mutex_;
    std::list<std::string> lru_; // most recent first
    std::unordered_map<std::string, std::pair<std::shared_ptr<Session>, std::list<std::string>::iterator>> sessions_;
};

// ---------------------------------------------------------------------------
// HTTP mapping. Request and response bodies are JSON; PNG payloads are base64.

namespace detail {

inline nlohmann::json click_json(const Click& c) {
    return {{"row", c.row},
            {"col", c.col},
            {"polarity", c.positive() ? "positive" : "negative"},
            {"ordinal", c.ordinal}};
}

inline nlohmann::json view_json(const SessionView& v) {
    nlohmann::json clicks = nlohmann::json::array();
    for (const auto& c : v.clicks) clicks.push_back(click_json(c));
    return {{"session_id", v.id},
            {"width", v.width},
            {"height", v.height},
            {"click_count", v.clicks.size()},
            {"clicks", std::move(clicks)},
            {"history_depth", v.history_depth},
            {"mask_png", base64_encode(v.mask_png)},
            {"probability_png", base64_encode(v.probability_png)},
            {"iou", v.iou ? nlohmann::json(*v.iou) : nlohmann::json(nullptr)}};
}

inline nlohmann::json parse_body(const httplib::Request& req) {
    try {
        auto j = nlohmann::json::parse(req.body.empty() ? "{}" : req.body);
        if (!j.is_object()) throw ServiceError(400, "request body must be a JSON object");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ServiceError(400, std::string("request body is not valid JSON: ") + e.what());
    }
}

inline std::optional<std::vector<std::uint8_t>> png_field(const nlohmann::json& body, const char* key) {
    if (!body.contains(key) || body.at(key).is_null()) return std::nullopt;
    if (!body.at(key).is_string()) throw ServiceError(400, std::string(key) + " must be a base64 string");
    return base64_decode(body.at(key).get<std::string>());
}

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        send_json(res, 200, fn());
    } catch (const ServiceError& e) {
        send_json(res, e.status(), {{"error", e.what()}});
    } catch (const Error& e) {
        send_json(res, 400, {{"error", e.what()}});
    }
}

} // namespace detail

/// Registers the session routes on `server`:
///   POST /session, GET /session/{id}, POST /session/{id}/click, POST /session/{id}/undo,
///   POST /session/{id}/reset, GET /session/{id}/overlays?stage=i, GET /healthz.
inline void mount_routes(httplib::Server& server, SessionService& service) {
    using detail::guarded;
    server.set_payload_max_length(service.options().max_body_bytes);
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/healthz", [&service](const httplib::Request&, httplib::Response& res) {
        const auto& cfg = service.model().config();
        detail::send_json(res, 200,
                          {{"status", "ok"},
                           {"sessions", service.session_count()},
                           {"max_sessions", service.options().max_sessions},
                           {"input_size", cfg.input_size},
                           {"click_attention", service.options().click_attention}});
    });

    server.Post("/session", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = detail::parse_body(req);
            auto image = detail::png_field(body, "image_png");
            if (!image) throw ServiceError(400, "image_png is required");
            SessionRequest r{std::move(*image), detail::png_field(body, "initial_mask_png"),
                             detail::png_field(body, "gt_png")};
            return detail::view_json(service.create(r));
        });
    });

    server.Get(R"(/session/([0-9a-f]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return detail::view_json(service.state(req.matches[1])); });
    });

    server.Post(R"(/session/([0-9a-f]+)/click)", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = detail::parse_body(req);
            std::int64_t row = 0, col = 0;
            std::string polarity;
            try {
                row = body.at("row").get<std::int64_t>();
                col = body.at("col").get<std::int64_t>();
                polarity = body.value("polarity", std::string("positive"));
            } catch (const nlohmann::json::exception&) {
                throw ServiceError(400, "click needs integer row and col");
            }
            if (polarity != "positive" && polarity != "negative") {
                throw ServiceError(400, "polarity must be positive or negative");
            }
            return detail::view_json(service.click(req.matches[1], row, col,
                                                   polarity == "positive" ? Polarity::positive : Polarity::negative));
        });
    });

    server.Post(R"(/session/([0-9a-f]+)/undo)", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return detail::view_json(service.undo(req.matches[1])); });
    });

    server.Post(R"(/session/([0-9a-f]+)/reset)", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return detail::view_json(service.reset(req.matches[1])); });
    });

    server.Get(R"(/session/([0-9a-f]+)/overlays)", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string text = req.has_param("stage") ? req.get_param_value("stage") : "1";
            std::size_t stage = 0;
            if (text.size() != 1 || text[0] < '1' || text[0] > '4') {
                throw ServiceError(422, "stage must be in 1..4, got '" + text + "'");
            }
            stage = static_cast<std::size_t>(text[0] - '0');
            const OverlayView v = service.overlays(req.matches[1], stage);
            return nlohmann::json{{"session_id", std::string(req.matches[1])},
                                  {"stage", v.stage},
                                  {"neutral", v.neutral},
                                  {"similarity_png", base64_encode(v.similarity_png)},
                                  {"attention_png", base64_encode(v.attention_png)}};
        });
    });

    // Anything else under /session/ that did not match a route.
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) {
            res.set_content(nlohmann::json{{"error", httplib::status_message(res.status)}}.dump(), "application/json");
        }
    });
}

} // namespace clickseg

#endif // CLICKSEG_SERVICE_HPP
