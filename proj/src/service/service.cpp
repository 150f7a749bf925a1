#include "duet/service.hpp"

#include <spdlog/spdlog.h>

#include <charconv>
#include <chrono>
#include <cstdlib>

#include "duet/composer.hpp"
#include "duet/errors.hpp"
#include "duet/image.hpp"
#include "duet/io.hpp"
#include "httplib.h"

namespace duet::service {

namespace fs = std::filesystem;
using nlohmann::json;

void ServiceConfig::validate() const {
    if (k_cap < 1) throw ConfigError("k cap must be at least 1");
    if (default_k > k_cap) throw ConfigError("default k exceeds the k cap");
    if (max_upload_bytes == 0) throw ConfigError("max upload size must be positive");
    if (port < 0 || port > 65535) throw ConfigError("port out of range");
    if (thumb_side < 1) throw ConfigError("thumbnail side must be positive");
}

namespace {

std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
}

std::size_t env_size(const char* name, std::size_t fallback) {
    const auto v = env(name);
    if (!v) return fallback;
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || p != v->data() + v->size()) throw ConfigError(std::string(name) + " is not a number");
    return out;
}

std::string content_type_for(const std::string& path) {
    auto ext = fs::path(path).extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    return "image/png";
}

}  // namespace

ServiceConfig ServiceConfig::with_env(ServiceConfig c) {
    if (auto v = env("DUET_HOST")) c.host = *v;
    c.port = static_cast<int>(env_size("DUET_PORT", static_cast<std::size_t>(c.port)));
    if (auto v = env("DUET_CHECKPOINT")) c.checkpoint = *v;
    if (auto v = env("DUET_INDEX")) c.index = *v;
    if (auto v = env("DUET_BACKBONE")) c.backbone = *v;
    if (auto v = env("DUET_GALLERY_ROOT")) c.gallery_root = *v;
    c.max_upload_bytes = env_size("DUET_MAX_UPLOAD", c.max_upload_bytes);
    c.k_cap = env_size("DUET_K_CAP", c.k_cap);
    if (auto v = env("DUET_CORS_ORIGIN")) c.cors_origin = *v;
    return c;
}

Response json_error(int status, const std::string& message) {
    return {status, "application/json", json{{"error", message}, {"status", status}}.dump()};
}

RetrievalService::RetrievalService(ServiceConfig config) : config_(std::move(config)) {
    config_.validate();
    connectors_ = datasets::PhraseSet::shipped(datasets::PhraseKind::connecting_word).phrases;
}

void RetrievalService::load(bool allow_mismatch) {
    if (config_.checkpoint.empty() || config_.index.empty())
        throw ConfigError("service needs both a checkpoint and an index path");
    std::optional<fs::path> backbone;
    if (!config_.backbone.empty()) backbone = config_.backbone;
    auto model = trainer::load_inference_model(config_.checkpoint, backbone);
    auto index = retrieval::GalleryIndex::load(config_.index);
    attach(std::move(model), std::move(index), allow_mismatch);
}

void RetrievalService::attach(trainer::InferenceModel model, retrieval::GalleryIndex index, bool allow_mismatch) {
    auto st = std::make_shared<State>();
    st->fingerprint_ok = index.fingerprint == model.fingerprint;
    if (!st->fingerprint_ok) {
        if (!allow_mismatch) retrieval::check_fingerprint(index, model.fingerprint);
        spdlog::warn("index fingerprint does not match the checkpoint; queries will be refused");
    }
    st->model = std::move(model);
    st->index = std::move(index);
    std::lock_guard lock(state_mu_);
    state_ = std::move(st);
}

std::shared_ptr<const RetrievalService::State> RetrievalService::snapshot() const {
    std::lock_guard lock(state_mu_);
    return state_;
}

bool RetrievalService::ready() const { return snapshot() != nullptr; }

Response RetrievalService::query(const QueryRequest& req) const {
    const auto st = snapshot();
    if (!st) return json_error(503, "index not loaded");
    if (!st->fingerprint_ok) return json_error(409, "index was built with a different checkpoint");
    if (req.sketch.empty()) return json_error(400, "missing sketch upload");
    if (req.sketch.size() > config_.max_upload_bytes)
        return json_error(400, "sketch exceeds " + std::to_string(config_.max_upload_bytes) + " bytes");

    std::size_t k = config_.default_k;
    if (req.k && !req.k->empty()) {
        const auto& s = *req.k;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), k);
        if (ec != std::errc() || p != s.data() + s.size()) return json_error(400, "k must be a non-negative integer");
        if (k > config_.k_cap) return json_error(400, "k exceeds the cap of " + std::to_string(config_.k_cap));
    }

    image::Image img;
    try {
        img = image::decode(std::span(reinterpret_cast<const std::uint8_t*>(req.sketch.data()), req.sketch.size()));
    } catch (const InputError& e) {
        return json_error(400, std::string("undecodable sketch: ") + e.what());
    }

    std::optional<std::string> text = req.text;
    if (text && text->find_first_not_of(" \t\r\n") == std::string::npos) text.reset();
    retrieval::RetrievalResult res;
    {
        std::lock_guard lock(infer_mu_);
        const auto& enc = *st->model.encoder;
        const Tensor input = image::to_model_input(img, static_cast<int>(enc.config().image_resolution));
        const Tensor q = composer::build_inference_query(enc, *st->model.composer, input, text, req.connector,
                                                         connectors_);
        res = retrieval::rank(st->index, q, k);
    }

    json results = json::array();
    for (std::size_t i = 0; i < res.ids.size(); ++i)
        results.push_back({{"rank", i + 1},
                           {"id", res.ids[i]},
                           {"score", res.scores[i]},
                           {"image_url", "/api/image/" + res.ids[i]},
                           {"thumbnail_url", "/api/image/" + res.ids[i] + "?thumb=1"}});
    json echo{{"sketch_sha256", io::sha256_hex(req.sketch)},
              {"text", text ? json(*text) : json(nullptr)},
              {"connector", req.connector ? json(*req.connector) : json(nullptr)},
              {"k", k}};
    return {200, "application/json",
            json{{"results", results}, {"query", echo}, {"fingerprint", st->index.fingerprint}}.dump()};
}

Response RetrievalService::image(const std::string& id, bool thumb) const {
    const auto st = snapshot();
    if (!st) return json_error(503, "index not loaded");
    const auto row = st->index.find(id);
    if (!row) return json_error(404, "unknown image id: " + id);
    fs::path path = st->index.paths[*row];
    if (!config_.gallery_root.empty()) path = fs::path(config_.gallery_root) / st->index.meta[*row].path;
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_bytes(path);
    } catch (const Error&) {
        return json_error(404, "image file missing for id " + id);
    }
    if (!thumb) return {200, content_type_for(path.string()), std::string(bytes.begin(), bytes.end())};
    try {
        const auto small = image::thumbnail(image::decode(bytes), config_.thumb_side);
        const auto png = image::encode_png(small);
        return {200, "image/png", std::string(png.begin(), png.end())};
    } catch (const InputError& e) {
        return json_error(404, std::string("gallery image unreadable: ") + e.what());
    }
}

Response RetrievalService::meta() const {
    const auto st = snapshot();
    if (!st) return json_error(503, "service not initialized");
    return {200, "application/json",
            json{{"gallery_size", st->index.size()},
                 {"backbone_id", st->index.backbone_id},
                 {"fingerprint", st->model.fingerprint},
                 {"index_fingerprint", st->index.fingerprint},
                 {"connectors", connectors_},
                 {"k_cap", config_.k_cap},
                 {"default_k", config_.default_k},
                 {"image_size", st->model.encoder->config().image_resolution}}
                .dump()};
}

Response RetrievalService::health() const {
    return {200, "application/json", json{{"status", "ok"}, {"ready", ready()}}.dump()};
}

void RetrievalService::mount(httplib::Server& server) const {
    server.set_payload_max_length(2 * config_.max_upload_bytes + (1u << 20));
    const std::string origin = config_.cors_origin;
    auto send = [origin](httplib::Response& res, const Response& r) {
        res.status = r.status;
        res.set_content(r.body, r.content_type);
        if (!origin.empty()) res.set_header("Access-Control-Allow-Origin", origin);
    };

    server.Options(R"(/api/.*)", [origin](const httplib::Request&, httplib::Response& res) {
        res.status = 204;
        if (!origin.empty()) {
            res.set_header("Access-Control-Allow-Origin", origin);
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
        }
    });
    server.Post("/api/query", [this, send](const httplib::Request& req, httplib::Response& res) {
        QueryRequest q;
        auto field = [&](const char* name) -> std::optional<std::string> {
            if (req.has_file(name)) return req.get_file_value(name).content;
            if (req.has_param(name)) return req.get_param_value(name);
            return std::nullopt;
        };
        if (auto s = field("sketch")) q.sketch = std::move(*s);
        q.text = field("text");
        q.connector = field("connector");
        q.k = field("k");
        send(res, query(q));
    });
    server.Get(R"(/api/image/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
        const bool thumb = req.has_param("thumb") && req.get_param_value("thumb") != "0";
        send(res, image(req.matches[1], thumb));
    });
    server.Get("/api/meta", [this, send](const httplib::Request&, httplib::Response& res) { send(res, meta()); });
    server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
        spdlog::info(R"({{"method":"{}","path":"{}","status":{},"bytes":{}}})", req.method, req.path, res.status,
                     res.body.size());
    });
}

}  // namespace duet::service
