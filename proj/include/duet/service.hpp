#pragma once
// HTTP retrieval service over one (checkpoint, gallery index) pair.
//
//   POST /api/query          multipart: sketch (PNG/JPEG), text?, connector?, k?
//   GET  /api/image/{id}     gallery photo; ?thumb=1 for a <= 256 px PNG
//   GET  /api/meta           gallery size, backbone id, fingerprint, connectors
//   GET  /healthz
//
// Handlers are plain functions returning Response so they can be exercised
// without a socket; mount() wires them into an httplib::Server.

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "duet/retrieval.hpp"
#include "duet/trainer.hpp"

namespace httplib {
class Server;
}

namespace duet::service {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string checkpoint;
    std::string index;
    std::string backbone;       // optional override of the checkpoint's backbone path
    std::string gallery_root;   // optional; otherwise the paths recorded in the index
    std::size_t max_upload_bytes = 4u << 20;
    std::size_t k_cap = 100;
    std::size_t default_k = 10;
    std::string cors_origin = "*";
    int thumb_side = 256;

    void validate() const;
    // DUET_HOST, DUET_PORT, DUET_CHECKPOINT, DUET_INDEX, DUET_BACKBONE,
    // DUET_GALLERY_ROOT, DUET_MAX_UPLOAD, DUET_K_CAP, DUET_CORS_ORIGIN.
    static ServiceConfig with_env(ServiceConfig base);
};

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

struct QueryRequest {
    std::string sketch;  // raw upload bytes
    std::optional<std::string> text;
    std::optional<std::string> connector;
    std::optional<std::string> k;  // unparsed form value
};

class RetrievalService {
public:
    explicit RetrievalService(ServiceConfig config);

    // Loads checkpoint and index from the configured paths. A fingerprint
    // mismatch throws unless allow_mismatch, in which case queries answer 409.
    void load(bool allow_mismatch = false);
    void attach(trainer::InferenceModel model, retrieval::GalleryIndex index, bool allow_mismatch = false);
    bool ready() const;

    Response query(const QueryRequest& req) const;
    Response image(const std::string& id, bool thumb) const;
    Response meta() const;
    Response health() const;

    void mount(httplib::Server& server) const;
    const ServiceConfig& config() const { return config_; }

private:
    struct State {
        trainer::InferenceModel model;
        retrieval::GalleryIndex index;
        bool fingerprint_ok = true;
    };

    ServiceConfig config_;
    std::vector<std::string> connectors_;
    std::shared_ptr<const State> state_;
    mutable std::mutex state_mu_;
    mutable std::mutex infer_mu_;  // one forward pass at a time

    std::shared_ptr<const State> snapshot() const;
};

Response json_error(int status, const std::string& message);

}  // namespace duet::service
