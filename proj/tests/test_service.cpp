#include <thread>

#include "doctest.h"
#include "duet/errors.hpp"
#include "duet/image.hpp"
#include "duet/io.hpp"
#include "duet/service.hpp"
#include "fixtures.hpp"
#include "httplib.h"

using namespace duet;
using namespace duet::service;
using nlohmann::json;
using duet::testing::TempDir;

namespace {

struct Backend {
    TempDir dir{"duet_svc"};
    datasets::DatasetManifest manifest;
    trainer::InferenceModel model;
    retrieval::GalleryIndex index;
    std::string sketch_png;

    Backend() {
        manifest = datasets::load_manifest(datasets::make_fixture(dir / "fx", 7, 32).main_manifest);
        auto enc = std::make_shared<encoder::DualEncoder>(testing::tiny_encoder(3));
        auto comp = std::make_shared<composer::Composer>(*enc, composer::ComposerConfig{}, 9);
        model = {enc, comp, trainer::model_fingerprint(*enc, *comp)};
        index = retrieval::build_index(manifest.gallery_photos(datasets::Split::test), manifest, *enc, model.fingerprint);
        sketch_png = io::read_text(manifest.resolve(manifest.pairs[0].sketch));
    }
};

Backend& backend() {
    static Backend b;
    return b;
}

std::unique_ptr<RetrievalService> ready_service(ServiceConfig cfg = {}) {
    auto svc = std::make_unique<RetrievalService>(cfg);
    svc->attach(backend().model, backend().index);
    return svc;
}

QueryRequest request(std::optional<std::string> text = std::nullopt, std::optional<std::string> k = std::nullopt) {
    QueryRequest q;
    q.sketch = backend().sketch_png;
    q.text = std::move(text);
    q.k = std::move(k);
    return q;
}

}  // namespace

TEST_CASE("config validation") {
    ServiceConfig c;
    c.k_cap = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.default_k = 500;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(ServiceConfig{}.validate());
}

TEST_CASE("endpoints answer 503 until an index is attached") {
    RetrievalService svc{ServiceConfig{}};
    CHECK_FALSE(svc.ready());
    CHECK(svc.query(request()).status == 503);
    CHECK(svc.meta().status == 503);
    CHECK(svc.image("x", false).status == 503);
    CHECK(svc.health().status == 200);
}

TEST_CASE("meta reports gallery, fingerprint and the shipped connectors") {
    auto svc = ready_service();
    const auto r = svc->meta();
    REQUIRE(r.status == 200);
    const auto j = json::parse(r.body);
    CHECK(j["gallery_size"] == backend().index.size());
    CHECK(j["fingerprint"] == backend().model.fingerprint);
    CHECK(j["connectors"] == io::read_lines(datasets::data_dir() / "phrases" / "connecting_words.txt"));
}

TEST_CASE("queries match the in-process path and are deterministic") {
    auto svc = ready_service();
    const auto connectors = datasets::PhraseSet::shipped(datasets::PhraseKind::connecting_word).phrases;
    for (const std::optional<std::string>& text : {std::optional<std::string>(), std::optional<std::string>("red")}) {
        const auto r = svc->query(request(text, "5"));
        REQUIRE(r.status == 200);
        const auto j = json::parse(r.body);
        REQUIRE(j["results"].size() == 5);

        const auto& enc = *backend().model.encoder;
        const auto img = image::decode(std::span(reinterpret_cast<const std::uint8_t*>(backend().sketch_png.data()),
                                                 backend().sketch_png.size()));
        const auto q = composer::build_inference_query(
            enc, *backend().model.composer, image::to_model_input(img, static_cast<int>(enc.config().image_resolution)),
            text, std::nullopt, connectors);
        const auto ref = retrieval::rank(backend().index, q, 5);
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(j["results"][i]["id"] == ref.ids[i]);
            CHECK(j["results"][i]["score"].get<double>() == ref.scores[i]);
            if (i) CHECK(j["results"][i]["score"].get<double>() <= j["results"][i - 1]["score"].get<double>());
        }
        CHECK(svc->query(request(text, "5")).body == r.body);
    }
}

TEST_CASE("k handling") {
    auto svc = ready_service();
    CHECK(json::parse(svc->query(request(std::nullopt, "0")).body)["results"].empty());
    CHECK(json::parse(svc->query(request(std::nullopt, "50")).body)["results"].size() == backend().index.size());
    CHECK(json::parse(svc->query(request()).body)["results"].size() == std::min<std::size_t>(10, backend().index.size()));
    CHECK(svc->query(request(std::nullopt, "101")).status == 400);
    CHECK(svc->query(request(std::nullopt, "-1")).status == 400);
    CHECK(svc->query(request(std::nullopt, "three")).status == 400);
}

TEST_CASE("bad uploads are 400") {
    auto svc = ready_service();
    QueryRequest q;
    CHECK(svc->query(q).status == 400);
    q.sketch = "definitely not a png";
    CHECK(svc->query(q).status == 400);

    ServiceConfig small;
    small.max_upload_bytes = 64;
    auto tight = ready_service(small);
    CHECK(tight->query(request()).status == 400);
}

TEST_CASE("fingerprint mismatch is refused at attach and answered with 409") {
    auto stale = backend().index;
    stale.fingerprint = "another-model";
    RetrievalService strict{ServiceConfig{}};
    CHECK_THROWS_AS(strict.attach(backend().model, stale), FingerprintMismatch);
    RetrievalService lax{ServiceConfig{}};
    lax.attach(backend().model, stale, true);
    CHECK(lax.query(request()).status == 409);
    CHECK(lax.meta().status == 200);
}

TEST_CASE("image endpoint serves photos and bounded thumbnails") {
    auto svc = ready_service();
    const auto& id = backend().index.ids[0];
    const auto full = svc->image(id, false);
    CHECK(full.status == 200);
    CHECK(full.content_type == "image/png");
    CHECK(full.body == io::read_text(backend().index.paths[0]));
    CHECK(svc->image("nope", false).status == 404);

    // A large gallery photo: the thumbnail keeps the aspect ratio within 256 px.
    auto idx = backend().index;
    const auto big = backend().dir / "big.png";
    image::save_png(big, image::Image(600, 300, 90));
    idx.paths[0] = big.string();
    RetrievalService wide{ServiceConfig{}};
    wide.attach(backend().model, idx);
    const auto th = wide.image(id, true);
    REQUIRE(th.status == 200);
    const auto img = image::decode(std::span(reinterpret_cast<const std::uint8_t*>(th.body.data()), th.body.size()));
    CHECK(img.width == 256);
    CHECK(img.height == 128);
}

TEST_CASE("HTTP round trip over a live socket") {
    auto svc = ready_service();
    httplib::Server server;
    svc->mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);

    httplib::MultipartFormDataItems form{{"sketch", backend().sketch_png, "s.png", "image/png"},
                                         {"text", "red", "", ""},
                                         {"connector", "with", "", ""},
                                         {"k", "4", "", ""}};
    auto res = cli.Post("/api/query", form);
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    QueryRequest direct = request("red", "4");
    direct.connector = "with";
    CHECK(res->body == svc->query(direct).body);
    auto again = cli.Post("/api/query", form);
    REQUIRE(again);
    CHECK(again->body == res->body);

    httplib::MultipartFormDataItems bad{{"sketch", "garbage", "s.png", "image/png"}};
    CHECK(cli.Post("/api/query", bad)->status == 400);
    httplib::MultipartFormDataItems big_k{{"sketch", backend().sketch_png, "s.png", "image/png"}, {"k", "1000", "", ""}};
    CHECK(cli.Post("/api/query", big_k)->status == 400);

    const auto id = backend().index.ids[1];
    auto img = cli.Get("/api/image/" + id + "?thumb=1");
    REQUIRE(img);
    CHECK(img->status == 200);
    CHECK(img->get_header_value("Content-Type") == "image/png");
    CHECK(cli.Get("/api/image/unknown")->status == 404);
    auto meta = cli.Get("/api/meta");
    REQUIRE(meta);
    CHECK(json::parse(meta->body)["gallery_size"] == backend().index.size());
    auto pre = cli.Options("/api/query");
    REQUIRE(pre);
    CHECK(pre->status == 204);

    server.stop();
    th.join();
}
