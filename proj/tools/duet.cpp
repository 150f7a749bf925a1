// duet: command-line front end for fixture generation, backbone
// pretraining, training, indexing, querying, evaluation and serving.

#include <spdlog/spdlog.h>

#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "duet/composer.hpp"
#include "duet/datasets.hpp"
#include "duet/errors.hpp"
#include "duet/image.hpp"
#include "duet/io.hpp"
#include "duet/pretrain.hpp"
#include "duet/retrieval.hpp"
#include "duet/service.hpp"
#include "duet/trainer.hpp"
#include "httplib.h"

using namespace duet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

httplib::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

std::optional<fs::path> opt_path(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return fs::path(s);
}

int cmd_make_fixture(const std::string& out, std::uint64_t seed, int side) {
    const auto summary = datasets::make_fixture(out, seed, side);
    std::cout << summary.main_manifest.string() << "\n" << summary.ambiguous_manifest.string() << "\n";
    return 0;
}

int cmd_pretrain(const std::string& out, trainer::PretrainConfig cfg) {
    trainer::PretrainReport rep;
    auto enc = trainer::pretrain_backbone(cfg, &rep);
    enc.save(out);
    spdlog::info("backbone written to {} (contrastive loss {:.4f} -> {:.4f} over {} steps)", out, rep.initial_loss,
                 rep.final_loss, rep.steps);
    return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& overrides, const std::string& resume) {
    auto cfg = trainer::load_config(config, overrides);
    auto manifest = datasets::load_manifest(cfg.manifest);
    auto enc = encoder::DualEncoder::load(cfg.backbone);
    trainer::Trainer tr(cfg, std::move(manifest), std::move(enc));
    if (!resume.empty()) tr.resume(resume);
    const auto res = tr.fit();
    json summary{{"initial_loss", res.initial_loss},
                 {"final_loss", res.final_loss},
                 {"best_val_acc1", res.best_val_acc1},
                 {"steps", res.steps},
                 {"checkpoint", (fs::path(cfg.output_dir) / "last").string()}};
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_index(const std::string& manifest_path, const std::string& checkpoint, const std::string& out,
              const std::string& split, const std::string& backbone) {
    const auto model = trainer::load_inference_model(checkpoint, opt_path(backbone));
    const auto m = datasets::load_manifest(manifest_path);
    retrieval::BuildReport report;
    const auto idx =
        retrieval::build_index(m.gallery_photos(datasets::parse_split(split)), m, *model.encoder, model.fingerprint, &report);
    idx.save(out);
    io::write_atomic(fs::path(out) / "provenance.json",
                     json{{"checkpoint", fs::absolute(checkpoint).lexically_normal().string()},
                          {"manifest", fs::absolute(manifest_path).lexically_normal().string()},
                          {"split", split}}
                         .dump(2));
    std::cout << json{{"rows", idx.size()}, {"dim", idx.dim()}, {"skipped", report.skipped}, {"fingerprint", idx.fingerprint}}
                     .dump(2)
              << "\n";
    return report.skipped.empty() ? 0 : 3;
}

int cmd_query(const std::string& index_dir, std::string checkpoint, const std::string& sketch,
              const std::optional<std::string>& text, const std::optional<std::string>& connector, std::size_t k,
              const std::string& backbone) {
    if (checkpoint.empty()) {
        const auto prov = fs::path(index_dir) / "provenance.json";
        if (!fs::exists(prov)) throw ConfigError("no --checkpoint given and the index records none");
        checkpoint = json::parse(io::read_text(prov)).at("checkpoint").get<std::string>();
    }
    const auto model = trainer::load_inference_model(checkpoint, opt_path(backbone));
    const auto idx = retrieval::GalleryIndex::load(index_dir);
    retrieval::check_fingerprint(idx, model.fingerprint);
    const auto connectors = datasets::PhraseSet::shipped(datasets::PhraseKind::connecting_word).phrases;
    const auto img = image::load(sketch);
    const Tensor input = image::to_model_input(img, static_cast<int>(model.encoder->config().image_resolution));
    const Tensor q = composer::build_inference_query(*model.encoder, *model.composer, input, text, connector, connectors);
    auto res = retrieval::rank(idx, q, k);
    json out{{"query", {{"sketch", sketch}, {"sketch_sha256", io::sha256_hex(io::read_text(sketch))},
                        {"text", text ? json(*text) : json(nullptr)},
                        {"connector", connector ? json(*connector) : json(nullptr)}, {"k", k}}},
             {"results", json::array()}};
    for (std::size_t i = 0; i < res.ids.size(); ++i)
        out["results"].push_back({{"rank", i + 1}, {"id", res.ids[i]}, {"score", res.scores[i]}});
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& protocol, const std::string& manifest_path, const std::string& checkpoint,
             const std::string& split, bool sketch_only, const std::string& out, const std::string& backbone) {
    const auto model = trainer::load_inference_model(checkpoint, opt_path(backbone));
    const auto m = datasets::load_manifest(manifest_path);
    retrieval::EvalOptions opts;
    opts.split = datasets::parse_split(split);
    opts.use_text = !sketch_only;
    opts.connectors = datasets::PhraseSet::shipped(datasets::PhraseKind::connecting_word).phrases;
    const auto rep = retrieval::evaluate(retrieval::parse_protocol(protocol), m, *model.encoder, *model.composer, opts);
    const auto j = rep.to_json();
    if (!out.empty()) io::write_atomic(out, j.dump(2) + "\n");
    std::cout << json{{"protocol", protocol}, {"queries", rep.queries}, {"gallery", rep.gallery}, {"metrics", rep.metrics}}
                     .dump(2)
              << "\n";
    return 0;
}

int cmd_serve(service::ServiceConfig cfg, bool allow_stale) {
    cfg = service::ServiceConfig::with_env(cfg);
    service::RetrievalService svc(cfg);
    svc.load(allow_stale);
    httplib::Server server;
    svc.mount(server);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    spdlog::info("serving on http://{}:{}", cfg.host, cfg.port);
    if (!server.listen(cfg.host, cfg.port)) {
        spdlog::error("cannot bind {}:{}", cfg.host, cfg.port);
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"duet: sketch + text composed image retrieval"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");

    auto* fx = app.add_subcommand("make-fixture", "render the procedural shape dataset");
    std::string fx_out = "fixture";
    std::uint64_t fx_seed = 7;
    int fx_side = 64;
    fx->add_option("--out", fx_out, "output directory")->required();
    fx->add_option("--seed", fx_seed);
    fx->add_option("--side", fx_side, "image side in pixels");

    auto* pre = app.add_subcommand("pretrain-backbone", "contrastively pretrain a small dual encoder");
    std::string pre_out;
    trainer::PretrainConfig pcfg;
    pre->add_option("--out", pre_out, "backbone directory")->required();
    pre->add_option("--steps", pcfg.steps);
    pre->add_option("--batch-size", pcfg.batch_size);
    pre->add_option("--lr", pcfg.lr);
    pre->add_option("--merges", pcfg.merges, "BPE merges to learn");
    pre->add_option("--seed", pcfg.seed);
    pre->add_option("--pair-weight", pcfg.pair_weight, "weight of the sketch/photo contrastive term");

    auto* tr = app.add_subcommand("train", "train converter, prompt, LayerNorms and decoder");
    std::string tr_config, tr_resume;
    std::vector<std::string> tr_overrides;
    tr->add_option("--config", tr_config)->required()->check(CLI::ExistingFile);
    tr->add_option("--override", tr_overrides, "key.path=value, repeatable");
    tr->add_option("--resume", tr_resume, "checkpoint directory to continue from");

    auto* ix = app.add_subcommand("index", "encode a gallery into an index");
    std::string ix_manifest, ix_ckpt, ix_out, ix_split = "test", ix_backbone;
    ix->add_option("--manifest", ix_manifest)->required()->check(CLI::ExistingFile);
    ix->add_option("--checkpoint", ix_ckpt)->required();
    ix->add_option("--out", ix_out)->required();
    ix->add_option("--split", ix_split, "gallery of this split")->check(CLI::IsMember({"train", "test"}));
    ix->add_option("--backbone", ix_backbone, "override the checkpoint's backbone path");

    auto* qu = app.add_subcommand("query", "rank an index against a sketch (+ text)");
    std::string qu_index, qu_ckpt, qu_sketch, qu_backbone;
    std::optional<std::string> qu_text, qu_conn;
    std::size_t qu_k = 10;
    qu->add_option("--index", qu_index)->required();
    qu->add_option("--checkpoint", qu_ckpt, "defaults to the checkpoint the index was built with");
    qu->add_option("--sketch", qu_sketch)->required()->check(CLI::ExistingFile);
    qu->add_option("--text", qu_text);
    qu->add_option("--connector", qu_conn);
    qu->add_option("-k", qu_k);
    qu->add_option("--backbone", qu_backbone);

    auto* ev = app.add_subcommand("eval", "run an evaluation protocol");
    std::string ev_protocol = "fine_grained", ev_manifest, ev_ckpt, ev_split = "test", ev_out, ev_backbone;
    bool ev_sketch_only = false;
    ev->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"fine_grained", "scene", "domain_transfer"}));
    ev->add_option("--manifest", ev_manifest)->required()->check(CLI::ExistingFile);
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "test"}));
    ev->add_flag("--sketch-only", ev_sketch_only, "ignore captions");
    ev->add_option("--out", ev_out, "write the full JSON report here");
    ev->add_option("--backbone", ev_backbone);

    auto* sv = app.add_subcommand("serve", "HTTP retrieval service");
    service::ServiceConfig scfg;
    bool sv_stale = false;
    sv->add_option("--checkpoint", scfg.checkpoint);
    sv->add_option("--index", scfg.index);
    sv->add_option("--backbone", scfg.backbone);
    sv->add_option("--host", scfg.host);
    sv->add_option("--port", scfg.port);
    sv->add_option("--gallery-root", scfg.gallery_root);
    sv->add_option("--max-upload", scfg.max_upload_bytes, "bytes");
    sv->add_option("--k-cap", scfg.k_cap);
    sv->add_option("--cors-origin", scfg.cors_origin);
    sv->add_flag("--allow-stale-index", sv_stale, "start even if the index fingerprint differs (queries get 409)");

    CLI11_PARSE(app, argc, argv);
    if (verbose) spdlog::set_level(spdlog::level::debug);

    try {
        if (*fx) return cmd_make_fixture(fx_out, fx_seed, fx_side);
        if (*pre) return cmd_pretrain(pre_out, pcfg);
        if (*tr) return cmd_train(tr_config, tr_overrides, tr_resume);
        if (*ix) return cmd_index(ix_manifest, ix_ckpt, ix_out, ix_split, ix_backbone);
        if (*qu) return cmd_query(qu_index, qu_ckpt, qu_sketch, qu_text, qu_conn, qu_k, qu_backbone);
        if (*ev) return cmd_eval(ev_protocol, ev_manifest, ev_ckpt, ev_split, ev_sketch_only, ev_out, ev_backbone);
        if (*sv) return cmd_serve(scfg, sv_stale);
    } catch (const FingerprintMismatch& e) {
        spdlog::error("{}", e.what());
        return 4;
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::bad_alloc&) {
        spdlog::error("out of memory; reduce batch_size or use a smaller backbone");
        return 5;
    }
    return 0;
}
