// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Tolerances and time limits are pinned
// below.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "duet/composer.hpp"
#include "duet/decoder.hpp"
#include "duet/errors.hpp"
#include "duet/io.hpp"
#include "duet/objectives.hpp"
#include "duet/retrieval.hpp"
#include "duet/service.hpp"
#include "duet/trainer.hpp"
#include "fixtures.hpp"
#include "httplib.h"
#include "pipeline_grad.hpp"

using namespace duet;
using ag::Var;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kKernelTol = 1e-6;
constexpr double kGradTol = 1e-3;
constexpr double kSimplexTol = 1e-6;
constexpr double kShiftTol = 1e-12;
constexpr double kTrendLossRatio = 0.5;
constexpr double kTrendAcc1 = 90.0;
constexpr double kCompositionFraction = 0.70;

const fs::path kRoot = DUET_SOURCE_DIR;

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Collects failed sub-checks into a single outcome.
class Checks {
public:
    void expect(bool ok, const std::string& what) {
        ++total_;
        if (!ok) failures_.push_back(what);
    }
    void near(double got, double want, double tol, const std::string& what) {
        std::ostringstream s;
        s << what << ": got " << got << " want " << want;
        expect(std::isfinite(got) && std::abs(got - want) <= tol, s.str());
    }
    Outcome outcome(std::string detail = {}) const {
        Outcome o;
        o.pass = failures_.empty();
        if (!o.pass) {
            o.detail = std::to_string(failures_.size()) + "/" + std::to_string(total_) + " checks failed; first: " + failures_[0];
        } else {
            o.detail = detail.empty() ? std::to_string(total_) + " checks" : detail;
        }
        return o;
    }

private:
    std::size_t total_ = 0;
    std::vector<std::string> failures_;
};

Var rows(std::size_t r, std::size_t c, std::vector<double> v) { return Var::constant(Tensor({r, c}, std::move(v))); }

Var at_distance(double dist) {
    const double c = 1.0 - dist;
    return rows(1, 2, {c, std::sqrt(std::max(0.0, 1.0 - c * c))});
}

std::string fixed(double v, int prec = 2) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(prec);
    s << v;
    return s.str();
}

// ---- loss kernels -----------------------------------------------------------

Outcome loss_kernels() {
    using namespace objectives;
    Checks c;
    const Var q = rows(1, 2, {1.0, 0.0});

    c.near(distance({1, 2, 3}, {1, 2, 3}), 0.0, kKernelTol, "delta(x, x)");
    c.near(distance({1, 2, 3}, {-1, -2, -3}), 2.0, kKernelTol, "delta(x, -x)");
    c.near(distance({1, 2, 2}, {2, 0, 1}), 1.0 - 4.0 / (3.0 * std::sqrt(5.0)), kKernelTol, "delta hand value");

    c.near(loss_trip(q, at_distance(0.4), at_distance(0.4), 0.2).item(), 0.2, kKernelTol, "trip at margin");
    c.near(loss_trip(q, at_distance(0.1), at_distance(0.9), 0.2).item(), 0.0, kKernelTol, "trip dead zone");
    c.near(loss_trip(q, at_distance(0.5), at_distance(0.4), 0.2).item(), 0.3, kKernelTol, "trip active");

    c.near(loss_comp(at_distance(0.3), at_distance(0.3), q, 0.1).item(), 0.1, kKernelTol, "comp at margin");
    c.near(loss_comp(at_distance(0.2), at_distance(0.6), q, 0.1).item(), 0.0, kKernelTol, "comp dead zone");
    c.near(loss_comp(at_distance(0.6), at_distance(0.2), q, 0.1).item(), 0.5, kKernelTol, "comp active");

    c.near(loss_reg(at_distance(0.4), at_distance(0.4), q).item(), 0.0, kKernelTol, "reg equal");
    c.near(loss_reg(at_distance(0.7), at_distance(0.4), q).item(), 0.3, kKernelTol, "reg above");
    c.near(loss_reg(at_distance(0.4), at_distance(0.7), q).item(), 0.3, kKernelTol, "reg below");

    c.near(loss_tt(rows(2, 2, {1, 2, 3, 4}), rows(2, 2, {1, 2, 3, 4})).item(), 0.0, kKernelTol, "tt equal");
    c.near(loss_tt(rows(2, 2, {3, 4, 0, 0}), rows(2, 2, {0, 0, 0, 0})).item(), 2.5, kKernelTol, "tt batch mean");

    const auto ra = region_attention(rows(1, 1, {1.0}), rows(2, 1, {0.0, std::log(3.0)}), 2);
    c.near(ra.weights.value()[0], 0.25, kKernelTol, "attention weight 0");
    c.near(ra.weights.value()[1], 0.75, kKernelTol, "attention weight 1");
    c.near(loss_rt(q, at_distance(0.3), at_distance(0.8), 1, 0.2).item(), 0.0, kKernelTol, "rt dead zone");
    c.near(loss_rt(q, at_distance(0.3), at_distance(0.3), 1, 0.2).item(), 0.2, kKernelTol, "rt at margin");

    const Var target = rows(2, 4, std::vector<double>(8, 0.75));
    const Var recon = rows(2, 4, std::vector<double>(8, 0.25));
    c.near(loss_rec(target, target, target).item(), 0.0, kKernelTol, "rec exact");
    c.near(loss_rec(recon, recon, target).item(), 1.0, kKernelTol, "rec two RMS terms");

    // Every unweighted term forced to 1; the default weights then sum to 3.7.
    BatchBundle b;
    b.s_plain = rows(1, 2, {1, 0});
    b.p_pos = rows(1, 2, {0, 1});
    b.p_neg = rows(1, 2, {0.8, 0.6});
    b.s_delta = rows(1, 2, {-1, 0});
    b.s_neutral = rows(1, 2, {0, -1});
    b.s_fixed = rows(1, 2, {1, 1});
    b.patches_pos = b.p_pos;
    b.patches_neg = b.p_neg;
    b.tokens = 1;
    b.photo_pixels = rows(1, 3, {1, 1, 1});
    decoder::DecoderConfig dc;
    dc.in_dim = 2;
    dc.grid = 1;
    dc.upsamples = 0;
    decoder::Decoder dec(dc, 1);
    for (auto& [n, v] : dec.params().all()) dec.params().at(n).mutable_value().fill(0.0);
    Margins m;
    m.comp = 1.0;
    const auto rep = loss_total(b, LossWeights{}, m, LossToggles{}, &dec);
    for (const auto& [k, v] : rep.breakdown) c.near(v, 1.0, kKernelTol, "unit term " + k);
    c.near(rep.total.item(), 3.7, kKernelTol, "weighted total");

    auto s = Var::parameter(Tensor({1, 2}, {1.0, 0.1}));
    auto dead = loss_trip(s, at_distance(0.05), at_distance(0.9), 0.2);
    dead.backward();
    c.expect(dead.item() == 0.0 && s.grad().data == std::vector<double>{0.0, 0.0}, "dead-zone gradient is exactly zero");
    return c.outcome();
}

// ---- gradient checks -------------------------------------------------------

Outcome gradient_checks() {
    testing::TempDir dir("duet_acc_grad");
    const auto manifest = datasets::load_manifest(datasets::make_fixture(dir / "fx", 7, 32).main_manifest);
    trainer::TrainConfig base;
    base.backbone = "unused";
    base.manifest = "unused";
    base.output_dir = "";
    base.batch_size = 3;
    base.decoder.channels = 4;
    base.decoder.grid = 2;
    base.decoder.upsamples = 1;
    const auto batch = datasets::train_batch(manifest, 3, 5);
    Checks c;
    std::string detail;
    for (const std::string loss : {"trip", "comp", "reg", "tt", "rt", "rec"}) {
        trainer::Trainer tr(testing::single_loss_config(base, loss), manifest, testing::tiny_encoder(3));
        const auto r = testing::pipeline_grad_check(tr, batch, loss);
        c.expect(r.value > 0.0, loss + " inactive on the probe batch");
        c.expect(r.result.max_rel_error <= kGradTol, loss + " rel error " + std::to_string(r.result.max_rel_error) + " at " + r.result.worst);
        detail += (detail.empty() ? "" : " ") + loss + "=" + fixed(r.result.max_rel_error * 1e6, 1) + "e-6";
    }
    return c.outcome("max rel error " + detail);
}

// ---- region attention -----------------------------------------------------

Outcome region_attention_properties() {
    using namespace objectives;
    Checks c;
    std::mt19937_64 rng(31);
    std::normal_distribution<double> nd;
    auto random = [&](std::size_t r, std::size_t d, double sd) {
        Tensor t({r, d});
        for (double& v : t.data) v = sd * nd(rng);
        return Var::constant(std::move(t));
    };
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t B = 1 + trial % 4, T = 1 + trial % 9, d = 8;
        const Var q = random(B, d, 1.0);
        const Var patches = random(B * T, d, 3.0);
        const auto w = region_attention(q, patches, T).weights.value();
        for (std::size_t b = 0; b < B; ++b) {
            double sum = 0;
            for (std::size_t t = 0; t < T; ++t) {
                sum += w[b * T + t];
                c.expect(w[b * T + t] >= 0.0, "negative weight");
            }
            c.near(sum, 1.0, kSimplexTol, "weights sum");
        }

        // Identical patches give uniform weights.
        Tensor same({B * T, d});
        const Var one = random(1, d, 1.0);
        for (std::size_t r = 0; r < B * T; ++r)
            std::copy(one.value().data.begin(), one.value().data.end(), same.data.begin() + static_cast<long>(r * d));
        const auto u = region_attention(q, Var::constant(same), T).weights.value();
        for (double v : u.data) c.near(v, 1.0 / static_cast<double>(T), kSimplexTol, "uniform weight");

        // Adding c * q / |q|^2 to every patch of item b adds c to every logit.
        Tensor shifted = patches.value();
        for (std::size_t b = 0; b < B; ++b) {
            double qq = 0;
            for (std::size_t j = 0; j < d; ++j) qq += q.value()[b * d + j] * q.value()[b * d + j];
            const double shift = 5.0 * nd(rng);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < d; ++j) shifted[(b * T + t) * d + j] += shift * q.value()[b * d + j] / qq;
        }
        const auto ws = region_attention(q, Var::constant(shifted), T).weights.value();
        for (std::size_t i = 0; i < w.size(); ++i) c.near(ws[i], w[i], kShiftTol, "shifted weight");

        // T = 1: L_RT is L_trip on the single patch.
        const Var pos = random(B, d, 1.0), neg = random(B, d, 1.0);
        c.near(loss_rt(q, pos, neg, 1, 0.2).item(), loss_trip(q, pos, neg, 0.2).item(), kKernelTol, "T=1 degeneracy");
    }
    return c.outcome();
}

// ---- metric oracle ---------------------------------------------------------

std::vector<double> unit(std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    return v;
}

Outcome metric_oracle() {
    using namespace retrieval;
    Checks c;
    std::mt19937_64 rng(777);
    std::normal_distribution<double> nd;
    auto draw = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = draw(1, 100), nq = draw(1, 50), d = 6;
        GalleryIndex idx;
        idx.features = Tensor({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(d);
            for (double& x : v) x = nd(rng);
            v = unit(v);
            std::copy(v.begin(), v.end(), idx.features.data.begin() + static_cast<long>(i * d));
            char id[32];
            std::snprintf(id, sizeof id, "g%03zu", i);
            idx.ids.push_back(id);
            idx.meta.push_back({id, std::string(id) + ".png", std::nullopt, std::nullopt, {}});
            idx.paths.push_back(std::string(id) + ".png");
        }

        std::vector<RetrievalResult> results;
        std::vector<std::vector<std::size_t>> oracle;
        std::vector<std::string> truths;
        std::vector<std::set<std::string>> rel;
        for (std::size_t qi = 0; qi < nq; ++qi) {
            std::vector<double> qv(d);
            for (double& x : qv) x = nd(rng);
            results.push_back(rank(idx, Tensor({d}, qv), n));
            // Oracle ranking: score every row, stable sort by score descending.
            const auto qn = unit(qv);
            std::vector<std::pair<double, std::size_t>> scored;
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < d; ++j) s += idx.features.data[i * d + j] * qn[j];
                scored.emplace_back(-s, i);
            }
            std::sort(scored.begin(), scored.end());
            std::vector<std::size_t> order;
            for (const auto& p : scored) order.push_back(p.second);
            oracle.push_back(order);
            truths.push_back(idx.ids[draw(0, n - 1)]);
            std::set<std::string> r;
            for (std::size_t j = 0, m = draw(0, std::min<std::size_t>(n, 8)); j < m; ++j) r.insert(idx.ids[draw(0, n - 1)]);
            rel.push_back(r);
        }
        for (std::size_t q : {1, 5, 10, 50}) {
            std::size_t acc_hits = 0, set_hits = 0, used = 0;
            double recall = 0;
            for (std::size_t i = 0; i < nq; ++i) {
                bool hit = false, set_hit = false;
                std::size_t found = 0;
                for (std::size_t r = 0; r < std::min(q, n); ++r) {
                    const auto& id = idx.ids[oracle[i][r]];
                    hit = hit || id == truths[i];
                    set_hit = set_hit || rel[i].count(id);
                    found += rel[i].count(id);
                }
                acc_hits += hit;
                set_hits += set_hit;
                if (!rel[i].empty()) {
                    recall += static_cast<double>(found) / static_cast<double>(rel[i].size());
                    ++used;
                }
            }
            const double want_acc = 100.0 * static_cast<double>(acc_hits) / static_cast<double>(nq);
            const double want_set = 100.0 * static_cast<double>(set_hits) / static_cast<double>(nq);
            const double want_recall = used ? recall / static_cast<double>(used) : 0.0;
            const std::string tag = "trial " + std::to_string(trial) + " q=" + std::to_string(q);
            c.expect(acc_at_q(results, truths, q) == want_acc, tag + " acc");
            c.expect(acc_at_q(results, rel, q) == want_set, tag + " acc over sets");
            c.expect(recall_at_q(results, rel, q) == want_recall, tag + " recall");
        }
    }
    return c.outcome("50 galleries, exact agreement");
}

// ---- desk training ---------------------------------------------------------

trainer::TrainConfig desk_config(const fs::path& config, const fs::path& out) {
    return trainer::load_config(config, {"output_dir=\"" + out.string() + "\""});
}

trainer::Trainer make_trainer(const trainer::TrainConfig& cfg) {
    return trainer::Trainer(cfg, datasets::load_manifest(cfg.manifest), encoder::DualEncoder::load(cfg.backbone));
}

Outcome freeze_contract(const fs::path& scratch) {
    auto tr = make_trainer(desk_config(kRoot / "configs" / "desk.json", scratch / "freeze"));
    Checks c;
    const auto frozen = tr.frozen_snapshot();
    const auto before = tr.trainable_snapshot();
    std::size_t text_tensors = 0;
    for (const auto& [k, t] : frozen) text_tensors += k.rfind("text.", 0) == 0;
    c.expect(text_tensors > 0, "text transformer missing from the frozen set");
    for (int i = 0; i < 10; ++i) tr.train_step(datasets::train_batch(tr.manifest(), tr.config().batch_size, 100 + i));
    const auto after_frozen = tr.frozen_snapshot();
    for (const auto& [k, t] : frozen)
        c.expect(io::fingerprint(std::map<std::string, Tensor>{{k, t}}) ==
                     io::fingerprint(std::map<std::string, Tensor>{{k, after_frozen.at(k)}}),
                 "frozen tensor changed: " + k);
    std::set<std::string> moved;
    const auto after = tr.trainable_snapshot();
    for (const auto& [k, t] : before)
        if (after.at(k).data != t.data) moved.insert(k.substr(0, k.find('/')));
    for (const char* g : {"prompt", "layernorm", "converter", "decoder"}) c.expect(moved.count(g), std::string(g) + " did not move");
    return c.outcome(std::to_string(frozen.size()) + " frozen tensors unchanged (" + std::to_string(text_tensors) +
                     " text), 4 trainable groups moved");
}

struct TrendRun {
    std::unique_ptr<trainer::Trainer> trainer;
    trainer::FitResult fit;
    fs::path checkpoint;
};

double sketch_only_acc(const trainer::Trainer& tr, const datasets::DatasetManifest& m, datasets::Split split,
                       const std::string& metric, bool use_text) {
    retrieval::EvalOptions opts;
    opts.split = split;
    opts.use_text = use_text;
    opts.connectors = datasets::PhraseSet::shipped(datasets::PhraseKind::connecting_word).phrases;
    auto model = tr.inference_model();
    return retrieval::evaluate(retrieval::Protocol::fine_grained, m, *model.encoder, *model.composer, opts)
        .metrics.at(metric);
}

Outcome trend_check(const fs::path& scratch, TrendRun& run) {
    const auto cfg = desk_config(kRoot / "configs" / "desk.json", scratch / "trend");
    run.trainer = std::make_unique<trainer::Trainer>(make_trainer(cfg));
    run.fit = run.trainer->fit();
    run.checkpoint = scratch / "trend" / "final";
    run.trainer->save_checkpoint(run.checkpoint, false);

    const auto& tr = *run.trainer;
    const double acc1 = sketch_only_acc(tr, tr.manifest(), datasets::Split::train, "acc@1", false);
    const auto amb = datasets::load_manifest(kRoot / "data" / "fixture" / "ambiguous.json");
    const double composed5 = sketch_only_acc(tr, amb, datasets::Split::test, "acc@5", true);
    const double sketch5 = sketch_only_acc(tr, amb, datasets::Split::test, "acc@5", false);

    Checks c;
    c.expect(run.fit.final_loss < kTrendLossRatio * run.fit.initial_loss,
             "(a) loss " + fixed(run.fit.initial_loss, 4) + " -> " + fixed(run.fit.final_loss, 4));
    c.expect(acc1 >= kTrendAcc1, "(b) train sketch-only Acc@1 " + fixed(acc1));
    c.expect(composed5 >= sketch5, "(c) ambiguous Acc@5 composed " + fixed(composed5) + " < sketch-only " + fixed(sketch5));
    const std::string detail = "(a) loss " + fixed(run.fit.initial_loss, 4) + " -> " + fixed(run.fit.final_loss, 4) +
                               " (" + fixed(100.0 * run.fit.final_loss / run.fit.initial_loss, 1) + "%)" +
                               "; (b) train Acc@1 " + fixed(acc1) + "; (c) ambiguous Acc@5 composed " + fixed(composed5) +
                               " vs sketch-only " + fixed(sketch5);
    auto o = c.outcome(detail);
    if (!o.pass) o.detail += " | " + detail;
    return o;
}

Outcome compositionality(TrendRun& run) {
    if (!run.trainer) return {false, "trend run unavailable"};
    auto& tr = *run.trainer;
    auto& enc = tr.encoder();
    auto& comp = tr.composer();
    const auto& m = tr.manifest();
    const int res = static_cast<int>(enc.config().image_resolution);
    datasets::ImageCache cache(res, res);
    ag::NoGradGuard guard;
    std::size_t closer = 0, total = 0;
    for (std::size_t i : m.split_indices(datasets::Split::train)) {
        const auto vb = enc.encode_images({&cache.model_input(m.resolve(m.pairs[i].sketch)),
                                           &cache.model_input(m.resolve(m.pairs[i].photo.path))});
        const Var s = ag::gather_rows(vb.global, {0});
        const Var p = ag::gather_rows(vb.global, {1});
        const auto pw = comp.invert(s);
        const auto delta = comp.difference_token(p, s);
        const Var q = enc.encode_sequences(
            {comp.compose(comp.prompt(), pw.item(0)), comp.compose(comp.prompt(), pw.item(0), delta.item(0))});
        const Var plain = ag::gather_rows(q, {0}), composed = ag::gather_rows(q, {1});
        const auto metric = tr.config().distance;
        closer += objectives::distance(composed, p, metric).item() < objectives::distance(plain, p, metric).item();
        ++total;
    }
    const double frac = static_cast<double>(closer) / static_cast<double>(total);
    return {frac >= kCompositionFraction,
            std::to_string(closer) + "/" + std::to_string(total) + " training pairs closer with the difference token (" +
                fixed(100.0 * frac, 1) + "%)"};
}

Outcome ablation_reachability(const fs::path& scratch) {
    const std::map<std::string, std::set<std::string>> rows{
        {"no_tt", {"trip", "comp", "reg", "rt", "rec"}},
        {"no_rec", {"trip", "comp", "reg", "tt", "rt"}},
        {"no_rt", {"trip", "comp", "reg", "tt", "rec"}},
        {"no_compositionality", {"trip", "tt", "rt", "rec"}},
    };
    Checks c;
    for (const auto& [name, keys] : rows) {
        const fs::path file = kRoot / "configs" / "ablations" / (name + ".json");
        try {
            auto cfg = desk_config(file, scratch / ("ablation_" + name));
            cfg.epochs = 1;
            cfg.max_steps = 1;
            auto tr = make_trainer(cfg);
            std::set<std::string> got;
            tr.fit([&](const trainer::StepReport& r) {
                for (const auto& [k, v] : r.losses) got.insert(k);
            });
            c.expect(got == keys, name + " breakdown mismatch");
        } catch (const std::exception& e) {
            c.expect(false, name + ": " + e.what());
        }
    }
    return c.outcome("4 ablation configs launch; breakdowns omit exactly the disabled terms");
}

// ---- service ---------------------------------------------------------------

Outcome service_integration(const fs::path& scratch, const TrendRun& run) {
    if (run.checkpoint.empty() || !fs::exists(run.checkpoint)) return {false, "trend checkpoint unavailable"};
    Checks c;
    const auto manifest = datasets::load_manifest(kRoot / "data" / "fixture" / "manifest.json");
    const auto model = trainer::load_inference_model(run.checkpoint);
    const auto built = retrieval::build_index(manifest.gallery_photos(datasets::Split::test), manifest, *model.encoder,
                                              model.fingerprint);
    const fs::path index_dir = scratch / "index";
    built.save(index_dir);

    service::ServiceConfig cfg;
    cfg.checkpoint = run.checkpoint.string();
    cfg.index = index_dir.string();
    service::RetrievalService svc(cfg);
    c.expect(svc.query({}).status == 503, "query before load is not 503");
    c.expect(svc.image(built.ids[0], false).status == 503, "image before load is not 503");
    svc.load();
    c.expect(svc.ready(), "service not ready after load");

    httplib::Server server;
    svc.mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    const auto known = datasets::PhraseSet::shipped(datasets::PhraseKind::connecting_word).phrases;
    const int res = static_cast<int>(model.encoder->config().image_resolution);
    datasets::ImageCache cache(res, res);
    std::size_t compared = 0;
    for (std::size_t i : manifest.split_indices(datasets::Split::test)) {
        const auto& pair = manifest.pairs[i];
        const std::string png = io::read_text(manifest.resolve(pair.sketch));
        const std::optional<std::string> text = pair.caption;
        httplib::MultipartFormDataItems form{{"sketch", png, "sketch.png", "image/png"}, {"k", "10", "", ""}};
        if (text) form.push_back({"text", *text, "", ""});
        auto a = cli.Post("/api/query", form);
        auto b = cli.Post("/api/query", form);
        if (!a || !b) {
            c.expect(false, "HTTP request failed");
            continue;
        }
        c.expect(a->status == 200, "query status " + std::to_string(a->status));
        c.expect(a->body == b->body, "repeated query differs");
        const auto q = composer::build_inference_query(*model.encoder, *model.composer, cache.model_input(manifest.resolve(pair.sketch)),
                                                       text, std::nullopt, known);
        const auto direct = retrieval::rank(built, q, 10);
        std::vector<std::string> ids;
        const json body = json::parse(a->body);
        for (const auto& r : body.at("results")) ids.push_back(r.at("id"));
        c.expect(ids == direct.ids, "HTTP ranking differs from in-process ranking for " + pair.sketch);
        ++compared;
    }

    const std::string png = io::read_text(manifest.resolve(manifest.pairs[0].sketch));
    auto status = [&](httplib::MultipartFormDataItems form) {
        auto r = cli.Post("/api/query", form);
        return r ? r->status : -1;
    };
    c.expect(status({{"sketch", "not an image", "s.png", "image/png"}}) == 400, "undecodable sketch not 400");
    c.expect(status({{"k", "5", "", ""}}) == 400, "missing sketch not 400");
    c.expect(status({{"sketch", png, "s.png", "image/png"}, {"k", "1000", "", ""}}) == 400, "k over cap not 400");
    c.expect(status({{"sketch", png, "s.png", "image/png"}, {"k", "-3", "", ""}}) == 400, "negative k not 400");
    auto img = cli.Get("/api/image/" + built.ids[0]);
    c.expect(img && img->status == 200, "image endpoint not 200");
    auto missing = cli.Get("/api/image/no-such-photo");
    c.expect(missing && missing->status == 404, "unknown id not 404");
    auto health = cli.Get("/healthz");
    c.expect(health && health->status == 200, "health not 200");
    server.stop();
    th.join();

    // An index stamped by another model is refused, or answered with 409 when allowed.
    auto other = built;
    other.fingerprint = "0000";
    service::RetrievalService stale(service::ServiceConfig{});
    bool refused = false;
    try {
        stale.attach(model, other);
    } catch (const FingerprintMismatch&) {
        refused = true;
    }
    c.expect(refused, "mismatched index attached without error");
    stale.attach(model, other, true);
    service::QueryRequest req;
    req.sketch = png;
    c.expect(stale.query(req).status == 409, "stale index query not 409");

    return c.outcome(std::to_string(compared) + " HTTP queries equal the in-process ranking; 400/404/409/503 exercised");
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::err);
    testing::TempDir scratch("duet_acceptance");
    TrendRun run;

    struct Criterion {
        std::string name;
        double limit_s;
        std::function<Outcome()> fn;
    };
    const std::vector<Criterion> criteria{
        {"loss kernels", 10, loss_kernels},
        {"gradient checks", 60, gradient_checks},
        {"region attention properties", 5, region_attention_properties},
        {"metric oracle", 30, metric_oracle},
        {"freeze contract", 300, [&] { return freeze_contract(scratch.path()); }},
        {"desk trend check", 1200, [&] { return trend_check(scratch.path(), run); }},
        {"compositionality", 1200, [&] { return compositionality(run); }},
        {"ablation reachability", 300, [&] { return ablation_reachability(scratch.path()); }},
        {"service integration", 120, [&] { return service_integration(scratch.path(), run); }},
    };

    int failed = 0;
    for (const auto& cr : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = cr.fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > cr.limit_s) {
            o.pass = false;
            o.detail += "; over time limit";
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << cr.name << "  [" << fixed(secs, 1) << "s / " << cr.limit_s
                  << "s]  " << o.detail << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
    return failed ? 1 : 0;
}
