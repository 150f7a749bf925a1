#include "duet/objectives.hpp"

#include <cmath>

#include "duet/decoder.hpp"
#include "duet/errors.hpp"

namespace duet::objectives {

using ag::Var;
using nlohmann::json;

void LossWeights::validate() const {
    for (double w : {trip, comp, reg, tt, rt, rec})
        if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
    if (trip + comp + reg + tt + rt + rec <= 0.0) throw ConfigError("at least one loss weight must be positive");
}

void Margins::validate() const {
    for (double m : {trip, comp, rt})
        if (!(m > 0.0)) throw ConfigError("margins must be positive");
}

std::vector<std::string> LossToggles::enabled() const {
    std::vector<std::string> out;
    if (trip) out.push_back("trip");
    if (comp) out.push_back("comp");
    if (reg) out.push_back("reg");
    if (tt) out.push_back("tt");
    if (rt) out.push_back("rt");
    if (rec) out.push_back("rec");
    return out;
}

LossToggles LossToggles::preset(const std::string& name) {
    LossToggles t;
    if (name == "full") return t;
    if (name == "no_tt") {
        t.tt = false;
    } else if (name == "no_rec") {
        t.rec = false;
    } else if (name == "no_rt") {
        t.rt = false;
    } else if (name == "no_compositionality") {
        t.comp = false;
        t.reg = false;
    } else {
        throw ConfigError("unknown ablation preset: " + name);
    }
    return t;
}

void to_json(json& j, const LossWeights& w) {
    j = json{{"trip", w.trip}, {"comp", w.comp}, {"reg", w.reg}, {"tt", w.tt}, {"rt", w.rt}, {"rec", w.rec}};
}
void from_json(const json& j, LossWeights& w) {
    w.trip = j.value("trip", w.trip);
    w.comp = j.value("comp", w.comp);
    w.reg = j.value("reg", w.reg);
    w.tt = j.value("tt", w.tt);
    w.rt = j.value("rt", w.rt);
    w.rec = j.value("rec", w.rec);
}
void to_json(json& j, const Margins& m) { j = json{{"trip", m.trip}, {"comp", m.comp}, {"rt", m.rt}}; }
void from_json(const json& j, Margins& m) {
    m.trip = j.value("trip", m.trip);
    m.comp = j.value("comp", m.comp);
    m.rt = j.value("rt", m.rt);
}
void to_json(json& j, const LossToggles& t) {
    j = json{{"trip", t.trip}, {"comp", t.comp}, {"reg", t.reg}, {"tt", t.tt}, {"rt", t.rt}, {"rec", t.rec}};
}
void from_json(const json& j, LossToggles& t) {
    t.trip = j.value("trip", t.trip);
    t.comp = j.value("comp", t.comp);
    t.reg = j.value("reg", t.reg);
    t.tt = j.value("tt", t.tt);
    t.rt = j.value("rt", t.rt);
    t.rec = j.value("rec", t.rec);
}

Metric parse_metric(const std::string& s) {
    if (s == "cosine") return Metric::cosine;
    if (s == "euclidean") return Metric::euclidean;
    throw ConfigError("unknown distance: " + s + " (cosine, euclidean)");
}

std::string metric_name(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

Var distance(const Var& a, const Var& b, Metric metric) {
    if (a.shape() != b.shape()) throw ConfigError("distance: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (metric == Metric::euclidean) return ag::row_norm(ag::sub(a, b));
    try {
        return ag::cosine_distance_rows(a, b);
    } catch (const std::domain_error&) {
        throw NumericalError("cosine distance is undefined for a zero vector");
    }
}

double distance(const std::vector<double>& a, const std::vector<double>& b, Metric metric) {
    Tensor ta({1, a.size()}, a), tb({1, b.size()}, b);
    return distance(Var::constant(ta), Var::constant(tb), metric).item();
}

namespace {

Var hinge_mean(const Var& margin_plus) { return ag::mean(ag::relu(margin_plus)); }

}  // namespace

Var loss_trip(const Var& s_plain, const Var& p_pos, const Var& p_neg, double margin, Metric metric) {
    return hinge_mean(
        ag::add_scalar(ag::sub(distance(s_plain, p_pos, metric), distance(s_plain, p_neg, metric)), margin));
}

Var loss_comp(const Var& s_delta, const Var& s_plain, const Var& p_pos, double margin, Metric metric) {
    return hinge_mean(
        ag::add_scalar(ag::sub(distance(s_delta, p_pos, metric), distance(s_plain, p_pos, metric)), margin));
}

Var loss_reg(const Var& s_delta, const Var& s_neutral, const Var& p_pos, Metric metric) {
    return ag::mean(ag::abs(ag::sub(distance(s_delta, p_pos, metric), distance(s_neutral, p_pos, metric))));
}

Var loss_tt(const Var& s_fixed, const Var& s_plain) {
    if (s_fixed.shape() != s_plain.shape()) throw ConfigError("loss_tt: shape mismatch");
    return ag::mean(ag::row_norm(ag::sub(s_fixed, s_plain)));
}

RegionPooled region_attention(const Var& query, const Var& patches, std::size_t tokens) {
    if (tokens == 0) throw InputError("region_attention needs at least one patch");
    if (patches.cols() != query.cols()) throw ConfigError("region_attention: patch width != query width");
    if (patches.rows() != query.rows() * tokens) throw ConfigError("region_attention: patch count mismatch");
    RegionPooled r;
    r.weights = ag::softmax_rows(ag::batched_patch_dot(patches, query, tokens));
    r.pooled = ag::batched_weighted_sum(r.weights, patches);
    return r;
}

Var loss_rt(const Var& s_plain, const Var& patches_pos, const Var& patches_neg, std::size_t tokens, double margin,
            Metric metric) {
    const Var pos = region_attention(s_plain, patches_pos, tokens).pooled;
    const Var neg = region_attention(s_plain, patches_neg, tokens).pooled;
    return loss_trip(s_plain, pos, neg, margin, metric);
}

Var loss_rec(const Var& recon_plain, const Var& recon_delta, const Var& target) {
    if (recon_plain.shape() != target.shape() || recon_delta.shape() != target.shape())
        throw ConfigError("loss_rec: reconstruction " + shape_str(recon_plain.shape()) + " vs target " +
                          shape_str(target.shape()));
    const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(target.cols()));
    auto rms = [&](const Var& r) { return ag::scale(ag::row_norm(ag::sub(target, r)), inv_sqrt_n); };
    return ag::add(ag::mean(rms(recon_plain)), ag::mean(rms(recon_delta)));
}

LossReport loss_total(const BatchBundle& b, const LossWeights& w, const Margins& m, const LossToggles& t,
                      const decoder::Decoder* dec, Metric metric) {
    if (!t.any()) throw ConfigError("every loss is disabled");
    LossReport rep;
    std::vector<std::pair<double, Var>> terms;
    auto need = [](const Var& v, const char* what) {
        if (!v.defined()) throw ConfigError(std::string("batch bundle lacks ") + what);
    };
    auto push = [&](const char* name, double weight, Var v) {
        if (!std::isfinite(v.item())) throw NumericalError(std::string("loss ") + name + " is not finite");
        rep.breakdown[name] = v.item();
        terms.emplace_back(weight, std::move(v));
    };
    need(b.s_plain, "s_plain");
    need(b.p_pos, "p_pos");
    if (t.trip) {
        need(b.p_neg, "p_neg");
        push("trip", w.trip, loss_trip(b.s_plain, b.p_pos, b.p_neg, m.trip, metric));
    }
    if (t.comp) {
        need(b.s_delta, "s_delta");
        push("comp", w.comp, loss_comp(b.s_delta, b.s_plain, b.p_pos, m.comp, metric));
    }
    if (t.reg) {
        need(b.s_delta, "s_delta");
        need(b.s_neutral, "s_neutral");
        push("reg", w.reg, loss_reg(b.s_delta, b.s_neutral, b.p_pos, metric));
    }
    if (t.tt) {
        need(b.s_fixed, "s_fixed");
        push("tt", w.tt, loss_tt(b.s_fixed, b.s_plain));
    }
    if (t.rt) {
        need(b.patches_pos, "patches_pos");
        need(b.patches_neg, "patches_neg");
        push("rt", w.rt, loss_rt(b.s_plain, b.patches_pos, b.patches_neg, b.tokens, m.rt, metric));
    }
    if (t.rec) {
        if (!dec) throw ConfigError("reconstruction loss enabled without a decoder");
        need(b.s_delta, "s_delta");
        need(b.photo_pixels, "photo_pixels");
        push("rec", w.rec, loss_rec(dec->decode(b.s_plain), dec->decode(b.s_delta), b.photo_pixels));
    }
    Var total;
    for (auto& [weight, v] : terms) {
        Var term = ag::scale(v, weight);
        total = total.defined() ? ag::add(total, term) : term;
    }
    rep.total = total;
    return rep;
}

}  // namespace duet::objectives
