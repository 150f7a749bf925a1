#include <spdlog/spdlog.h>

#include <algorithm>
#include <sstream>

#include "duet/errors.hpp"
#include "duet/io.hpp"
#include "duet/retrieval.hpp"

namespace duet::retrieval {

using nlohmann::json;

Protocol parse_protocol(const std::string& s) {
    if (s == "fine_grained") return Protocol::fine_grained;
    if (s == "scene") return Protocol::scene;
    if (s == "domain_transfer") return Protocol::domain_transfer;
    throw ConfigError("unknown protocol: " + s + " (fine_grained, scene, domain_transfer)");
}

std::string protocol_name(Protocol p) {
    switch (p) {
        case Protocol::fine_grained: return "fine_grained";
        case Protocol::scene: return "scene";
        case Protocol::domain_transfer: return "domain_transfer";
    }
    return "?";
}

std::string caption_query(const std::string& caption, const std::vector<std::string>& connectors) {
    std::istringstream in(caption);
    std::string first;
    in >> first;
    std::transform(first.begin(), first.end(), first.begin(), [](unsigned char c) { return std::tolower(c); });
    if (std::find(connectors.begin(), connectors.end(), first) != connectors.end()) return caption;
    return "with " + caption;
}

bool contains_all(const std::vector<std::string>& photo_objects, const std::vector<std::string>& query_objects) {
    for (const auto& q : query_objects)
        if (std::find(photo_objects.begin(), photo_objects.end(), q) == photo_objects.end()) return false;
    return true;
}

json EvalReport::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
        json row{{"sketch", r.sketch}, {"query_text", r.query_text}, {"top", r.top}};
        if (!r.truth.empty()) {
            row["truth"] = r.truth;
            row["truth_rank"] = r.truth_rank;
        }
        rows_j.push_back(std::move(row));
    }
    return json{{"protocol", protocol_name(protocol)},
                {"metrics", metrics},
                {"queries", queries},
                {"gallery", gallery},
                {"per_query", std::move(rows_j)}};
}

namespace {

std::string metric_key(const char* name, std::size_t q) {
    std::ostringstream s;
    s << name << "@" << q;
    return s.str();
}

}  // namespace

EvalReport evaluate(Protocol protocol, const datasets::DatasetManifest& m, const encoder::DualEncoder& enc,
                    const composer::Composer& comp, const EvalOptions& opts) {
    const auto queries = m.split_indices(opts.split);
    if (queries.empty()) throw ProtocolError("no " + datasets::split_name(opts.split) + " pairs to evaluate");
    const auto photos = m.gallery_photos(opts.split);

    // Protocol metadata checks, listing every absent field.
    std::vector<std::string> missing;
    if (protocol == Protocol::scene) {
        for (std::size_t i : queries)
            if (m.pairs[i].query_objects.empty() && !m.pairs[i].photo.class_label)
                missing.push_back("pairs[" + std::to_string(i) + "].query_objects");
        for (const auto& p : photos)
            if (p.objects.empty()) missing.push_back("photo " + p.id + ".objects");
    } else if (protocol == Protocol::domain_transfer) {
        for (std::size_t i : queries) {
            if (!m.pairs[i].photo.class_label) missing.push_back("pairs[" + std::to_string(i) + "].class_label");
            if (!m.pairs[i].photo.domain_label) missing.push_back("pairs[" + std::to_string(i) + "].domain_label");
        }
        for (const auto& p : photos) {
            if (!p.class_label) missing.push_back("photo " + p.id + ".class_label");
            if (!p.domain_label) missing.push_back("photo " + p.id + ".domain_label");
        }
    }
    if (!missing.empty()) {
        std::string msg = protocol_name(protocol) + " protocol lacks:";
        for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) msg += " " + missing[i];
        if (missing.size() > 20) msg += " ... (" + std::to_string(missing.size()) + " total)";
        throw ProtocolError(msg);
    }

    const GalleryIndex index = build_index(photos, m, enc, "");
    const int res = static_cast<int>(enc.config().image_resolution);
    datasets::ImageCache cache(res, res);

    EvalReport rep;
    rep.protocol = protocol;
    rep.gallery = index.size();
    std::vector<RetrievalResult> results;
    std::vector<std::string> truths;
    std::vector<std::set<std::string>> relevant;
    for (std::size_t qi : queries) {
        const auto& pair = m.pairs[qi];
        std::optional<std::string> text;
        std::optional<std::string> connector = std::string();  // text below already carries its connector
        if (protocol == Protocol::domain_transfer) {
            text = "in " + *pair.photo.domain_label;
        } else if (opts.use_text && pair.caption && !pair.caption->empty()) {
            text = caption_query(*pair.caption, opts.connectors);
        }
        const Tensor q = composer::build_inference_query(enc, comp, cache.model_input(m.resolve(pair.sketch)), text,
                                                         connector, opts.connectors);
        RetrievalResult r = rank(index, q, index.size());
        r.echo.text = text;

        EvalReport::Row row;
        row.sketch = pair.sketch;
        row.query_text = text.value_or("");
        for (std::size_t i = 0; i < std::min<std::size_t>(10, r.ids.size()); ++i) row.top.push_back(r.ids[i]);

        std::set<std::string> rel;
        if (protocol == Protocol::fine_grained) {
            rel.insert(pair.photo.id);
        } else if (protocol == Protocol::scene) {
            auto want = pair.query_objects;
            if (want.empty()) want.push_back(*pair.photo.class_label);
            for (std::size_t i = 0; i < index.size(); ++i)
                if (contains_all(index.meta[i].objects, want)) rel.insert(index.ids[i]);
        } else {
            for (std::size_t i = 0; i < index.size(); ++i)
                if (index.meta[i].class_label == pair.photo.class_label &&
                    index.meta[i].domain_label == pair.photo.domain_label)
                    rel.insert(index.ids[i]);
        }
        if (protocol != Protocol::domain_transfer) {
            row.truth = pair.photo.id;
            if (!index.find(pair.photo.id)) spdlog::warn("truth photo {} is not in the gallery; counted as a miss", pair.photo.id);
            for (std::size_t i = 0; i < r.ids.size(); ++i)
                if (r.ids[i] == pair.photo.id) row.truth_rank = i + 1;
        }
        truths.push_back(pair.photo.id);
        relevant.push_back(std::move(rel));
        results.push_back(std::move(r));
        rep.rows.push_back(std::move(row));
    }
    rep.queries = results.size();
    if (protocol == Protocol::domain_transfer) {
        for (std::size_t q : {10, 50}) rep.metrics[metric_key("r", q)] = recall_at_q(results, relevant, q);
    } else {
        for (std::size_t q : {1, 5, 10}) rep.metrics[metric_key("acc", q)] = acc_at_q(results, relevant, q);
    }
    return rep;
}

}  // namespace duet::retrieval
