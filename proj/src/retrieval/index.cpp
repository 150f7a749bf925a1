#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "duet/errors.hpp"
#include "duet/image.hpp"
#include "duet/io.hpp"
#include "duet/retrieval.hpp"
#include "duet/simd.hpp"

namespace duet::retrieval {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<std::size_t> GalleryIndex::find(const std::string& id) const {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
}

namespace {

json meta_json(const datasets::PhotoMeta& p) {
    json j{{"id", p.id}, {"photo", p.path}};
    if (p.class_label) j["class_label"] = *p.class_label;
    if (p.domain_label) j["domain_label"] = *p.domain_label;
    if (!p.objects.empty()) j["objects"] = p.objects;
    return j;
}

datasets::PhotoMeta meta_from(const json& j) {
    datasets::PhotoMeta p;
    p.id = j.at("id");
    p.path = j.at("photo");
    if (j.contains("class_label")) p.class_label = j.at("class_label").get<std::string>();
    if (j.contains("domain_label")) p.domain_label = j.at("domain_label").get<std::string>();
    if (j.contains("objects")) p.objects = j.at("objects").get<std::vector<std::string>>();
    return p;
}

}  // namespace

void GalleryIndex::save(const fs::path& dir) const {
    fs::create_directories(dir);
    std::string bin(features.size() * sizeof(double), '\0');
    std::memcpy(bin.data(), features.data.data(), bin.size());
    json meta_arr = json::array();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        json m = meta_json(meta[i]);
        m["path"] = fs::absolute(paths[i]).string();
        meta_arr.push_back(std::move(m));
    }
    json side{{"format", "duet-index"},
              {"version", 1},
              {"rows", ids.size()},
              {"dim", dim()},
              {"dtype", "float64"},
              {"fingerprint", fingerprint},
              {"backbone_id", backbone_id},
              {"features_sha256", io::sha256_hex(bin)},
              {"ids", ids},
              {"meta", meta_arr}};
    // features first, sidecar last: a reader never sees a sidecar without data.
    io::write_atomic(dir / "features.bin", bin);
    io::write_atomic(dir / "index.json", side.dump(1) + "\n");
}

GalleryIndex GalleryIndex::load(const fs::path& dir) {
    json side;
    try {
        side = json::parse(io::read_text(dir / "index.json"));
    } catch (const json::parse_error& e) {
        throw LoadError("unparseable index sidecar in " + dir.string() + ": " + e.what());
    }
    GalleryIndex idx;
    const std::size_t rows = side.at("rows"), dim = side.at("dim");
    const std::string bin = io::read_text(dir / "features.bin");
    if (bin.size() != rows * dim * sizeof(double)) throw LoadError("features.bin size does not match index.json");
    if (side.value("features_sha256", io::sha256_hex(bin)) != io::sha256_hex(bin))
        throw LoadError("features.bin checksum mismatch in " + dir.string());
    idx.ids = side.at("ids").get<std::vector<std::string>>();
    idx.features = Tensor({rows, dim});
    std::memcpy(idx.features.data.data(), bin.data(), bin.size());
    idx.fingerprint = side.at("fingerprint");
    idx.backbone_id = side.value("backbone_id", std::string());
    for (const auto& m : side.at("meta")) {
        idx.meta.push_back(meta_from(m));
        idx.paths.push_back(m.at("path").get<std::string>());
    }
    if (idx.ids.size() != rows || idx.meta.size() != rows) throw LoadError("index.json row count mismatch");
    return idx;
}

GalleryIndex build_index(const std::vector<datasets::PhotoMeta>& photos, const datasets::DatasetManifest& m,
                         const encoder::DualEncoder& enc, const std::string& fingerprint, BuildReport* report) {
    std::vector<datasets::PhotoMeta> sorted = photos;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i].id == sorted[i - 1].id) throw ValidationError("duplicate gallery id " + sorted[i].id);
    GalleryIndex idx;
    idx.fingerprint = fingerprint;
    idx.backbone_id = enc.config().backbone_id;
    std::vector<double> rows;
    const int res = static_cast<int>(enc.config().image_resolution);
    for (const auto& p : sorted) {
        const fs::path path = m.resolve(p.path);
        Tensor input;
        try {
            input = image::to_model_input(image::load(path), res);
        } catch (const Error& e) {
            spdlog::warn("skipping gallery photo {}: {}", p.id, e.what());
            if (report) report->skipped.push_back(p.id);
            continue;
        }
        Tensor g = enc.encode_image(input, encoder::SourceKind::photo).global;
        double n = 0;
        for (double v : g.data) n += v * v;
        n = std::sqrt(n);
        for (double v : g.data) rows.push_back(v / n);
        idx.ids.push_back(p.id);
        idx.meta.push_back(p);
        idx.paths.push_back(path.string());
    }
    idx.features = Tensor({idx.ids.size(), enc.config().embed_dim}, std::move(rows));
    return idx;
}

void check_fingerprint(const GalleryIndex& index, const std::string& model_fingerprint) {
    if (index.fingerprint != model_fingerprint)
        throw FingerprintMismatch("index fingerprint " + index.fingerprint.substr(0, 12) +
                                  " does not match model " + model_fingerprint.substr(0, 12));
}

RetrievalResult rank(const GalleryIndex& index, const Tensor& query, std::size_t k) {
    if (query.size() != index.dim())
        throw ConfigError("query width " + std::to_string(query.size()) + " != index width " + std::to_string(index.dim()));
    const std::size_t n = index.size();
    if (k > n) {
        spdlog::warn("k = {} exceeds gallery size {}; returning all", k, n);
        k = n;
    }
    double qn = std::sqrt(std::inner_product(query.data.begin(), query.data.end(), query.data.begin(), 0.0));
    if (qn == 0.0) throw InputError("query vector is zero");
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) score[i] = simd::dot(index.features.row(i), query.data) / qn;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // ids are sorted, so index order breaks ties by ascending id.
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
    RetrievalResult r;
    for (std::size_t i = 0; i < k; ++i) {
        r.ids.push_back(index.ids[order[i]]);
        r.scores.push_back(score[order[i]]);
    }
    return r;
}

double acc_at_q(const std::vector<RetrievalResult>& results, const std::vector<std::set<std::string>>& relevant,
                std::size_t q) {
    if (results.size() != relevant.size()) throw ConfigError("acc_at_q: results and truths differ in length");
    if (results.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& ids = results[i].ids;
        const std::size_t lim = std::min(q, ids.size());
        for (std::size_t r = 0; r < lim; ++r)
            if (relevant[i].count(ids[r])) {
                ++hits;
                break;
            }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

double acc_at_q(const std::vector<RetrievalResult>& results, const std::vector<std::string>& truths, std::size_t q) {
    std::vector<std::set<std::string>> sets;
    for (const auto& t : truths) sets.push_back({t});
    return acc_at_q(results, sets, q);
}

double recall_at_q(const std::vector<RetrievalResult>& results, const std::vector<std::set<std::string>>& relevance,
                   std::size_t q) {
    if (results.size() != relevance.size()) throw ConfigError("recall_at_q: results and relevance differ in length");
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (relevance[i].empty()) {
            spdlog::warn("query {} has no relevant items; excluded from recall", i);
            continue;
        }
        std::size_t hit = 0;
        const std::size_t lim = std::min(q, results[i].ids.size());
        for (std::size_t r = 0; r < lim; ++r) hit += relevance[i].count(results[i].ids[r]);
        sum += static_cast<double>(hit) / static_cast<double>(relevance[i].size());
        ++used;
    }
    return used ? sum / static_cast<double>(used) : 0.0;
}

}  // namespace duet::retrieval
