#include <algorithm>
#include <map>
#include <set>

#include "duet/datasets.hpp"
#include "duet/errors.hpp"
#include "duet/io.hpp"

namespace duet::datasets {

namespace fs = std::filesystem;
using nlohmann::json;

std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split \"" + s + "\" (expected train or test)");
}

namespace {

std::optional<std::string> opt_str(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
}

std::vector<std::string> str_list(const json& j, const char* key) {
    if (!j.contains(key)) return {};
    return j.at(key).get<std::vector<std::string>>();
}

void put_photo_fields(json& out, const PhotoMeta& p) {
    if (p.class_label) out["class_label"] = *p.class_label;
    if (p.domain_label) out["domain_label"] = *p.domain_label;
    if (!p.objects.empty()) out["objects"] = p.objects;
}

}  // namespace

DatasetManifest manifest_from_json(const json& j, const fs::path& base_dir, bool check_files) {
    DatasetManifest m;
    try {
        m.schema_version = j.value("schema_version", 1);
        if (m.schema_version != 1)
            throw ValidationError("unsupported manifest schema_version " + std::to_string(m.schema_version));
        m.name = j.value("name", std::string());
        m.root = j.value("root", std::string("."));
        m.base_dir = base_dir / m.root;
        for (const auto& e : j.at("pairs")) {
            PairEntry p;
            p.sketch = e.at("sketch").get<std::string>();
            p.photo.path = e.at("photo").get<std::string>();
            p.photo.id = e.value("photo_id", p.photo.path);
            p.photo.class_label = opt_str(e, "class_label");
            p.photo.domain_label = opt_str(e, "domain_label");
            p.photo.objects = str_list(e, "objects");
            p.split = parse_split(e.value("split", std::string("train")));
            p.caption = opt_str(e, "caption");
            p.query_objects = str_list(e, "query_objects");
            m.pairs.push_back(std::move(p));
        }
        if (j.contains("photos"))
            for (const auto& e : j.at("photos")) {
                PhotoMeta p;
                p.path = e.at("photo").get<std::string>();
                p.id = e.value("id", p.path);
                p.class_label = opt_str(e, "class_label");
                p.domain_label = opt_str(e, "domain_label");
                p.objects = str_list(e, "objects");
                m.photos.push_back(std::move(p));
            }
        if (j.contains("gallery")) m.gallery = j.at("gallery").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed manifest: ") + e.what());
    }

    if (m.pairs.empty()) throw ValidationError("manifest has no pairs");
    // Photo identity: one path per id, and never in both splits.
    std::map<std::string, std::string> id_path;
    std::map<std::string, std::set<Split>> id_splits;
    auto note = [&](const PhotoMeta& p) {
        auto [it, fresh] = id_path.emplace(p.id, p.path);
        if (!fresh && it->second != p.path)
            throw ValidationError("photo id \"" + p.id + "\" refers to two files: " + it->second + ", " + p.path);
    };
    for (const auto& p : m.pairs) {
        note(p.photo);
        id_splits[p.photo.id].insert(p.split);
    }
    for (const auto& p : m.photos) {
        note(p);
        if (id_splits.count(p.id)) throw ValidationError("gallery photo \"" + p.id + "\" is also a pair photo");
    }
    for (const auto& [id, splits] : id_splits)
        if (splits.size() > 1) throw ValidationError("photo \"" + id + "\" appears in both train and test splits");
    if (m.gallery)
        for (const auto& id : *m.gallery)
            if (!id_path.count(id)) throw ValidationError("gallery id \"" + id + "\" is not a known photo");

    if (check_files) {
        auto check = [&](const std::string& rel) {
            if (!fs::exists(m.resolve(rel))) throw LoadError("manifest references missing file: " + m.resolve(rel).string());
        };
        for (const auto& p : m.pairs) {
            check(p.sketch);
            check(p.photo.path);
        }
        for (const auto& p : m.photos) check(p.path);
    }
    return m;
}

json manifest_to_json(const DatasetManifest& m) {
    json j;
    j["schema_version"] = m.schema_version;
    j["name"] = m.name;
    j["root"] = m.root;
    json pairs = json::array();
    for (const auto& p : m.pairs) {
        json e{{"sketch", p.sketch}, {"photo", p.photo.path}, {"photo_id", p.photo.id}, {"split", split_name(p.split)}};
        if (p.caption) e["caption"] = *p.caption;
        put_photo_fields(e, p.photo);
        if (!p.query_objects.empty()) e["query_objects"] = p.query_objects;
        pairs.push_back(std::move(e));
    }
    j["pairs"] = std::move(pairs);
    if (!m.photos.empty()) {
        json photos = json::array();
        for (const auto& p : m.photos) {
            json e{{"id", p.id}, {"photo", p.path}};
            put_photo_fields(e, p);
            photos.push_back(std::move(e));
        }
        j["photos"] = std::move(photos);
    }
    if (m.gallery) j["gallery"] = *m.gallery;
    return j;
}

DatasetManifest load_manifest(const fs::path& path, bool check_files) {
    json j;
    try {
        j = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw LoadError("cannot parse manifest " + path.string() + ": " + e.what());
    }
    return manifest_from_json(j, path.parent_path(), check_files);
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
    io::write_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

std::vector<std::size_t> DatasetManifest::split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        if (pairs[i].split == s) out.push_back(i);
    return out;
}

std::vector<PhotoMeta> DatasetManifest::gallery_photos(Split s) const {
    std::map<std::string, PhotoMeta> all;
    for (const auto& p : pairs)
        if (gallery || p.split == s) all.emplace(p.photo.id, p.photo);
    for (const auto& p : photos) all.emplace(p.id, p);
    std::vector<PhotoMeta> out;
    if (gallery) {
        for (const auto& id : *gallery) out.push_back(all.at(id));
        std::sort(out.begin(), out.end(), [](const PhotoMeta& a, const PhotoMeta& b) { return a.id < b.id; });
        out.erase(std::unique(out.begin(), out.end(), [](const PhotoMeta& a, const PhotoMeta& b) { return a.id == b.id; }),
                  out.end());
    } else {
        for (auto& [id, p] : all) out.push_back(p);
    }
    return out;
}

SplitStats DatasetManifest::stats() const {
    SplitStats s;
    std::set<std::string> tr, te;
    for (const auto& p : pairs) {
        if (p.split == Split::train) {
            ++s.train_pairs;
            tr.insert(p.photo.id);
        } else {
            ++s.test_pairs;
            te.insert(p.photo.id);
        }
    }
    s.train_photos = tr.size();
    s.test_photos = te.size();
    return s;
}

}  // namespace duet::datasets
