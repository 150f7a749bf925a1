#pragma once
// Gallery index, exhaustive cosine ranking, Acc@q / r@q, and the three
// evaluation protocols.
//
// On disk an index is a directory with features.bin (N x d little-endian
// float64, row-major) and index.json (ids, dims, fingerprint, metadata).

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "duet/composer.hpp"
#include "duet/datasets.hpp"
#include "duet/encoder.hpp"
#include "json.hpp"

namespace duet::retrieval {

struct GalleryIndex {
    std::vector<std::string> ids;
    Tensor features;  // [N x d], unit rows
    std::vector<datasets::PhotoMeta> meta;
    std::vector<std::string> paths;  // resolved image paths
    std::string fingerprint;
    std::string backbone_id;

    std::size_t size() const { return ids.size(); }
    std::size_t dim() const { return features.cols(); }
    std::optional<std::size_t> find(const std::string& id) const;

    void save(const std::filesystem::path& dir) const;
    static GalleryIndex load(const std::filesystem::path& dir);
};

struct BuildReport {
    std::vector<std::string> skipped;  // unreadable images
};

// One encode_image per photo; rows normalized; sorted by id.
GalleryIndex build_index(const std::vector<datasets::PhotoMeta>& photos, const datasets::DatasetManifest& m,
                         const encoder::DualEncoder& enc, const std::string& fingerprint,
                         BuildReport* report = nullptr);

struct QueryEcho {
    std::string sketch_sha256;
    std::optional<std::string> text;
    std::optional<std::string> connector;
};

struct RetrievalResult {
    std::vector<std::string> ids;
    std::vector<double> scores;
    QueryEcho echo;
};

// Top-k rows by cosine similarity to query (normalized internally); ties by
// ascending id. k > N returns all N with a warning.
RetrievalResult rank(const GalleryIndex& index, const Tensor& query, std::size_t k);

// Throws FingerprintMismatch when the index was built by another model.
void check_fingerprint(const GalleryIndex& index, const std::string& model_fingerprint);

// Percentage of queries whose truth is within the first q ranks.
double acc_at_q(const std::vector<RetrievalResult>& results, const std::vector<std::string>& truths, std::size_t q);
// Same, with any member of a relevance set counting as a hit.
double acc_at_q(const std::vector<RetrievalResult>& results, const std::vector<std::set<std::string>>& relevant,
                std::size_t q);
// Mean over queries of |top-q intersect relevant| / |relevant|; empty
// relevance sets are skipped with a warning.
double recall_at_q(const std::vector<RetrievalResult>& results,
                   const std::vector<std::set<std::string>>& relevance, std::size_t q);

enum class Protocol { fine_grained, scene, domain_transfer };
Protocol parse_protocol(const std::string& s);
std::string protocol_name(Protocol p);

struct EvalOptions {
    datasets::Split split = datasets::Split::test;
    bool use_text = true;  // false: sketch-only queries
    std::vector<std::string> connectors;
};

struct EvalReport {
    Protocol protocol = Protocol::fine_grained;
    std::map<std::string, double> metrics;
    std::size_t queries = 0;
    std::size_t gallery = 0;
    struct Row {
        std::string sketch;
        std::string query_text;
        std::string truth;  // fine-grained / scene: truth photo id
        std::size_t truth_rank = 0;  // 1-based, 0 when absent
        std::vector<std::string> top;
    };
    std::vector<Row> rows;

    nlohmann::json to_json() const;
};

// Query text for a pair caption: captions that already begin with a
// connecting word are used verbatim, others get "with" in front.
std::string caption_query(const std::string& caption, const std::vector<std::string>& connectors);

EvalReport evaluate(Protocol protocol, const datasets::DatasetManifest& m, const encoder::DualEncoder& enc,
                    const composer::Composer& comp, const EvalOptions& opts);

// Scene relevance: every queried object is present in the photo.
bool contains_all(const std::vector<std::string>& photo_objects, const std::vector<std::string>& query_objects);

}  // namespace duet::retrieval
