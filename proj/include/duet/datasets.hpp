#pragma once
// Dataset manifests, training triplet sampling, phrase sets, and the
// procedural shape fixture.
//
// Manifest (JSON, schema_version 1), paths relative to the manifest file
// unless "root" overrides the base directory:
//
//   {"schema_version": 1, "name": "...", "root": ".",
//    "pairs": [{"sketch": "s/0.png", "photo": "p/0.png", "photo_id": "p0",
//               "split": "train"|"test", "caption": "...",
//               "class_label": "...", "domain_label": "...",
//               "objects": [...], "query_objects": [...]}],
//    "photos": [{"id": "...", "photo": "...", ...}],   // gallery-only photos
//    "gallery": ["p0", ...]}                            // optional restriction
//
// photo_id defaults to the photo path. Several sketches may share a photo.

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "duet/image.hpp"
#include "json.hpp"

namespace duet::datasets {

enum class Split { train, test };

std::string split_name(Split s);
Split parse_split(const std::string& s);

struct PhotoMeta {
    std::string id;
    std::string path;  // relative, as written in the manifest
    std::optional<std::string> class_label;
    std::optional<std::string> domain_label;
    std::vector<std::string> objects;
};

struct PairEntry {
    std::string sketch;
    PhotoMeta photo;
    Split split = Split::train;
    std::optional<std::string> caption;
    std::vector<std::string> query_objects;
};

struct SplitStats {
    std::size_t train_pairs = 0;
    std::size_t test_pairs = 0;
    std::size_t train_photos = 0;
    std::size_t test_photos = 0;
};

struct DatasetManifest {
    int schema_version = 1;
    std::string name;
    std::string root = ".";
    std::filesystem::path base_dir;  // resolved directory paths are relative to
    std::vector<PairEntry> pairs;
    std::vector<PhotoMeta> photos;
    std::optional<std::vector<std::string>> gallery;

    std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }

    std::vector<std::size_t> split_indices(Split s) const;
    // Retrieval candidates for queries from split s, sorted by id: the
    // explicit gallery list when present, else the split's pair photos plus
    // every gallery-only photo.
    std::vector<PhotoMeta> gallery_photos(Split s) const;
    SplitStats stats() const;
};

// Parses and validates. check_files verifies every referenced file exists.
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                   bool check_files = true);
nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

// ---- training batches ------------------------------------------------------

struct Triplet {
    std::size_t anchor;    // pair index (sketch + positive photo)
    std::size_t negative;  // pair index whose photo is the negative
};

// Negatives come from the other members of the batch with a different
// photo id; a batch with a single photo identity draws from the whole split.
std::vector<Triplet> make_triplets(const DatasetManifest& m, const std::vector<std::size_t>& anchors,
                                   std::mt19937_64& rng);

// b anchors drawn without replacement from the train split (with
// replacement and a warning when b exceeds its size).
std::vector<Triplet> train_batch(const DatasetManifest& m, std::size_t b, std::uint64_t seed);

// One epoch: a seeded permutation of the train split cut into batches.
std::vector<std::vector<Triplet>> epoch_batches(const DatasetManifest& m, std::size_t b, std::uint64_t seed);

// Decoded and preprocessed images, cached by path. Loading the same file
// twice yields identical tensors.
class ImageCache {
public:
    ImageCache(int model_size, int pixel_size) : model_size_(model_size), pixel_size_(pixel_size) {}
    const Tensor& model_input(const std::filesystem::path& p);
    const Tensor& unit_pixels(const std::filesystem::path& p);

private:
    const image::Image& raw(const std::filesystem::path& p);
    int model_size_;
    int pixel_size_;
    std::map<std::string, image::Image> raw_;
    std::map<std::string, Tensor> model_;
    std::map<std::string, Tensor> unit_;
};

// ---- phrase sets -----------------------------------------------------------

enum class PhraseKind { neutral_text, handcrafted_prompt, connecting_word };

PhraseKind parse_phrase_kind(const std::string& s);

struct PhraseSet {
    PhraseKind kind;
    std::vector<std::string> phrases;

    // Throws ConfigError on an empty set or, for neutral text, phrases
    // outside 1-5 words.
    void validate() const;
    const std::string& sample(std::mt19937_64& rng) const;

    static PhraseSet load(PhraseKind kind, const std::filesystem::path& path);
    // The shipped list under the data directory.
    static PhraseSet shipped(PhraseKind kind);
};

std::filesystem::path data_dir();

// ---- procedural fixture ----------------------------------------------------

enum class ShapeKind { circle, square, triangle, diamond, cross };
enum class Style { photo, sketch };

struct Geometry {
    ShapeKind shape = ShapeKind::circle;
    int position = 0;  // 0 top left, 1 top right, 2 bottom left, 3 bottom right
    int size = 0;      // 0 small, 1 large
};

struct ColorName {
    const char* name;
    std::uint8_t r, g, b;
};

const std::vector<ColorName>& fixture_colors();
const std::vector<Geometry>& fixture_geometries();  // 40 distinct geometries
std::string shape_name(ShapeKind s);
std::string position_name(int position);
std::string size_name(int size);

// Renders a shape at side x side pixels. Sketch style: dark outline on white
// with hand-drawn wobble. Photo style: filled colour on a tinted background.
image::Image render_shape(const Geometry& g, const ColorName& color, Style style, int side, std::mt19937_64& rng);

struct FixtureSummary {
    std::filesystem::path main_manifest;       // 32 train + 8 test pairs
    std::filesystem::path ambiguous_manifest;  // one geometry in every colour
};

// Writes PNGs and manifests under out_dir.
FixtureSummary make_fixture(const std::filesystem::path& out_dir, std::uint64_t seed, int side = 64);

}  // namespace duet::datasets
