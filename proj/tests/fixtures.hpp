#pragma once
// Small shared builders for tests: a tiny tokenizer/encoder and random images.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "duet/encoder.hpp"
#include "duet/image.hpp"

namespace duet::testing {

inline text::BpeTokenizer tiny_tokenizer() {
    return text::BpeTokenizer::train({"a photo of a shoe", "a sketch of a red chair", "with blue laces",
                                      "with red laces", "in origami", "as a doodle", "a drawing of a circle"},
                                     40);
}

inline encoder::EncoderConfig tiny_config() {
    encoder::EncoderConfig c;
    c.embed_dim = 16;
    c.image_resolution = 16;
    c.patch_size = 8;
    c.vision_width = 16;
    c.vision_layers = 1;
    c.vision_heads = 2;
    c.text_width = 16;
    c.text_layers = 1;
    c.text_heads = 2;
    c.context_length = 16;
    return c;
}

inline encoder::DualEncoder tiny_encoder(std::uint64_t seed = 7) {
    return encoder::DualEncoder(tiny_config(), tiny_tokenizer(), seed);
}

inline Tensor random_image(std::size_t res, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Tensor t({3, res, res});
    for (double& v : t.data) v = nd(rng);
    return t;
}

inline double cosine(const Tensor& a, const Tensor& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "duet") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

}  // namespace duet::testing
