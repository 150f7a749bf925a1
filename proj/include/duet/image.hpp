#pragma once
// 8-bit RGB raster I/O (PNG, JPEG) and conversion to encoder input tensors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "duet/tensor.hpp"

namespace duet::image {

struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    Image() = default;
    Image(int w, int h, std::uint8_t fill = 255)
        : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* px(int x, int y) const {
        return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
};

// Sniffs PNG/JPEG from the magic bytes. Throws InputError when undecodable.
Image decode(std::span<const std::uint8_t> bytes);
Image load(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& img);
void save_png(const std::filesystem::path& path, const Image& img);

Image resize_bilinear(const Image& img, int width, int height);
// Longest side at most max_side; never upsamples.
Image thumbnail(const Image& img, int max_side);

struct Normalization {
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> stddev{0.26862954, 0.26130258, 0.27577711};
};

// [3 x size x size], resized and channel-normalized for the vision encoder.
Tensor to_model_input(const Image& img, int size, const Normalization& norm = {});
// [3 x size x size] with values in [0,1]; reconstruction targets.
Tensor to_unit_tensor(const Image& img, int size);

}  // namespace duet::image
