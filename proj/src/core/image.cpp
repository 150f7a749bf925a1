#include "duet/image.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>

#include "duet/errors.hpp"
#include "duet/io.hpp"

namespace duet::image {

namespace {

Image decode_png(std::span<const std::uint8_t> bytes) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
        throw InputError(std::string("undecodable PNG: ") + pi.message);
    pi.format = PNG_FORMAT_RGB;
    Image img(static_cast<int>(pi.width), static_cast<int>(pi.height));
    if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
        png_image_free(&pi);
        throw InputError(std::string("undecodable PNG: ") + pi.message);
    }
    return img;
}

struct JpegErr {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
};

void jpeg_fail(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

Image decode_jpeg(std::span<const std::uint8_t> bytes) {
    jpeg_decompress_struct cinfo;
    JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_fail;
    Image img;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw InputError("undecodable JPEG");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    img = Image(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height));
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

}  // namespace

Image decode(std::span<const std::uint8_t> bytes) {
    static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) return decode_png(bytes);
    if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return decode_jpeg(bytes);
    throw InputError("image is neither PNG nor JPEG");
}

Image load(const std::filesystem::path& path) {
    const auto bytes = io::read_bytes(path);
    try {
        return decode(bytes);
    } catch (const InputError& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, img.rgb.data(), 0, nullptr))
        throw InputError(std::string("PNG encode failed: ") + pi.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, img.rgb.data(), 0, nullptr))
        throw InputError(std::string("PNG encode failed: ") + pi.message);
    out.resize(size);
    return out;
}

void save_png(const std::filesystem::path& path, const Image& img) {
    const auto bytes = encode_png(img);
    io::write_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Image resize_bilinear(const Image& img, int width, int height) {
    if (img.width == width && img.height == height) return img;
    Image out(width, height);
    const double sx = static_cast<double>(img.width) / width;
    const double sy = static_cast<double>(img.height) / height;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * img.px(x0, y0)[c] + wx * img.px(x1, y0)[c]) +
                                 wy * ((1 - wx) * img.px(x0, y1)[c] + wx * img.px(x1, y1)[c]);
                out.px(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

Image thumbnail(const Image& img, int max_side) {
    const int longest = std::max(img.width, img.height);
    if (longest <= max_side) return img;
    const double s = static_cast<double>(max_side) / longest;
    return resize_bilinear(img, std::max(1, static_cast<int>(std::lround(img.width * s))),
                           std::max(1, static_cast<int>(std::lround(img.height * s))));
}

Tensor to_unit_tensor(const Image& img, int size) {
    const Image r = resize_bilinear(img, size, size);
    Tensor t({3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                t.data[c * plane + static_cast<std::size_t>(y) * size + x] = r.px(x, y)[c] / 255.0;
    return t;
}

Tensor to_model_input(const Image& img, int size, const Normalization& norm) {
    Tensor t = to_unit_tensor(img, size);
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            t.data[c * plane + i] = (t.data[c * plane + i] - norm.mean[c]) / norm.stddev[c];
    return t;
}

}  // namespace duet::image
