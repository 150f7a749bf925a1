#include "duet/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "duet/errors.hpp"
#include "json.hpp"

namespace duet::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ffu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

}  // namespace

TensorArchive read_safetensors(const fs::path& path) {
    const auto bytes = read_bytes(path);
    if (bytes.size() < 8) throw LoadError("truncated safetensors file: " + path.string());
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes[static_cast<std::size_t>(i)];
    if (8 + header_len > bytes.size()) throw LoadError("corrupt safetensors header: " + path.string());
    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len));
    } catch (const json::exception& e) {
        throw LoadError("unparseable safetensors header in " + path.string() + ": " + e.what());
    }
    const std::uint8_t* base = bytes.data() + 8 + header_len;
    const std::size_t payload = bytes.size() - 8 - header_len;

    TensorArchive out;
    for (auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            for (auto& [k, v] : info.items()) out.metadata[k] = v.get<std::string>();
            continue;
        }
        const std::string dtype = info.at("dtype");
        Shape shape = info.at("shape").get<Shape>();
        const auto offsets = info.at("data_offsets").get<std::vector<std::size_t>>();
        if (offsets.size() != 2 || offsets[1] > payload || offsets[0] > offsets[1])
            throw LoadError("bad offsets for tensor " + name + " in " + path.string());
        const std::uint8_t* src = base + offsets[0];
        const std::size_t count = shape_numel(shape) == 0 && shape.empty() ? 1 : shape_numel(shape);
        if (shape.empty()) shape = {1};
        std::vector<double> values(count);
        std::size_t width = 0;
        if (dtype == "F64") {
            width = 8;
            for (std::size_t i = 0; i < count; ++i) std::memcpy(&values[i], src + 8 * i, 8);
        } else if (dtype == "F32") {
            width = 4;
            for (std::size_t i = 0; i < count; ++i) {
                float f;
                std::memcpy(&f, src + 4 * i, 4);
                values[i] = f;
            }
        } else if (dtype == "F16" || dtype == "BF16") {
            width = 2;
            for (std::size_t i = 0; i < count; ++i) {
                std::uint16_t h;
                std::memcpy(&h, src + 2 * i, 2);
                values[i] = dtype == "F16" ? half_to_float(h)
                                           : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
            }
        } else {
            throw LoadError("unsupported dtype " + dtype + " for tensor " + name);
        }
        if (offsets[1] - offsets[0] != width * count)
            throw LoadError("size mismatch for tensor " + name + " in " + path.string());
        out.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
    }
    return out;
}

void write_safetensors(const fs::path& path, const TensorArchive& archive, DType dtype) {
    json header = json::object();
    const std::size_t width = dtype == DType::f64 ? 8 : 4;
    std::size_t offset = 0;
    for (const auto& [name, t] : archive.tensors) {
        header[name] = {{"dtype", dtype == DType::f64 ? "F64" : "F32"},
                        {"shape", t.shape},
                        {"data_offsets", {offset, offset + width * t.size()}}};
        offset += width * t.size();
    }
    if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
    std::string h = header.dump();
    while ((8 + h.size()) % 8 != 0) h.push_back(' ');

    std::string buf;
    buf.reserve(8 + h.size() + offset);
    std::uint64_t len = h.size();
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    buf += h;
    for (const auto& [name, t] : archive.tensors) {
        for (double v : t.data) {
            char tmp[8];
            if (dtype == DType::f64) {
                std::memcpy(tmp, &v, 8);
            } else {
                const float f = static_cast<float>(v);
                std::memcpy(tmp, &f, 4);
            }
            buf.append(tmp, width);
        }
    }
    write_atomic(path, buf);
}

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    EVP_Digest(data, size, md, &md_len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < md_len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string fingerprint(const std::map<std::string, Tensor>& tensors) {
    std::string buf;
    for (const auto& [name, t] : tensors) {
        buf += name;
        buf += shape_str(t.shape);
        buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
    }
    return sha256_hex(buf);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    const std::string s = read_text(path);
    return {s.begin(), s.end()};
}

void write_atomic(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw LoadError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        out.push_back(line.substr(b, e - b + 1));
    }
    return out;
}

}  // namespace duet::io
