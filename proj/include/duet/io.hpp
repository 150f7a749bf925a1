#pragma once
// File formats shared across modules: safetensors tensor archives, SHA-256
// fingerprints and atomic file publication.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "duet/tensor.hpp"

namespace duet::io {

enum class DType { f32, f64 };

struct TensorArchive {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

// Reads F32/F64/F16/BF16 tensors; everything is widened to double.
TensorArchive read_safetensors(const std::filesystem::path& path);
void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive,
                       DType dtype = DType::f64);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& s);

// Hash over names, shapes and values of the given tensors in key order.
std::string fingerprint(const std::map<std::string, Tensor>& tensors);

std::string read_text(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// Writes to a sibling temporary and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

// Non-empty, trimmed lines of a UTF-8 text file.
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace duet::io
