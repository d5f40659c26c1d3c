#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepatlas/labels.hpp"
#include "deepatlas/tensor.hpp"

namespace deepatlas {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType { float64, float32, int64, int32, uint8 };

/// Decoded .npy payload, little-endian and C-ordered.
struct NpyArray {
    DType dtype = DType::float64;
    Shape shape;
    std::vector<std::uint8_t> bytes;

    Tensor to_tensor() const;
    LabelMap to_labels() const;  // integer dtypes only, values must fit in uint8
};

// NPY v1.0 encoding with a header padded to a 64-byte boundary.
std::string encode_npy(const Tensor& t);           // '<f8'
std::string encode_npy(const LabelMap& labels);    // '|u1', shape = labels.shape
NpyArray decode_npy(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

Tensor load_npy_tensor(const std::filesystem::path& path);
void save_npy(const std::filesystem::path& path, const Tensor& t);
LabelMap load_npy_labels(const std::filesystem::path& path);
void save_npy(const std::filesystem::path& path, const LabelMap& labels);

/// Uncompressed zip archive (the .npz container). Entries keep their order
/// and carry a fixed timestamp so identical content gives identical bytes.
using ArchiveEntries = std::vector<std::pair<std::string, std::string>>;
void write_archive(const std::filesystem::path& path, const ArchiveEntries& entries);
ArchiveEntries read_archive(const std::filesystem::path& path);

}  // namespace deepatlas
