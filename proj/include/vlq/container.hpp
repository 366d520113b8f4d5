#pragma once

// Named-tensor container shared by backbone and trainable-state checkpoints.
//
// Layout (all integers little-endian):
//   bytes 0..3    magic "VLQT"
//   bytes 4..7    uint32 container version
//   bytes 8..15   uint64 header length H
//   next H bytes  UTF-8 JSON header:
//                   { "format_version": int, "kind": str, "metadata": {...},
//                     "tensors": [ {"name", "dtype": "f32"|"f64", "shape": [r, c],
//                                   "offset", "nbytes"}, ... ] }
//   payload       raw tensor data, offsets relative to the payload start
//
// Files are read fully and validated before any object is returned, so a
// truncated or corrupted file never produces a partial result.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlq/tensor.hpp"

namespace vlq {

enum class DType { f32, f64 };

struct NamedTensor {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    DType dtype = DType::f32;
    // Values widened to double; widening float32 is exact, so round trips stay bit-exact.
    std::vector<double> values;

    template <typename T>
    static NamedTensor from_matrix(std::string name, const Matrix<T>& m, DType dtype) {
        NamedTensor t{std::move(name), m.rows(), m.cols(), dtype, {}};
        t.values.assign(m.flat().begin(), m.flat().end());
        return t;
    }

    template <typename T>
    Matrix<T> to_matrix() const {
        std::vector<T> out(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            out[i] = static_cast<T>(values[i]);
        }
        return Matrix<T>(rows, cols, std::move(out));
    }
};

struct TensorFile {
    std::string kind;
    int format_version = 1;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

// In-memory variants used by the file functions and by corruption tests.
std::vector<char> encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(const std::vector<char>& bytes);

} // namespace vlq
