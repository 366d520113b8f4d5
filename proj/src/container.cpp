#include "vlq/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vlq/error.hpp"

namespace vlq {

namespace {

constexpr char kMagic[4] = {'V', 'L', 'Q', 'T'};
constexpr std::size_t kPreambleSize = 16;

void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::vector<char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

std::uint64_t get_le(const std::vector<char>& in, std::size_t pos, int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
    }
    return v;
}

std::size_t element_size(DType t) { return t == DType::f32 ? 4 : 8; }

const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
    if (s == "f32") {
        return DType::f32;
    }
    if (s == "f64") {
        return DType::f64;
    }
    throw FormatError("unknown tensor dtype '" + s + "'");
}

} // namespace

const NamedTensor& TensorFile::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return t;
        }
    }
    throw FormatError("tensor '" + name + "' missing from " + kind + " file");
}

bool TensorFile::contains(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return true;
        }
    }
    return false;
}

std::vector<char> encode_tensor_file(const TensorFile& file) {
    nlohmann::json header;
    header["format_version"] = file.format_version;
    header["kind"] = file.kind;
    header["metadata"] = file.metadata;
    header["tensors"] = nlohmann::json::array();

    std::vector<char> payload;
    for (const auto& t : file.tensors) {
        if (t.values.size() != t.rows * t.cols) {
            throw DimensionError("tensor '" + t.name + "' value count does not match its shape");
        }
        const std::size_t offset = payload.size();
        for (double v : t.values) {
            if (t.dtype == DType::f32) {
                put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            } else {
                put_u64(payload, std::bit_cast<std::uint64_t>(v));
            }
        }
        header["tensors"].push_back({{"name", t.name},
                                     {"dtype", dtype_name(t.dtype)},
                                     {"shape", {t.rows, t.cols}},
                                     {"offset", offset},
                                     {"nbytes", payload.size() - offset}});
    }

    const std::string text = header.dump();
    std::vector<char> out(kMagic, kMagic + 4);
    put_u32(out, kContainerVersion);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

TensorFile decode_tensor_file(const std::vector<char>& bytes) {
    if (bytes.size() < kPreambleSize || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("not a tensor container (bad magic or too short)");
    }
    const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
    if (version != kContainerVersion) {
        throw FormatError("unsupported container version " + std::to_string(version));
    }
    const std::uint64_t header_len = get_le(bytes, 8, 8);
    if (header_len > bytes.size() - kPreambleSize) {
        throw FormatError("truncated container header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kPreambleSize,
                                       bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleSize + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupted container header: ") + e.what());
    }

    TensorFile file;
    try {
        file.format_version = header.at("format_version").get<int>();
        file.kind = header.at("kind").get<std::string>();
        file.metadata = header.value("metadata", nlohmann::json::object());
        const std::size_t payload_start = kPreambleSize + header_len;
        const std::size_t payload_size = bytes.size() - payload_start;
        std::size_t expected_end = 0;
        for (const auto& entry : header.at("tensors")) {
            NamedTensor t;
            t.name = entry.at("name").get<std::string>();
            t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2) {
                throw FormatError("tensor '" + t.name + "' must be two-dimensional");
            }
            t.rows = shape[0];
            t.cols = shape[1];
            const auto offset = entry.at("offset").get<std::size_t>();
            const auto nbytes = entry.at("nbytes").get<std::size_t>();
            const std::size_t count = t.rows * t.cols;
            if (nbytes != count * element_size(t.dtype)) {
                throw FormatError("tensor '" + t.name + "' byte count does not match its shape");
            }
            if (offset > payload_size || nbytes > payload_size - offset) {
                throw FormatError("truncated container: tensor '" + t.name + "' extends past end of file");
            }
            t.values.resize(count);
            const std::size_t base = payload_start + offset;
            for (std::size_t i = 0; i < count; ++i) {
                if (t.dtype == DType::f32) {
                    t.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, base + 4 * i, 4)));
                } else {
                    t.values[i] = std::bit_cast<double>(get_le(bytes, base + 8 * i, 8));
                }
            }
            expected_end = std::max(expected_end, offset + nbytes);
            file.tensors.push_back(std::move(t));
        }
        if (expected_end != payload_size) {
            throw FormatError("container payload size mismatch (" + std::to_string(payload_size) + " bytes, expected " +
                              std::to_string(expected_end) + ")");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed container header: ") + e.what());
    }
    return file;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
    const auto bytes = encode_tensor_file(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensor_file(bytes);
}

} // namespace vlq
