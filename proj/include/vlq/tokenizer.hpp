#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlq {

// Maps text to token ids framed as [start, ..., end]. The end token is always
// kept, so the last position of the sequence carries the text representation.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<int> encode(std::string_view text, std::size_t max_len) const = 0;
    virtual std::size_t vocab_size() const = 0;
    // Serialized description stored in backbone checkpoints.
    virtual nlohmann::json describe() const = 0;
};

// One token per UTF-8 byte (ids 0..255) plus start (256) and end (257).
class ByteTokenizer final : public Tokenizer {
public:
    static constexpr int kStart = 256;
    static constexpr int kEnd = 257;
    static constexpr std::size_t kVocabSize = 258;

    std::vector<int> encode(std::string_view text, std::size_t max_len) const override;
    std::size_t vocab_size() const override { return kVocabSize; }
    nlohmann::json describe() const override { return {{"type", "byte"}}; }
};

// Byte-level BPE compatible with the CLIP "simple tokenizer": lower-cased
// text, whitespace collapsed, pre-split into words, numbers and punctuation
// runs, then merged with the ranked merge list. Non-ASCII bytes are treated
// as letters by the pre-splitter.
class BpeTokenizer final : public Tokenizer {
public:
    // `merges` holds the merge lines exactly as in the CLIP vocabulary file
    // (first line is a version header and is skipped).
    BpeTokenizer(std::vector<std::string> merge_lines, std::filesystem::path source = {});
    static BpeTokenizer from_file(const std::filesystem::path& merges_path, std::size_t max_merges = 48894);

    std::vector<int> encode(std::string_view text, std::size_t max_len) const override;
    std::size_t vocab_size() const override { return vocab_.size(); }
    nlohmann::json describe() const override;

    int start_id() const { return start_id_; }
    int end_id() const { return end_id_; }

    // Symbol strings produced for one pre-split word; exposed for tests.
    std::vector<std::string> bpe(const std::string& word) const;

private:
    std::vector<std::string> byte_symbol_;
    std::unordered_map<std::string, int> vocab_;
    std::map<std::pair<std::string, std::string>, int> ranks_;
    std::filesystem::path source_;
    int start_id_ = 0;
    int end_id_ = 0;
};

// Rebuilds a tokenizer from its describe() record. Relative merge paths are
// resolved against `base_dir`.
std::shared_ptr<const Tokenizer> make_tokenizer(const nlohmann::json& description,
                                                const std::filesystem::path& base_dir = {});

} // namespace vlq
