#include "vlq/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>

#include "vlq/error.hpp"

namespace vlq {

namespace {

std::vector<int> frame(std::vector<int> body, int start, int end, std::size_t max_len) {
    if (max_len < 2) {
        throw ConfigError("tokenizer: max_len must allow start and end tokens");
    }
    std::vector<int> ids;
    ids.reserve(body.size() + 2);
    ids.push_back(start);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(end);
    if (ids.size() > max_len) {
        ids.resize(max_len);
        ids.back() = end;
    }
    return ids;
}

std::string utf8(unsigned cp) {
    std::string s;
    if (cp < 0x80) {
        s += static_cast<char>(cp);
    } else if (cp < 0x800) {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        s += static_cast<char>(0xE0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return s;
}

// Byte order used by the CLIP vocabulary: printable Latin-1 ranges first,
// then the remaining bytes mapped to code points from 256 upward.
std::vector<std::pair<unsigned, unsigned>> byte_order() {
    std::vector<unsigned> bs;
    for (unsigned b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (unsigned b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (unsigned b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<std::pair<unsigned, unsigned>> order;
    for (unsigned b : bs) order.emplace_back(b, b);
    unsigned n = 0;
    for (unsigned b = 0; b < 256; ++b) {
        if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
            order.emplace_back(b, 256 + n);
            ++n;
        }
    }
    return order;
}

// Splits a UTF-8 string into code-point strings.
std::vector<std::string> utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if (c >= 0xF0) len = 4;
        else if (c >= 0xE0) len = 3;
        else if (c >= 0xC0) len = 2;
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }
bool is_digit(unsigned char c) { return std::isdigit(c) != 0; }
bool is_space(unsigned char c) { return std::isspace(c) != 0; }

std::vector<std::string> pre_split(const std::string& text) {
    static const char* const kSpecial[] = {"<|startoftext|>", "<|endoftext|>"};
    static const char* const kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_space(c)) {
            ++i;
            continue;
        }
        bool matched = false;
        for (const char* sp : kSpecial) {
            const std::string_view s(sp);
            if (text.compare(i, s.size(), s) == 0) {
                words.emplace_back(s);
                i += s.size();
                matched = true;
                break;
            }
        }
        if (!matched && c == '\'') {
            for (const char* ct : kContractions) {
                const std::string_view s(ct);
                if (text.compare(i, s.size(), s) == 0) {
                    words.emplace_back(s);
                    i += s.size();
                    matched = true;
                    break;
                }
            }
        }
        if (matched) {
            continue;
        }
        std::size_t j = i + 1;
        if (is_letter(c)) {
            while (j < text.size() && is_letter(static_cast<unsigned char>(text[j]))) ++j;
        } else if (!is_digit(c)) {
            while (j < text.size()) {
                const auto d = static_cast<unsigned char>(text[j]);
                if (is_space(d) || is_letter(d) || is_digit(d)) break;
                ++j;
            }
        }
        words.push_back(text.substr(i, j - i));
        i = j;
    }
    return words;
}

std::string clean(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

} // namespace

std::vector<int> ByteTokenizer::encode(std::string_view text, std::size_t max_len) const {
    std::vector<int> body;
    body.reserve(text.size());
    for (char c : text) {
        body.push_back(static_cast<unsigned char>(c));
    }
    return frame(std::move(body), kStart, kEnd, max_len);
}

BpeTokenizer::BpeTokenizer(std::vector<std::string> merge_lines, std::filesystem::path source)
    : byte_symbol_(256), source_(std::move(source)) {
    const auto order = byte_order();
    std::vector<std::string> vocab_list;
    for (const auto& [byte, cp] : order) {
        byte_symbol_[byte] = utf8(cp);
        vocab_list.push_back(utf8(cp));
    }
    for (const auto& [byte, cp] : order) {
        vocab_list.push_back(utf8(cp) + "</w>");
    }
    for (std::size_t i = 0; i < merge_lines.size(); ++i) {
        const auto& line = merge_lines[i];
        const auto sp = line.find(' ');
        if (sp == std::string::npos) {
            throw FormatError("bpe merges: malformed line " + std::to_string(i + 1));
        }
        auto first = line.substr(0, sp);
        auto second = line.substr(sp + 1);
        ranks_[{first, second}] = static_cast<int>(i);
        vocab_list.push_back(first + second);
    }
    vocab_list.emplace_back("<|startoftext|>");
    vocab_list.emplace_back("<|endoftext|>");
    for (std::size_t i = 0; i < vocab_list.size(); ++i) {
        vocab_.emplace(vocab_list[i], static_cast<int>(i));
    }
    start_id_ = static_cast<int>(vocab_list.size()) - 2;
    end_id_ = static_cast<int>(vocab_list.size()) - 1;
}

BpeTokenizer BpeTokenizer::from_file(const std::filesystem::path& merges_path, std::size_t max_merges) {
    std::ifstream in(merges_path);
    if (!in) {
        throw IoError("cannot open bpe merges file '" + merges_path.string() + "'");
    }
    std::string line;
    std::getline(in, line); // version header
    std::vector<std::string> merges;
    while (merges.size() < max_merges && std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            merges.push_back(line);
        }
    }
    return BpeTokenizer(std::move(merges), merges_path);
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& word) const {
    auto symbols = utf8_chars(word);
    if (symbols.empty()) {
        return symbols;
    }
    symbols.back() += "</w>";
    while (symbols.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        std::pair<std::string, std::string> best;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = ranks_.find({symbols[i], symbols[i + 1]});
            if (it != ranks_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = it->first;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) {
            break;
        }
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < symbols.size();) {
            if (i + 1 < symbols.size() && symbols[i] == best.first && symbols[i + 1] == best.second) {
                merged.push_back(best.first + best.second);
                i += 2;
            } else {
                merged.push_back(symbols[i]);
                ++i;
            }
        }
        symbols = std::move(merged);
    }
    return symbols;
}

std::vector<int> BpeTokenizer::encode(std::string_view text, std::size_t max_len) const {
    std::vector<int> body;
    for (const auto& word : pre_split(clean(text))) {
        if (word == "<|startoftext|>") {
            body.push_back(start_id_);
            continue;
        }
        if (word == "<|endoftext|>") {
            body.push_back(end_id_);
            continue;
        }
        std::string mapped;
        for (char c : word) {
            mapped += byte_symbol_[static_cast<unsigned char>(c)];
        }
        for (const auto& sym : bpe(mapped)) {
            auto it = vocab_.find(sym);
            if (it == vocab_.end()) {
                throw FormatError("bpe: symbol '" + sym + "' missing from vocabulary");
            }
            body.push_back(it->second);
        }
    }
    return frame(std::move(body), start_id_, end_id_, max_len);
}

nlohmann::json BpeTokenizer::describe() const {
    return {{"type", "clip_bpe"}, {"merges", source_.filename().string()}, {"num_merges", ranks_.size()}};
}

std::shared_ptr<const Tokenizer> make_tokenizer(const nlohmann::json& description, const std::filesystem::path& base_dir) {
    const auto type = description.value("type", std::string("byte"));
    if (type == "byte") {
        return std::make_shared<ByteTokenizer>();
    }
    if (type == "clip_bpe") {
        std::filesystem::path merges = description.at("merges").get<std::string>();
        if (merges.is_relative()) {
            merges = base_dir / merges;
        }
        const auto count = description.value("num_merges", std::size_t{48894});
        return std::make_shared<BpeTokenizer>(BpeTokenizer::from_file(merges, count));
    }
    throw FormatError("unknown tokenizer type '" + type + "'");
}

} // namespace vlq
