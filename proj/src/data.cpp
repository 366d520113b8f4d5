#include "vlq/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vlq/error.hpp"

namespace vlq {

namespace {

struct CsvRow {
    std::size_t line = 0;
    std::vector<std::string> fields;
};

// RFC 4180 style: fields may be quoted, quotes doubled inside quoted fields,
// quoted fields may span lines.
std::vector<CsvRow> read_csv(std::istream& in) {
    std::vector<CsvRow> rows;
    std::string field;
    CsvRow row;
    bool in_quotes = false;
    bool field_started = false;
    std::size_t line = 1;
    row.line = line;
    char c = 0;
    auto end_field = [&] {
        row.fields.push_back(field);
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        const bool blank = row.fields.size() == 1 && row.fields[0].empty();
        if (!blank) {
            rows.push_back(std::move(row));
        }
        row = CsvRow{};
        row.line = line;
    };
    while (in.get(c)) {
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field += '"';
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        if (c == '"' && !field_started) {
            in_quotes = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\r') {
            continue;
        } else if (c == '\n') {
            ++line;
            end_row();
        } else {
            field += c;
            field_started = true;
        }
    }
    if (in_quotes) {
        throw ParseError("csv: unterminated quoted field starting near line " + std::to_string(row.line));
    }
    if (!field.empty() || !row.fields.empty()) {
        end_row();
    }
    // strip UTF-8 BOM from the first header cell
    if (!rows.empty() && !rows[0].fields.empty() && rows[0].fields[0].rfind("\xEF\xBB\xBF", 0) == 0) {
        rows[0].fields[0].erase(0, 3);
    }
    return rows;
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

double parse_number(const std::string& text, std::size_t line, const std::string& column) {
    const std::string t = trim(text);
    double value = 0.0;
    const auto* first = t.data();
    const auto* last = t.data() + t.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (t.empty() || ec != std::errc() || ptr != last || !std::isfinite(value)) {
        throw ParseError("manifest row " + std::to_string(line) + ", column '" + column + "': cannot parse '" + text +
                         "' as a number");
    }
    return value;
}

// Column lookup keyed by header name; rejects columns outside `allowed`.
class Header {
public:
    Header(const CsvRow& row, const std::set<std::string>& allowed, const std::vector<std::string>& required) {
        for (std::size_t i = 0; i < row.fields.size(); ++i) {
            const std::string name = trim(row.fields[i]);
            if (!allowed.contains(name)) {
                throw ParseError("manifest: unknown column '" + name + "'");
            }
            index_[name] = i;
        }
        for (const auto& r : required) {
            if (!index_.contains(r)) {
                throw ParseError("manifest: missing required column '" + r + "'");
            }
        }
        width_ = row.fields.size();
    }

    bool has(const std::string& name) const { return index_.contains(name); }

    const std::string& get(const CsvRow& row, const std::string& name) const {
        if (row.fields.size() != width_) {
            throw ParseError("manifest row " + std::to_string(row.line) + ": expected " + std::to_string(width_) +
                             " fields, got " + std::to_string(row.fields.size()));
        }
        return row.fields[index_.at(name)];
    }

private:
    std::map<std::string, std::size_t> index_;
    std::size_t width_ = 0;
};

std::string generator_from_name(const std::string& name) {
    const auto stem = std::filesystem::path(name).filename().string();
    const auto pos = stem.find('_');
    return pos == std::string::npos ? std::string("unknown") : stem.substr(0, pos);
}

cv::Mat as_mat(const Image& image) {
    return cv::Mat(static_cast<int>(image.height), static_cast<int>(image.width), CV_32FC3,
                   const_cast<float*>(image.pixels.data()));
}

Image from_mat(const cv::Mat& m) {
    Image out(static_cast<std::size_t>(m.cols), static_cast<std::size_t>(m.rows));
    cv::Mat dst(m.rows, m.cols, CV_32FC3, out.pixels.data());
    m.copyTo(dst);
    return out;
}

} // namespace

ManifestFormat parse_manifest_format(const std::string& tag) {
    if (tag == "canonical") return ManifestFormat::canonical;
    if (tag == "agiqa3k") return ManifestFormat::agiqa3k;
    if (tag == "aigciqa2023") return ManifestFormat::aigciqa2023;
    throw ConfigError("unknown manifest format '" + tag + "' (expected canonical, agiqa3k or aigciqa2023)");
}

std::string to_string(ManifestFormat format) {
    switch (format) {
    case ManifestFormat::canonical: return "canonical";
    case ManifestFormat::agiqa3k: return "agiqa3k";
    case ManifestFormat::aigciqa2023: return "aigciqa2023";
    }
    return "canonical";
}

std::filesystem::path resolve_image_path(const std::filesystem::path& manifest_path, const SampleRecord& record) {
    std::filesystem::path p = record.image_path;
    if (p.is_relative()) {
        p = manifest_path.parent_path() / p;
    }
    return p;
}

std::vector<SampleRecord> load_manifest(const std::filesystem::path& path, ManifestFormat format,
                                        std::ostream* warnings) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open manifest '" + path.string() + "'");
    }
    const auto rows = read_csv(in);
    if (rows.empty()) {
        throw ParseError("manifest '" + path.string() + "' is empty");
    }

    std::vector<SampleRecord> records;
    if (format == ManifestFormat::canonical) {
        const Header h(rows[0], {"image_path", "user_prompt", "mos_percept", "mos_align", "generator"},
                       {"image_path", "user_prompt", "mos_percept", "mos_align", "generator"});
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            SampleRecord rec;
            rec.image_path = h.get(row, "image_path");
            const auto& prompt = h.get(row, "user_prompt");
            if (!prompt.empty()) rec.user_prompt = prompt;
            rec.mos_percept = parse_number(h.get(row, "mos_percept"), row.line, "mos_percept");
            const auto& align = h.get(row, "mos_align");
            if (!trim(align).empty()) rec.mos_align = parse_number(align, row.line, "mos_align");
            rec.generator = h.get(row, "generator");
            rec.group_id = rec.user_prompt ? "prompt:" + *rec.user_prompt : "image:" + rec.image_path;
            records.push_back(std::move(rec));
        }
    } else if (format == ManifestFormat::agiqa3k) {
        const Header h(rows[0],
                       {"name", "prompt", "adj1", "adj2", "style", "mos_quality", "std_quality", "mos_align",
                        "std_align"},
                       {"name", "prompt", "mos_quality", "mos_align"});
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            SampleRecord rec;
            rec.image_path = h.get(row, "name");
            rec.user_prompt = h.get(row, "prompt");
            rec.mos_percept = parse_number(h.get(row, "mos_quality"), row.line, "mos_quality");
            rec.mos_align = parse_number(h.get(row, "mos_align"), row.line, "mos_align");
            rec.generator = generator_from_name(rec.image_path);
            rec.group_id = "prompt:" + *rec.user_prompt;
            records.push_back(std::move(rec));
        }
    } else {
        const Header h(rows[0],
                       {"image", "prompt_index", "generator", "mos_quality", "mos_authenticity", "mos_correspondence"},
                       {"image", "prompt_index", "mos_quality", "mos_correspondence"});
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            SampleRecord rec;
            rec.image_path = h.get(row, "image");
            rec.mos_percept = parse_number(h.get(row, "mos_quality"), row.line, "mos_quality");
            rec.mos_align = parse_number(h.get(row, "mos_correspondence"), row.line, "mos_correspondence");
            rec.generator = h.has("generator") ? h.get(row, "generator") : std::string("unknown");
            rec.group_id = "prompt_index:" + trim(h.get(row, "prompt_index"));
            records.push_back(std::move(rec));
        }
    }

    for (const auto& rec : records) {
        if (rec.image_path.empty()) {
            throw ParseError("manifest '" + path.string() + "': empty image path");
        }
        if (warnings && !std::filesystem::exists(resolve_image_path(path, rec))) {
            *warnings << "warning: image '" << rec.image_path << "' listed in " << path.string() << " not found\n";
        }
    }
    return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<SampleRecord>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << "image_path,user_prompt,mos_percept,mos_align,generator\n";
    out.precision(17);
    for (const auto& r : records) {
        out << csv_quote(r.image_path) << ',' << csv_quote(r.user_prompt.value_or("")) << ',' << r.mos_percept << ',';
        if (r.mos_align) out << *r.mos_align;
        out << ',' << csv_quote(r.generator) << '\n';
    }
}

MinMaxNormalizer MinMaxNormalizer::fit(const std::vector<double>& values) {
    if (values.empty()) {
        throw ConfigError("normalizer: no values to fit");
    }
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) {
        throw NumericalError("normalizer: degenerate target range (min == max == " + std::to_string(*lo) + ")");
    }
    return {*lo, *hi};
}

double normalize_target(double raw, const MinMaxNormalizer& n) {
    if (!(n.max > n.min)) {
        throw NumericalError("normalize_target: degenerate normalizer range");
    }
    return std::clamp((raw - n.min) / (n.max - n.min), 0.0, 1.0);
}

DatasetSplit split_by_prompt(const std::vector<SampleRecord>& records, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ConfigError("split ratio must lie in (0, 1)");
    }
    std::vector<std::string> groups;
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& m = members[records[i].group_id];
        if (m.empty()) groups.push_back(records[i].group_id);
        m.push_back(i);
    }
    if (groups.size() < 2) {
        throw ConfigError("split_by_prompt needs at least 2 prompt groups, got " + std::to_string(groups.size()));
    }
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(groups.begin(), groups.end());
    // smallest count whose share reaches ratio; the tolerance absorbs ratio * n rounding
    auto n_train = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(groups.size()) - 1e-9));
    n_train = std::clamp<std::size_t>(n_train, 1, groups.size() - 1);

    DatasetSplit split;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto& dst = g < n_train ? split.train : split.test;
        for (std::size_t idx : members[groups[g]]) dst.push_back(records[idx]);
    }

    std::vector<double> percept;
    std::vector<double> align;
    for (const auto& r : split.train) {
        percept.push_back(r.mos_percept);
        if (r.mos_align) align.push_back(*r.mos_align);
    }
    split.normalizer.percept = MinMaxNormalizer::fit(percept);
    if (align.size() == split.train.size()) {
        split.normalizer.align = MinMaxNormalizer::fit(align);
    }
    return split;
}

Image load_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw IoError("cannot read image '" + path.string() + "'");
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    cv::Mat f;
    rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
    return from_mat(f);
}

void save_image(const std::filesystem::path& path, const Image& image) {
    cv::Mat rgb8;
    as_mat(image).convertTo(rgb8, CV_8UC3, 255.0);
    cv::Mat bgr;
    cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), bgr)) {
        throw IoError("cannot write image '" + path.string() + "'");
    }
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
    cv::Mat out;
    cv::resize(as_mat(image), out, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
               cv::INTER_LINEAR);
    return from_mat(out);
}

Image sample_crop(const Image& image, std::size_t crop_size, Rng& rng) {
    if (image.empty() || crop_size == 0) {
        throw DimensionError("sample_crop: empty image or zero crop size");
    }
    const Image* src = &image;
    Image resized;
    const std::size_t short_side = std::min(image.width, image.height);
    if (short_side < crop_size) {
        const double scale = static_cast<double>(crop_size) / static_cast<double>(short_side);
        const auto w = std::max(crop_size, static_cast<std::size_t>(std::ceil(image.width * scale - 1e-9)));
        const auto h = std::max(crop_size, static_cast<std::size_t>(std::ceil(image.height * scale - 1e-9)));
        resized = resize_bilinear(image, w, h);
        src = &resized;
    }
    const std::size_t x0 = rng.uniform_index(src->width - crop_size + 1);
    const std::size_t y0 = rng.uniform_index(src->height - crop_size + 1);
    if (x0 == 0 && y0 == 0 && src->width == crop_size && src->height == crop_size) {
        return *src;
    }
    Image crop(crop_size, crop_size);
    for (std::size_t y = 0; y < crop_size; ++y) {
        const float* from = &src->pixels[((y0 + y) * src->width + x0) * Image::kChannels];
        std::copy(from, from + crop_size * Image::kChannels, &crop.pixels[y * crop_size * Image::kChannels]);
    }
    return crop;
}

std::vector<SyntheticSample> make_synthetic_dataset(std::uint64_t seed, std::size_t n_images, std::size_t n_groups,
                                                    std::size_t image_size) {
    if (n_images == 0 || n_groups == 0 || n_groups > n_images || image_size < 2) {
        throw ConfigError("make_synthetic_dataset: need 1 <= n_groups <= n_images and image_size >= 2");
    }
    // hidden scorer weights
    Rng hidden(derive_seed(seed, "synthetic.scorer"));
    const double w_contrast = 1.5 + hidden.uniform();
    const double w_noise = 1.5 + hidden.uniform();
    const double w_group = 0.5 * hidden.uniform();
    const double align_mix = 0.6 + 0.2 * hidden.uniform();

    struct GroupStyle {
        double color[3];
        double freq_x;
        double freq_y;
        double offset;
    };
    std::vector<GroupStyle> styles(n_groups);
    Rng group_rng(derive_seed(seed, "synthetic.groups"));
    for (auto& g : styles) {
        for (double& c : g.color) c = 0.3 + 0.7 * group_rng.uniform();
        g.freq_x = 1.0 + 3.0 * group_rng.uniform();
        g.freq_y = 1.0 + 3.0 * group_rng.uniform();
        g.offset = group_rng.normal();
    }

    std::vector<SyntheticSample> out;
    const char* generators[] = {"gen-a", "gen-b", "gen-c"};
    for (std::size_t i = 0; i < n_images; ++i) {
        Rng rng(derive_seed(seed, "synthetic.image." + std::to_string(i)));
        const std::size_t g = i % n_groups;
        const auto& style = styles[g];
        const double contrast = 0.2 + 0.8 * rng.uniform();
        const double noise = 0.5 * rng.uniform();
        const double brightness = 0.4 + 0.2 * rng.uniform();

        Image img(image_size, image_size);
        const double two_pi = 6.283185307179586;
        for (std::size_t y = 0; y < image_size; ++y) {
            for (std::size_t x = 0; x < image_size; ++x) {
                const double u = static_cast<double>(x) / static_cast<double>(image_size);
                const double v = static_cast<double>(y) / static_cast<double>(image_size);
                const double pattern = std::sin(two_pi * style.freq_x * u) * std::cos(two_pi * style.freq_y * v);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double value =
                        brightness + 0.5 * contrast * pattern * style.color[c] + noise * (rng.uniform() - 0.5);
                    img.at(y, x, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
                }
            }
        }

        const double latent = w_contrast * contrast - w_noise * noise + w_group * style.offset;
        const double percept = 1.0 + 4.0 / (1.0 + std::exp(-2.0 * (latent - 0.5)));
        const double align_latent = align_mix * latent + (1.0 - align_mix) * style.offset + 0.1 * rng.normal();
        const double align = 1.0 + 4.0 / (1.0 + std::exp(-2.0 * (align_latent - 0.5)));

        SyntheticSample s;
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04zu.png", i);
        s.record.image_path = name;
        s.record.user_prompt = "a synthetic scene number " + std::to_string(g);
        s.record.mos_percept = percept;
        s.record.mos_align = align;
        s.record.generator = generators[i % 3];
        s.record.group_id = "prompt:" + *s.record.user_prompt;
        s.image = std::move(img);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace vlq
