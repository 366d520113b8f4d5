#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vlq/image.hpp"
#include "vlq/rng.hpp"

namespace vlq {

struct SampleRecord {
    std::string image_path;                 // as written in the manifest
    std::optional<std::string> user_prompt; // absent for datasets without prompts
    double mos_percept = 0.0;
    std::optional<double> mos_align;
    std::string generator;
    std::string group_id; // identical for images sharing a user prompt

    friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

enum class ManifestFormat { canonical, agiqa3k, aigciqa2023 };

ManifestFormat parse_manifest_format(const std::string& tag);
std::string to_string(ManifestFormat format);

// Reads a manifest. Relative image paths are resolved against the manifest's
// directory only for the existence check; records keep the path as written.
// Missing image files produce a warning on `warnings` (if non-null).
std::vector<SampleRecord> load_manifest(const std::filesystem::path& path, ManifestFormat format,
                                        std::ostream* warnings = nullptr);

// Canonical header: image_path,user_prompt,mos_percept,mos_align,generator
void write_manifest(const std::filesystem::path& path, const std::vector<SampleRecord>& records);

std::filesystem::path resolve_image_path(const std::filesystem::path& manifest_path, const SampleRecord& record);

// Affine min-max map fitted on training targets; values outside the
// training range clamp to [0, 1].
struct MinMaxNormalizer {
    double min = 0.0;
    double max = 1.0;

    static MinMaxNormalizer fit(const std::vector<double>& values);
};

double normalize_target(double raw, const MinMaxNormalizer& normalizer);

struct TargetNormalizer {
    MinMaxNormalizer percept;
    std::optional<MinMaxNormalizer> align;
};

struct DatasetSplit {
    std::vector<SampleRecord> train;
    std::vector<SampleRecord> test;
    TargetNormalizer normalizer;
};

// Groups are ordered by first appearance, shuffled with `seed`, and the
// first ceil(ratio * groups) of them (capped to leave one) go to train.
DatasetSplit split_by_prompt(const std::vector<SampleRecord>& records, double ratio, std::uint64_t seed);

Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& image);

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);

// Uniformly random crop_size x crop_size window. Images with a side shorter
// than crop_size are first upscaled bilinearly so the short side equals it.
Image sample_crop(const Image& image, std::size_t crop_size, Rng& rng);

struct SyntheticSample {
    SampleRecord record;
    Image image;
};

// Deterministic pattern-plus-noise images whose MOS values come from a hidden
// seeded function of contrast, noise level and a per-group offset. Image i
// belongs to group i % n_groups; paths are "img_XXXX.png".
std::vector<SyntheticSample> make_synthetic_dataset(std::uint64_t seed, std::size_t n_images, std::size_t n_groups,
                                                    std::size_t image_size = 32);

} // namespace vlq
