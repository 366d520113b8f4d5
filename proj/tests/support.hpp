#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oracle/reference_model.hpp"
#include "vlq/backbone.hpp"
#include "vlq/training.hpp"

namespace testing {

// Two layers, width 16: cheap enough for finite differences.
vlq::BackboneConfig small_config();

oracle::Table to_table(const vlq::Backbone<float>& backbone);
oracle::Dims dims_of(const vlq::BackboneConfig& cfg);

template <typename T>
std::vector<oracle::Rows> to_rows(const std::vector<vlq::Matrix<T>>& mats) {
    std::vector<oracle::Rows> out;
    for (const auto& m : mats) {
        oracle::Rows rows;
        for (std::size_t r = 0; r < m.rows(); ++r) rows.emplace_back(m.row(r).begin(), m.row(r).end());
        out.push_back(rows);
    }
    return out;
}

template <typename T>
oracle::Tensor to_tensor(const vlq::Matrix<T>& m) {
    return {m.rows(), m.cols(), std::vector<double>(m.flat().begin(), m.flat().end())};
}

oracle::Picture to_picture(const vlq::Image& image);

// Synthetic images with normalized targets, sized for `cfg`.
std::vector<vlq::TrainingSample> synthetic_samples(std::uint64_t seed, std::size_t n, std::size_t groups,
                                                   const vlq::BackboneConfig& cfg);

vlq::Batch make_batch(const std::vector<vlq::TrainingSample>& samples, const vlq::TrainConfig& cfg);

// |a - b| / max(|a|, |b|, floor)
double rel_err(double a, double b, double floor = 1e-8);

class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace testing
