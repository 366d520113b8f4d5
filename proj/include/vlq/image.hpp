#pragma once

#include <cstddef>
#include <vector>

#include "vlq/error.hpp"

namespace vlq {

// RGB raster, interleaved (HWC), values in [0, 1].
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> pixels;

    static constexpr std::size_t kChannels = 3;

    Image() = default;
    Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(w * h * kChannels, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * kChannels + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * kChannels + c]; }

    bool empty() const { return pixels.empty(); }

    friend bool operator==(const Image&, const Image&) = default;
};

} // namespace vlq
