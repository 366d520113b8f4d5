#pragma once

// Straight-line reference composition of the prompted dual encoder and the
// antonym pair score. Written against plain vectors with its own helpers;
// shares no computation code with the library. Weights are handed over as a
// name -> (rows, cols, values) table.

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace oracle {

struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

using Table = std::map<std::string, Tensor>;
using Rows = std::vector<std::vector<double>>;

struct Dims {
    std::size_t layers = 0;
    std::size_t vision_heads = 0;
    std::size_t text_heads = 0;
    std::size_t image_size = 0;
    std::size_t patch_side = 0;
    bool causal_text = false;
    std::array<double, 3> mean{};
    std::array<double, 3> std{};
};

// HWC pixels in [0, 1].
struct Picture {
    std::size_t size = 0;
    std::vector<float> hwc;
};

std::vector<double> image_representation(const Table& w, const Dims& d, const Picture& img,
                                         const std::vector<Rows>& visual_prompts);

std::vector<double> text_representation(const Table& w, const Dims& d, const std::vector<int>& ids,
                                        const std::vector<Rows>& textual_prompts);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// e^{s1} / (e^{s1} + e^{s2}) computed as written.
double softmax_first(double s1, double s2);

// Row j of layer i: W_i [a_j ; p_j] + c_i.
std::vector<Rows> couple(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases,
                         const std::vector<Rows>& align, const std::vector<Rows>& percept);

} // namespace oracle
