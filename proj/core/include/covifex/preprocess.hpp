#pragma once

#include "covifex/types.hpp"

#include <array>
#include <cstddef>

namespace covifex {

inline constexpr std::array<float, 3> kImageNetMeanRgb{0.485f, 0.456f, 0.406f};

struct PreprocessConfig {
    std::size_t target_height = 224;
    std::size_t target_width = 224;
    bool apply_mean_subtraction = true;
    std::array<float, 3> mean_rgb = kImageNetMeanRgb;
    bool normalize_min_max = true;

    // Throws ValidationError on zero dims or non-finite means.
    void validate() const;

    bool operator==(const PreprocessConfig&) const = default;
};

// Bilinear resampling with pixel centres at half-integers (align_corners off).
// Source coordinates are clamped to the image border.
ImageTensor resize_bilinear(const ImageTensor& img, std::size_t target_height, std::size_t target_width);

// 1 channel -> 3 identical channels; 3 channels pass through unchanged.
ImageTensor grayscale_to_rgb(const ImageTensor& img);

struct NormalizeResult {
    ImageTensor image;
    // Set when the input was constant (x_max == x_min); the image is all zeros.
    bool constant_input = false;
};

// (x - x_min) / (x_max - x_min) over all pixels and channels jointly.
NormalizeResult min_max_normalize(const ImageTensor& img);

// Subtracts mean_rgb[c] from channel c without clamping. Requires 3 channels.
ImageTensor mean_subtract(const ImageTensor& img, const std::array<float, 3>& mean_rgb);

struct PreprocessResult {
    ImageTensor image;
    bool constant_input = false;
};

// grayscale_to_rgb -> resize_bilinear -> min_max_normalize -> mean_subtract,
// with the last two stages switchable through `cfg`.
PreprocessResult preprocess_pipeline(const ImageTensor& img, const PreprocessConfig& cfg);

} // namespace covifex
