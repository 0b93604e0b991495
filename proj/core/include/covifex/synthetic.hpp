#pragma once

#include "covifex/types.hpp"

#include <cstdint>
#include <filesystem>

namespace covifex {

// Two isotropic unit-variance Gaussians in d dimensions whose means differ by
// `separation` standard deviations along feature 0 only. Labels alternate
// (row i has label i % 2), so n = 200 gives 100/100.
struct ReferenceDatasetConfig {
    std::size_t n = 200;
    std::size_t d = 16;
    double separation = 6.0;
    std::uint64_t seed = 42;
};

FeatureMatrix reference_dataset(const ReferenceDatasetConfig& cfg = {});

// Writes `n_per_class` grayscale PNGs per class plus `manifest.csv` into
// `dir` and returns the dataset read back from that manifest. Negative
// images are a smooth vignette with noise; positive images add a diffuse
// bright patch at a random position inside the central region.
struct SyntheticImageConfig {
    std::size_t n_per_class = 20;
    std::size_t height = 96;
    std::size_t width = 96;
    std::uint64_t seed = 7;
};

Dataset write_synthetic_images(const std::filesystem::path& dir, const SyntheticImageConfig& cfg = {});

// One image of the family above, in [0, 255] with a single channel.
ImageTensor synthetic_image(Label label, std::size_t height, std::size_t width, std::uint64_t seed);

} // namespace covifex
