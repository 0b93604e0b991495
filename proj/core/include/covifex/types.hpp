#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace covifex {

// 1 = COVID-19 positive, 0 = healthy control.
enum class Label : std::uint8_t { negative = 0, positive = 1 };

inline constexpr std::size_t kNumClasses = 2;

constexpr std::size_t to_index(Label l) noexcept { return static_cast<std::size_t>(l); }

Label label_from_int(int value);

enum class Modality : std::uint8_t { xray, ct };

std::string_view to_string(Modality m) noexcept;

// Floating-point image, row-major with interleaved channels.
class ImageTensor {
public:
    ImageTensor() = default;

    // Validates dims, data length and that every value lies inside
    // [range_lo, range_hi].
    ImageTensor(std::size_t height, std::size_t width, std::size_t channels,
                std::vector<float> data, float range_lo, float range_hi);

    // Zero-filled image; declared range [lo, hi] must contain 0.
    static ImageTensor zeros(std::size_t height, std::size_t width, std::size_t channels,
                             float range_lo = 0.0f, float range_hi = 255.0f);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return data_.size(); }
    float range_lo() const noexcept { return range_lo_; }
    float range_hi() const noexcept { return range_hi_; }

    std::span<const float> data() const noexcept { return data_; }

    float at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return data_[(y * width_ + x) * channels_ + c];
    }

    bool operator==(const ImageTensor&) const = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t channels_ = 0;
    std::vector<float> data_;
    float range_lo_ = 0.0f;
    float range_hi_ = 0.0f;
};

struct Sample {
    std::string id;
    Modality modality = Modality::xray;
    Label label = Label::negative;
    std::filesystem::path source_path;
};

class Dataset {
public:
    Dataset() = default;

    // Rejects duplicate ids.
    explicit Dataset(std::vector<Sample> samples);

    const std::vector<Sample>& samples() const noexcept { return samples_; }
    std::size_t size() const noexcept { return samples_.size(); }
    bool empty() const noexcept { return samples_.empty(); }
    const std::array<std::size_t, kNumClasses>& class_counts() const noexcept { return class_counts_; }

private:
    std::vector<Sample> samples_;
    std::array<std::size_t, kNumClasses> class_counts_{};
};

// Reads a `id,path,modality,label` CSV. Relative paths resolve against the
// manifest's directory. Image files are not touched here.
Dataset dataset_from_manifest(const std::filesystem::path& manifest_path);
Dataset dataset_from_manifest(std::istream& in, const std::filesystem::path& base_dir = {});

// n x d row-major feature matrix with aligned labels and sample ids.
struct FeatureMatrix {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<float> values;
    std::vector<Label> labels;
    std::vector<std::string> sample_ids;
    std::string extractor_name;

    std::span<const float> row(std::size_t i) const noexcept { return {values.data() + i * d, d}; }
    float at(std::size_t i, std::size_t j) const noexcept { return values[i * d + j]; }

    std::array<std::size_t, kNumClasses> class_counts() const noexcept;

    bool operator==(const FeatureMatrix&) const = default;
};

// Returns `m` unchanged when all invariants hold; throws ValidationError
// naming the first offending coordinate or count otherwise.
const FeatureMatrix& feature_matrix_validate(const FeatureMatrix& m);

} // namespace covifex
