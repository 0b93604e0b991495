#pragma once

#include "covifex/preprocess.hpp"
#include "covifex/types.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace covifex {

struct ExtractorSpec {
    std::string name;
    std::size_t input_height = 224;
    std::size_t input_width = 224;
    std::filesystem::path model_path;
    // Feature length; 0 until a backend has been loaded for this spec.
    std::size_t output_dim = 0;
};

// The fifteen pretrained architectures, in report row order.
std::vector<ExtractorSpec> registry_list();

// Looks up a registry entry by name; throws ValidationError if unknown.
ExtractorSpec find_extractor(std::string_view name);

// Spec for the deterministic stub backend (not part of the registry).
ExtractorSpec stub_extractor_spec();

// Preprocessing sized to the extractor's input.
PreprocessConfig preprocess_config_for(const ExtractorSpec& spec);

struct ExtractionItem {
    std::string_view id;
    // Set only when the caller knows the ground truth (dataset extraction).
    std::optional<Label> label;
    // Conditioned image; null for backends that do not need pixels.
    const ImageTensor* image = nullptr;
};

// A backend instance is single-consumer: one per worker thread.
class ExtractorBackend {
public:
    virtual ~ExtractorBackend() = default;

    virtual std::string_view kind() const noexcept = 0;

    // False for lookup-style backends; lets callers skip image decoding.
    virtual bool needs_pixels() const noexcept { return true; }

    virtual std::size_t output_dim() const noexcept = 0;

    // One feature vector per item, each of length output_dim().
    virtual std::vector<std::vector<float>> run(std::span<const ExtractionItem> batch) = 0;
};

enum class TensorLayout { nchw, nhwc };

// Neural inference over an ONNX network whose single output is the pooled
// feature vector. The output width is probed with a zero image at load.
std::unique_ptr<ExtractorBackend> make_onnx_backend(const std::filesystem::path& model_path,
                                                    std::size_t input_height, std::size_t input_width,
                                                    TensorLayout layout = TensorLayout::nchw);

// Returns the stored row for each sample id; unknown ids are rejected.
class PrecomputedBackend final : public ExtractorBackend {
public:
    explicit PrecomputedBackend(FeatureMatrix features);

    std::string_view kind() const noexcept override { return "precomputed"; }
    bool needs_pixels() const noexcept override { return false; }
    std::size_t output_dim() const noexcept override { return features_.d; }
    std::vector<std::vector<float>> run(std::span<const ExtractionItem> batch) override;

private:
    FeatureMatrix features_;
    std::unordered_map<std::string, std::size_t> row_of_;
};

// Test double: block-mean pooling of the image followed by a Gaussian random
// projection seeded from `seed`. With `label_shift` != 0, items carrying a
// positive label get that constant added to every component.
class StubBackend final : public ExtractorBackend {
public:
    explicit StubBackend(std::size_t dim = 64, std::uint64_t seed = 0, float label_shift = 0.0f);

    std::string_view kind() const noexcept override { return "stub"; }
    std::size_t output_dim() const noexcept override { return dim_; }
    std::vector<std::vector<float>> run(std::span<const ExtractionItem> batch) override;

    static constexpr std::size_t kGrid = 4;

private:
    std::vector<float> embed(const ImageTensor& img, std::optional<Label> label);
    const std::vector<float>& projection(std::size_t input_len);

    std::size_t dim_;
    std::uint64_t seed_;
    float label_shift_;
    std::unordered_map<std::size_t, std::vector<float>> projections_;
};

struct ExtractionTiming {
    double total_s = 0.0;
    double per_image_s = 0.0;
};

struct ExtractionResult {
    FeatureMatrix features;
    ExtractionTiming timing;
};

// Row i is the feature vector of ds.samples()[i]. Images are loaded and
// conditioned with `cfg` only if the backend needs pixels.
ExtractionResult extract_features(const Dataset& ds, const ExtractorSpec& spec, const PreprocessConfig& cfg,
                                  ExtractorBackend& backend, std::size_t batch_size = 8);

// Binary feature container `CVFX` v1 (little-endian).
inline constexpr std::uint32_t kFeatureFileVersion = 1;

std::vector<std::uint8_t> features_serialize(const FeatureMatrix& m);
FeatureMatrix features_deserialize(std::span<const std::uint8_t> bytes);

void features_save(const FeatureMatrix& m, const std::filesystem::path& path);
FeatureMatrix features_load(const std::filesystem::path& path);

// `id,label,f0..f{d-1}` with shortest round-trip float formatting.
void features_export_csv(const FeatureMatrix& m, const std::filesystem::path& path);

} // namespace covifex
