#include "covifex/extract.hpp"

#include "binary_io.hpp"
#include "covifex/error.hpp"
#include "covifex/image_io.hpp"
#include "covifex/random.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>

namespace covifex {

std::vector<ExtractorSpec> registry_list() {
    static const char* const kNames[] = {
        "MobileNet",  "DenseNet121", "DenseNet201",  "Xception",   "InceptionV3",
        "InceptionResNetV2", "ResNet50", "ResNet152", "VGG16",     "VGG19",
        "NASNetLarge", "NASNetMobile", "ResNet50V2", "ResNet101V2", "ResNet152V2",
    };
    std::vector<ExtractorSpec> out;
    out.reserve(std::size(kNames));
    for (const char* name : kNames) {
        ExtractorSpec s;
        s.name = name;
        const std::size_t side = s.name == "NASNetLarge" ? 331 : 224;
        s.input_height = side;
        s.input_width = side;
        s.model_path = std::filesystem::path("models") / (s.name + ".onnx");
        out.push_back(std::move(s));
    }
    return out;
}

ExtractorSpec find_extractor(std::string_view name) {
    for (auto& s : registry_list()) {
        if (s.name == name) return s;
    }
    if (name == "Stub") return stub_extractor_spec();
    throw ValidationError("unknown extractor '" + std::string(name) + "'");
}

ExtractorSpec stub_extractor_spec() {
    ExtractorSpec s;
    s.name = "Stub";
    s.input_height = 64;
    s.input_width = 64;
    return s;
}

PreprocessConfig preprocess_config_for(const ExtractorSpec& spec) {
    PreprocessConfig cfg;
    cfg.target_height = spec.input_height;
    cfg.target_width = spec.input_width;
    return cfg;
}

// ---------------------------------------------------------------------------

PrecomputedBackend::PrecomputedBackend(FeatureMatrix features) : features_(std::move(features)) {
    feature_matrix_validate(features_);
    row_of_.reserve(features_.n);
    for (std::size_t i = 0; i < features_.n; ++i) {
        if (!row_of_.emplace(features_.sample_ids[i], i).second) {
            throw ValidationError("duplicate sample id \"" + features_.sample_ids[i] + "\" in feature matrix");
        }
    }
}

std::vector<std::vector<float>> PrecomputedBackend::run(std::span<const ExtractionItem> batch) {
    std::vector<std::vector<float>> out;
    out.reserve(batch.size());
    for (const auto& item : batch) {
        auto it = row_of_.find(std::string(item.id));
        if (it == row_of_.end()) {
            throw ValidationError("no precomputed features for sample id \"" + std::string(item.id) + "\"");
        }
        auto row = features_.row(it->second);
        out.emplace_back(row.begin(), row.end());
    }
    return out;
}

// ---------------------------------------------------------------------------

StubBackend::StubBackend(std::size_t dim, std::uint64_t seed, float label_shift)
    : dim_(dim), seed_(seed), label_shift_(label_shift) {
    if (dim_ == 0) throw ValidationError("stub backend dimension must be >= 1");
}

const std::vector<float>& StubBackend::projection(std::size_t input_len) {
    auto it = projections_.find(input_len);
    if (it != projections_.end()) return it->second;
    Rng rng(derive_seed(seed_, input_len));
    std::vector<float> w(dim_ * input_len);
    const double scale = 1.0 / std::sqrt(static_cast<double>(input_len));
    for (auto& v : w) v = static_cast<float>(standard_normal(rng) * scale);
    return projections_.emplace(input_len, std::move(w)).first->second;
}

std::vector<float> StubBackend::embed(const ImageTensor& img, std::optional<Label> label) {
    const std::size_t c = img.channels();
    std::vector<double> pooled(kGrid * kGrid * c, 0.0);
    std::vector<std::size_t> counts(kGrid * kGrid, 0);
    for (std::size_t y = 0; y < img.height(); ++y) {
        const std::size_t gy = y * kGrid / img.height();
        for (std::size_t x = 0; x < img.width(); ++x) {
            const std::size_t cell = gy * kGrid + x * kGrid / img.width();
            ++counts[cell];
            for (std::size_t ch = 0; ch < c; ++ch) pooled[cell * c + ch] += img.at(y, x, ch);
        }
    }
    for (std::size_t cell = 0; cell < counts.size(); ++cell) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            if (counts[cell] > 0) pooled[cell * c + ch] /= static_cast<double>(counts[cell]);
        }
    }

    const auto& w = projection(pooled.size());
    std::vector<float> out(dim_);
    const float shift = label && *label == Label::positive ? label_shift_ : 0.0f;
    for (std::size_t k = 0; k < dim_; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < pooled.size(); ++j) acc += w[k * pooled.size() + j] * pooled[j];
        out[k] = static_cast<float>(acc) + shift;
    }
    return out;
}

std::vector<std::vector<float>> StubBackend::run(std::span<const ExtractionItem> batch) {
    std::vector<std::vector<float>> out;
    out.reserve(batch.size());
    for (const auto& item : batch) {
        if (item.image == nullptr) {
            throw ValidationError("stub backend needs an image for sample \"" + std::string(item.id) + "\"");
        }
        out.push_back(embed(*item.image, item.label));
    }
    return out;
}

// ---------------------------------------------------------------------------

ExtractionResult extract_features(const Dataset& ds, const ExtractorSpec& spec, const PreprocessConfig& cfg,
                                  ExtractorBackend& backend, std::size_t batch_size) {
    if (batch_size == 0) throw ValidationError("batch size must be >= 1");
    cfg.validate();

    ExtractionResult result;
    FeatureMatrix& m = result.features;
    m.n = ds.size();
    m.extractor_name = spec.name;
    m.labels.reserve(m.n);
    m.sample_ids.reserve(m.n);

    const auto start = std::chrono::steady_clock::now();
    std::size_t d = 0;
    const auto& samples = ds.samples();
    for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
        const std::size_t end = std::min(samples.size(), begin + batch_size);
        std::vector<ImageTensor> images;
        std::vector<ExtractionItem> items;
        images.reserve(end - begin);
        items.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
            const Sample& s = samples[i];
            if (backend.needs_pixels()) {
                try {
                    images.push_back(preprocess_pipeline(load_image(s.source_path), cfg).image);
                } catch (const Error& e) {
                    throw IoError("sample \"" + s.id + "\": " + e.what());
                }
            }
        }
        for (std::size_t i = begin; i < end; ++i) {
            const Sample& s = samples[i];
            items.push_back({s.id, s.label, backend.needs_pixels() ? &images[i - begin] : nullptr});
        }
        auto rows = backend.run(items);
        if (rows.size() != items.size()) {
            throw Error("internal error: backend returned " + std::to_string(rows.size()) + " rows for " +
                        std::to_string(items.size()) + " inputs");
        }
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (d == 0 && begin == 0 && r == 0) {
                d = rows[r].size();
                if (d == 0) throw Error("internal error: backend produced an empty feature vector");
                m.values.reserve(m.n * d);
            }
            if (rows[r].size() != d) {
                throw Error("internal error: backend output length " + std::to_string(rows[r].size()) +
                            " differs from " + std::to_string(d) + " at sample \"" + samples[begin + r].id + "\"");
            }
            m.values.insert(m.values.end(), rows[r].begin(), rows[r].end());
            m.labels.push_back(samples[begin + r].label);
            m.sample_ids.push_back(samples[begin + r].id);
        }
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;

    m.d = m.n == 0 ? backend.output_dim() : d;
    feature_matrix_validate(m);
    result.timing.total_s = elapsed.count();
    result.timing.per_image_s = m.n == 0 ? 0.0 : elapsed.count() / static_cast<double>(m.n);
    return result;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::string_view kFeatureMagic = "CVFX";
}

std::vector<std::uint8_t> features_serialize(const FeatureMatrix& m) {
    feature_matrix_validate(m);
    if (m.n > 0xFFFFFFFFu || m.d > 0xFFFFFFFFu) throw ValidationError("feature matrix too large");
    detail::ByteWriter w;
    w.bytes(kFeatureMagic);
    w.u32(kFeatureFileVersion);
    w.u32(static_cast<std::uint32_t>(m.n));
    w.u32(static_cast<std::uint32_t>(m.d));
    w.str16(m.extractor_name);
    for (std::size_t i = 0; i < m.n; ++i) {
        w.str16(m.sample_ids[i]);
        w.u8(static_cast<std::uint8_t>(m.labels[i]));
        for (float v : m.row(i)) w.f32(v);
    }
    return std::move(w.buffer());
}

FeatureMatrix features_deserialize(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "feature file");
    if (r.bytes(4) != kFeatureMagic) {
        throw FormatError("not a feature file (bad magic)");
    }
    const std::uint32_t version = r.u32();
    if (version != kFeatureFileVersion) {
        throw FormatError("unsupported feature-file version " + std::to_string(version) + " (expected " +
                          std::to_string(kFeatureFileVersion) + ")");
    }
    FeatureMatrix m;
    m.n = r.u32();
    m.d = r.u32();
    m.extractor_name = r.str16();
    // Each record needs at least 2 + 1 + 4d bytes; reject absurd headers early.
    if (m.n > 0 && (3 + 4 * m.d) > r.remaining() / m.n) {
        r.need(r.remaining() + 1);
    }
    m.values.reserve(m.n * m.d);
    m.labels.reserve(m.n);
    m.sample_ids.reserve(m.n);
    for (std::size_t i = 0; i < m.n; ++i) {
        m.sample_ids.push_back(r.str16());
        const auto raw = r.u8();
        if (raw > 1) {
            throw FormatError("invalid label byte " + std::to_string(raw) + " at offset " +
                              std::to_string(r.offset() - 1));
        }
        m.labels.push_back(static_cast<Label>(raw));
        for (std::size_t j = 0; j < m.d; ++j) m.values.push_back(r.f32());
    }
    if (r.remaining() != 0) {
        throw FormatError("trailing bytes after feature records at offset " + std::to_string(r.offset()));
    }
    try {
        feature_matrix_validate(m);
    } catch (const ValidationError& e) {
        throw FormatError(std::string("feature file content invalid: ") + e.what());
    }
    return m;
}

void features_save(const FeatureMatrix& m, const std::filesystem::path& path) {
    detail::write_file(path, features_serialize(m));
}

FeatureMatrix features_load(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    try {
        return features_deserialize(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void features_export_csv(const FeatureMatrix& m, const std::filesystem::path& path) {
    feature_matrix_validate(m);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "id,label";
    for (std::size_t j = 0; j < m.d; ++j) out << ",f" << j;
    out << '\n';
    char buf[64];
    for (std::size_t i = 0; i < m.n; ++i) {
        out << m.sample_ids[i] << ',' << static_cast<int>(m.labels[i]);
        for (float v : m.row(i)) {
            auto res = std::to_chars(buf, buf + sizeof(buf), v);
            out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
        }
        out << '\n';
    }
    if (!out) throw IoError("short write to " + path.string());
}

} // namespace covifex
