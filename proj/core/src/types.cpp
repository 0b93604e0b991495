#include "covifex/types.hpp"

#include "covifex/error.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace covifex {

Label label_from_int(int value) {
    if (value != 0 && value != 1) {
        throw ValidationError("label must be 0 or 1, got " + std::to_string(value));
    }
    return static_cast<Label>(value);
}

std::string_view to_string(Modality m) noexcept {
    return m == Modality::ct ? "ct" : "xray";
}

ImageTensor::ImageTensor(std::size_t height, std::size_t width, std::size_t channels,
                         std::vector<float> data, float range_lo, float range_hi)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)),
      range_lo_(range_lo), range_hi_(range_hi) {
    if (height_ < 1 || width_ < 1) {
        throw ValidationError("image dimensions must be >= 1");
    }
    if (channels_ < 1) {
        throw ValidationError("image must have at least one channel");
    }
    if (data_.size() != height_ * width_ * channels_) {
        std::ostringstream os;
        os << "image data length " << data_.size() << " != " << height_ << "x" << width_ << "x"
           << channels_;
        throw ValidationError(os.str());
    }
    if (!(range_lo_ <= range_hi_)) {
        throw ValidationError("image intensity range is inverted");
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        const float v = data_[i];
        if (!std::isfinite(v) || v < range_lo_ || v > range_hi_) {
            std::ostringstream os;
            os << "pixel value " << v << " at flat index " << i << " outside declared range ["
               << range_lo_ << ", " << range_hi_ << "]";
            throw ValidationError(os.str());
        }
    }
}

ImageTensor ImageTensor::zeros(std::size_t height, std::size_t width, std::size_t channels,
                               float range_lo, float range_hi) {
    return ImageTensor(height, width, channels, std::vector<float>(height * width * channels, 0.0f),
                       range_lo, range_hi);
}

Dataset::Dataset(std::vector<Sample> samples) : samples_(std::move(samples)) {
    std::unordered_set<std::string_view> seen;
    seen.reserve(samples_.size());
    for (const auto& s : samples_) {
        if (!seen.insert(s.id).second) {
            throw ValidationError("duplicate sample id \"" + s.id + "\"");
        }
        ++class_counts_[to_index(s.label)];
    }
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) {
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

} // namespace

Dataset dataset_from_manifest(std::istream& in, const std::filesystem::path& base_dir) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ValidationError("manifest is empty (missing header)");
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (line != "id,path,modality,label") {
        throw ValidationError("manifest header must be 'id,path,modality,label', got '" + line + "'");
    }

    std::vector<Sample> samples;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != 4) {
            throw ValidationError("manifest row " + std::to_string(row) + ": expected 4 fields, got " +
                                  std::to_string(fields.size()));
        }
        Sample s;
        s.id = fields[0];
        if (s.id.empty()) {
            throw ValidationError("manifest row " + std::to_string(row) + ": empty id");
        }
        std::filesystem::path p(fields[1]);
        s.source_path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;

        if (fields[2] == "xray") {
            s.modality = Modality::xray;
        } else if (fields[2] == "ct") {
            s.modality = Modality::ct;
        } else {
            throw ValidationError("manifest row " + std::to_string(row) + ": unknown modality '" +
                                  fields[2] + "'");
        }

        const auto& tok = fields[3];
        if (tok == "1" || tok == "positive") {
            s.label = Label::positive;
        } else if (tok == "0" || tok == "negative") {
            s.label = Label::negative;
        } else {
            throw ValidationError("manifest row " + std::to_string(row) + ": unknown label '" + tok +
                                  "'");
        }
        samples.push_back(std::move(s));
    }
    return Dataset(std::move(samples));
}

Dataset dataset_from_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw IoError("cannot open manifest " + manifest_path.string());
    }
    return dataset_from_manifest(in, manifest_path.parent_path());
}

std::array<std::size_t, kNumClasses> FeatureMatrix::class_counts() const noexcept {
    std::array<std::size_t, kNumClasses> counts{};
    for (Label l : labels) ++counts[to_index(l)];
    return counts;
}

const FeatureMatrix& feature_matrix_validate(const FeatureMatrix& m) {
    if (m.labels.size() != m.n) {
        throw ValidationError("label count " + std::to_string(m.labels.size()) + " ≠ row count " +
                              std::to_string(m.n));
    }
    if (m.sample_ids.size() != m.n) {
        throw ValidationError("sample id count " + std::to_string(m.sample_ids.size()) +
                              " ≠ row count " + std::to_string(m.n));
    }
    if (m.values.size() != m.n * m.d) {
        throw ValidationError("value count " + std::to_string(m.values.size()) + " ≠ " +
                              std::to_string(m.n) + "x" + std::to_string(m.d));
    }
    for (std::size_t i = 0; i < m.n; ++i) {
        for (std::size_t j = 0; j < m.d; ++j) {
            if (!std::isfinite(m.values[i * m.d + j])) {
                throw ValidationError("non-finite feature at row " + std::to_string(i) + ", column " +
                                      std::to_string(j));
            }
        }
        const auto raw = static_cast<unsigned>(m.labels[i]);
        if (raw > 1) {
            throw ValidationError("invalid label " + std::to_string(raw) + " at row " + std::to_string(i));
        }
    }
    return m;
}

} // namespace covifex
