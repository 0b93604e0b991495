#include "covifex/error.hpp"
#include "covifex/extract.hpp"

#include <opencv2/core.hpp>
#include <opencv2/dnn.hpp>

#include <cstring>

namespace covifex {

namespace {

class OnnxBackend final : public ExtractorBackend {
public:
    OnnxBackend(const std::filesystem::path& model_path, std::size_t height, std::size_t width,
                TensorLayout layout)
        : height_(height), width_(width), layout_(layout) {
        if (!std::filesystem::exists(model_path)) {
            throw IoError("model file not found: " + model_path.string());
        }
        try {
            net_ = cv::dnn::readNetFromONNX(model_path.string());
        } catch (const cv::Exception& e) {
            throw IoError("cannot load ONNX model " + model_path.string() + ": " + e.what());
        }
        if (net_.empty()) {
            throw IoError("empty network in " + model_path.string());
        }
        net_.setPreferableBackend(cv::dnn::DNN_BACKEND_OPENCV);
        net_.setPreferableTarget(cv::dnn::DNN_TARGET_CPU);

        auto probe = ImageTensor::zeros(height_, width_, 3, -1.0f, 1.0f);
        const ExtractionItem item{"<probe>", std::nullopt, &probe};
        output_dim_ = forward({&item, 1}).front().size();
        if (output_dim_ == 0) throw IoError("model " + model_path.string() + " produced no outputs");
    }

    std::string_view kind() const noexcept override { return "onnx"; }
    std::size_t output_dim() const noexcept override { return output_dim_; }

    std::vector<std::vector<float>> run(std::span<const ExtractionItem> batch) override {
        auto out = forward(batch);
        for (auto& row : out) {
            if (row.size() != output_dim_) {
                throw Error("internal error: network output width changed from " + std::to_string(output_dim_) +
                            " to " + std::to_string(row.size()));
            }
        }
        return out;
    }

private:
    std::vector<std::vector<float>> forward(std::span<const ExtractionItem> batch) {
        if (batch.empty()) return {};
        const int n = static_cast<int>(batch.size());
        const int h = static_cast<int>(height_);
        const int w = static_cast<int>(width_);
        std::vector<int> shape = layout_ == TensorLayout::nchw ? std::vector<int>{n, 3, h, w}
                                                                : std::vector<int>{n, h, w, 3};
        cv::Mat blob(shape, CV_32F);
        auto* dst = blob.ptr<float>();
        const std::size_t plane = height_ * width_;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const ImageTensor* img = batch[b].image;
            if (img == nullptr) {
                throw ValidationError("ONNX backend needs an image for sample \"" + std::string(batch[b].id) + "\"");
            }
            if (img->height() != height_ || img->width() != width_ || img->channels() != 3) {
                throw ValidationError("ONNX backend expects " + std::to_string(height_) + "x" +
                                      std::to_string(width_) + "x3 input, got " + std::to_string(img->height()) +
                                      "x" + std::to_string(img->width()) + "x" + std::to_string(img->channels()));
            }
            const auto src = img->data();
            float* base = dst + b * plane * 3;
            if (layout_ == TensorLayout::nhwc) {
                std::memcpy(base, src.data(), src.size() * sizeof(float));
            } else {
                for (std::size_t p = 0; p < plane; ++p) {
                    for (std::size_t c = 0; c < 3; ++c) base[c * plane + p] = src[p * 3 + c];
                }
            }
        }

        cv::Mat out;
        try {
            net_.setInput(blob);
            out = net_.forward();
        } catch (const cv::Exception& e) {
            throw Error(std::string("ONNX inference failed: ") + e.what());
        }
        if (!out.isContinuous()) out = out.clone();
        // Pooled outputs come back as [N, D] or [N, D, 1, 1] or [N, 1, D].
        const std::size_t total = out.total();
        if (total % batch.size() != 0) {
            throw Error("internal error: network output size " + std::to_string(total) +
                        " is not divisible by batch " + std::to_string(batch.size()));
        }
        const std::size_t per = total / batch.size();
        const auto* src = out.ptr<float>();
        std::vector<std::vector<float>> rows(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) rows[b].assign(src + b * per, src + (b + 1) * per);
        return rows;
    }

    cv::dnn::Net net_;
    std::size_t height_;
    std::size_t width_;
    TensorLayout layout_;
    std::size_t output_dim_ = 0;
};

} // namespace

std::unique_ptr<ExtractorBackend> make_onnx_backend(const std::filesystem::path& model_path,
                                                    std::size_t input_height, std::size_t input_width,
                                                    TensorLayout layout) {
    return std::make_unique<OnnxBackend>(model_path, input_height, input_width, layout);
}

} // namespace covifex
