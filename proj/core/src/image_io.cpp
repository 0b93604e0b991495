#include "covifex/image_io.hpp"

#include "covifex/error.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace covifex {

namespace {

ImageTensor from_mat(const cv::Mat& m) {
    if (m.empty()) {
        throw IoError("image could not be decoded");
    }
    const int depth = m.depth();
    if (depth != CV_8U && depth != CV_16U) {
        throw IoError("unsupported image bit depth");
    }
    const int cn = m.channels();
    if (cn != 1 && cn != 3 && cn != 4) {
        throw IoError("unsupported image channel count " + std::to_string(cn));
    }
    const std::size_t out_c = cn == 1 ? 1 : 3;
    const auto h = static_cast<std::size_t>(m.rows);
    const auto w = static_cast<std::size_t>(m.cols);
    const float scale = depth == CV_16U ? 1.0f / 257.0f : 1.0f;

    std::vector<float> data(h * w * out_c);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < out_c; ++c) {
                // OpenCV stores colour as BGR(A); emit RGB.
                const int src_c = out_c == 1 ? 0 : static_cast<int>(2 - c);
                float v = 0.0f;
                if (depth == CV_8U) {
                    v = m.ptr<std::uint8_t>(static_cast<int>(y))[x * cn + src_c];
                } else {
                    v = m.ptr<std::uint16_t>(static_cast<int>(y))[x * cn + src_c] * scale;
                }
                data[(y * w + x) * out_c + c] = std::min(v, 255.0f);
            }
        }
    }
    return ImageTensor(h, w, out_c, std::move(data), 0.0f, 255.0f);
}

} // namespace

ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) {
        throw IoError("empty image payload");
    }
    cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat m;
    try {
        m = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
    } catch (const cv::Exception& e) {
        throw IoError(std::string("image decode failed: ") + e.what());
    }
    return from_mat(m);
}

ImageTensor load_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open image " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_image(bytes);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
    const int cn = static_cast<int>(img.channels());
    if (cn != 1 && cn != 3) {
        throw ValidationError("PNG encoding needs 1 or 3 channels");
    }
    cv::Mat m(static_cast<int>(img.height()), static_cast<int>(img.width()), CV_8UC(cn));
    for (std::size_t y = 0; y < img.height(); ++y) {
        auto* row = m.ptr<std::uint8_t>(static_cast<int>(y));
        for (std::size_t x = 0; x < img.width(); ++x) {
            for (int c = 0; c < cn; ++c) {
                const int src_c = cn == 1 ? 0 : 2 - c;
                const float v = std::clamp(img.at(y, x, static_cast<std::size_t>(src_c)), 0.0f, 255.0f);
                row[x * cn + c] = static_cast<std::uint8_t>(std::lround(v));
            }
        }
    }
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", m, out)) {
        throw IoError("PNG encoding failed");
    }
    return out;
}

} // namespace covifex
