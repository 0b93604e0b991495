#include "covifex/preprocess.hpp"

#include "covifex/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace covifex {

void PreprocessConfig::validate() const {
    if (target_height < 1 || target_width < 1) {
        throw ValidationError("preprocess target dimensions must be >= 1");
    }
    for (float m : mean_rgb) {
        if (!std::isfinite(m)) throw ValidationError("preprocess mean_rgb must be finite");
    }
}

namespace {

struct Tap {
    std::size_t lo;
    std::size_t hi;
    double frac;
};

// Source taps for every destination index along one axis.
std::vector<Tap> axis_taps(std::size_t src, std::size_t dst) {
    std::vector<Tap> taps(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    const double max_pos = static_cast<double>(src - 1);
    for (std::size_t i = 0; i < dst; ++i) {
        double pos = (static_cast<double>(i) + 0.5) * scale - 0.5;
        pos = std::clamp(pos, 0.0, max_pos);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, src - 1);
        taps[i] = {lo, hi, pos - static_cast<double>(lo)};
    }
    return taps;
}

} // namespace

ImageTensor resize_bilinear(const ImageTensor& img, std::size_t target_height, std::size_t target_width) {
    if (target_height < 1 || target_width < 1) {
        throw ValidationError("resize target dimensions must be >= 1");
    }
    const std::size_t c = img.channels();
    const auto ys = axis_taps(img.height(), target_height);
    const auto xs = axis_taps(img.width(), target_width);

    std::vector<float> out(target_height * target_width * c);
    float lo = img.range_lo();
    float hi = img.range_hi();
    for (std::size_t y = 0; y < target_height; ++y) {
        const auto& ty = ys[y];
        for (std::size_t x = 0; x < target_width; ++x) {
            const auto& tx = xs[x];
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double top = img.at(ty.lo, tx.lo, ch) * (1.0 - tx.frac) + img.at(ty.lo, tx.hi, ch) * tx.frac;
                const double bot = img.at(ty.hi, tx.lo, ch) * (1.0 - tx.frac) + img.at(ty.hi, tx.hi, ch) * tx.frac;
                auto v = static_cast<float>(top * (1.0 - ty.frac) + bot * ty.frac);
                // Rounding can push a convex combination one ulp past its inputs.
                v = std::clamp(v, lo, hi);
                out[(y * target_width + x) * c + ch] = v;
            }
        }
    }
    return ImageTensor(target_height, target_width, c, std::move(out), lo, hi);
}

ImageTensor grayscale_to_rgb(const ImageTensor& img) {
    if (img.channels() == 3) return img;
    if (img.channels() != 1) {
        throw ValidationError("unsupported channel count " + std::to_string(img.channels()));
    }
    const auto src = img.data();
    std::vector<float> out(src.size() * 3);
    for (std::size_t i = 0; i < src.size(); ++i) {
        out[3 * i] = out[3 * i + 1] = out[3 * i + 2] = src[i];
    }
    return ImageTensor(img.height(), img.width(), 3, std::move(out), img.range_lo(), img.range_hi());
}

NormalizeResult min_max_normalize(const ImageTensor& img) {
    const auto src = img.data();
    const auto [mn_it, mx_it] = std::minmax_element(src.begin(), src.end());
    const float mn = *mn_it;
    const float mx = *mx_it;
    std::vector<float> out(src.size(), 0.0f);
    if (mx == mn) {
        return {ImageTensor(img.height(), img.width(), img.channels(), std::move(out), 0.0f, 1.0f), true};
    }
    const double span = static_cast<double>(mx) - static_cast<double>(mn);
    for (std::size_t i = 0; i < src.size(); ++i) {
        out[i] = static_cast<float>((static_cast<double>(src[i]) - mn) / span);
    }
    return {ImageTensor(img.height(), img.width(), img.channels(), std::move(out), 0.0f, 1.0f), false};
}

ImageTensor mean_subtract(const ImageTensor& img, const std::array<float, 3>& mean_rgb) {
    if (img.channels() != 3) {
        throw ValidationError("mean subtraction needs 3 channels, got " + std::to_string(img.channels()) +
                              " (convert grayscale first)");
    }
    const auto src = img.data();
    std::vector<float> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        out[i] = src[i] - mean_rgb[i % 3];
    }
    const auto [mn, mx] = std::minmax_element(mean_rgb.begin(), mean_rgb.end());
    // Widen by one ulp each side so float subtraction never escapes the bound.
    const float lo = std::nextafter(img.range_lo() - *mx, -INFINITY);
    const float hi = std::nextafter(img.range_hi() - *mn, INFINITY);
    return ImageTensor(img.height(), img.width(), 3, std::move(out), lo, hi);
}

PreprocessResult preprocess_pipeline(const ImageTensor& img, const PreprocessConfig& cfg) {
    cfg.validate();
    ImageTensor cur = resize_bilinear(grayscale_to_rgb(img), cfg.target_height, cfg.target_width);
    bool constant = false;
    if (cfg.normalize_min_max) {
        auto r = min_max_normalize(cur);
        cur = std::move(r.image);
        constant = r.constant_input;
    }
    if (cfg.apply_mean_subtraction) {
        cur = mean_subtract(cur, cfg.mean_rgb);
    }
    return {std::move(cur), constant};
}

} // namespace covifex
