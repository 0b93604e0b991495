#include "covifex/synthetic.hpp"

#include "binary_io.hpp"
#include "covifex/error.hpp"
#include "covifex/image_io.hpp"
#include "covifex/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace covifex {

FeatureMatrix reference_dataset(const ReferenceDatasetConfig& cfg) {
    if (cfg.n < 2 || cfg.d < 1) throw ValidationError("reference dataset needs n >= 2 and d >= 1");
    FeatureMatrix m;
    m.n = cfg.n;
    m.d = cfg.d;
    m.extractor_name = "reference";
    m.values.resize(cfg.n * cfg.d);
    m.labels.resize(cfg.n);
    m.sample_ids.resize(cfg.n);

    Rng rng(cfg.seed);
    const double half = 0.5 * cfg.separation;
    char id[32];
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const Label y = (i % 2 == 1) ? Label::positive : Label::negative;
        m.labels[i] = y;
        std::snprintf(id, sizeof id, "ref-%04zu", i);
        m.sample_ids[i] = id;
        for (std::size_t j = 0; j < cfg.d; ++j) {
            double v = standard_normal(rng);
            if (j == 0) v += y == Label::positive ? half : -half;
            m.values[i * cfg.d + j] = static_cast<float>(v);
        }
    }
    return m;
}

ImageTensor synthetic_image(Label label, std::size_t height, std::size_t width, std::uint64_t seed) {
    if (height < 8 || width < 8) throw ValidationError("synthetic images need at least 8x8 pixels");
    Rng rng(seed);
    const double cy = 0.5 * static_cast<double>(height - 1);
    const double cx = 0.5 * static_cast<double>(width - 1);
    const double base = 60.0 + 40.0 * uniform01(rng);

    // patch centre within the middle half of the frame
    const double py = cy + (uniform01(rng) - 0.5) * 0.5 * static_cast<double>(height);
    const double px = cx + (uniform01(rng) - 0.5) * 0.5 * static_cast<double>(width);
    const double radius = 0.18 * static_cast<double>(std::min(height, width)) * (0.8 + 0.4 * uniform01(rng));
    const double amp = label == Label::positive ? 110.0 + 30.0 * uniform01(rng) : 0.0;

    std::vector<float> px_values(height * width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double ry = (static_cast<double>(y) - cy) / cy;
            const double rx = (static_cast<double>(x) - cx) / cx;
            double v = base * (1.0 - 0.45 * (ry * ry + rx * rx));
            const double dy = static_cast<double>(y) - py;
            const double dx = static_cast<double>(x) - px;
            v += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
            v += 6.0 * standard_normal(rng);
            px_values[y * width + x] = static_cast<float>(std::round(std::clamp(v, 0.0, 255.0)));
        }
    }
    return ImageTensor(height, width, 1, std::move(px_values), 0.0f, 255.0f);
}

Dataset write_synthetic_images(const std::filesystem::path& dir, const SyntheticImageConfig& cfg) {
    if (cfg.n_per_class == 0) throw ValidationError("n_per_class must be >= 1");
    std::filesystem::create_directories(dir);
    const auto manifest_path = dir / "manifest.csv";
    std::ofstream manifest(manifest_path, std::ios::binary);
    if (!manifest) throw IoError("cannot write " + manifest_path.string());
    manifest << "id,path,modality,label\n";

    char name[64];
    std::size_t index = 0;
    for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
        for (Label y : {Label::negative, Label::positive}) {
            std::snprintf(name, sizeof name, "%s-%03zu", y == Label::positive ? "pos" : "neg", i);
            const ImageTensor img = synthetic_image(y, cfg.height, cfg.width, derive_seed(cfg.seed, index++));
            const std::string file = std::string(name) + ".png";
            detail::write_file(dir / file, encode_png(img));
            manifest << name << ',' << file << ",xray," << static_cast<int>(to_index(y)) << '\n';
        }
    }
    manifest.close();
    if (!manifest) throw IoError("cannot write " + manifest_path.string());
    return dataset_from_manifest(manifest_path);
}

} // namespace covifex
