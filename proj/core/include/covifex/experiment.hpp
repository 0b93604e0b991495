#pragma once

#include "covifex/ensemble.hpp"
#include "covifex/eval.hpp"
#include "covifex/extract.hpp"
#include "covifex/preprocess.hpp"
#include "covifex/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace covifex {

// Where one grid row gets its features from. Exactly one of `file`,
// `matrix` or (`dataset`, `make_backend`) is used, in that priority.
struct FeatureSource {
    std::string extractor;
    std::optional<std::filesystem::path> file;
    std::optional<FeatureMatrix> matrix;
    const Dataset* dataset = nullptr;
    std::function<std::unique_ptr<ExtractorBackend>()> make_backend;
    std::optional<PreprocessConfig> preprocess;  // live extraction; defaults to the extractor input size
    std::size_t batch_size = 8;

    static FeatureSource from_file(std::string extractor, std::filesystem::path path);
    static FeatureSource from_matrix(std::string extractor, FeatureMatrix m);
    static FeatureSource live(std::string extractor, const Dataset& ds,
                              std::function<std::unique_ptr<ExtractorBackend>()> make_backend);
};

struct GridConfig {
    // Row order of the report; each name needs a matching FeatureSource.
    std::vector<std::string> extractors;
    std::vector<ClassifierKind> classifiers{kAllClassifiers.begin(), kAllClassifiers.end()};
    std::size_t k = 10;
    std::uint64_t seed = 42;
    // Replaces the kind's defaults wholesale. Without an override the
    // defaults are used with rng_seed set to `seed`.
    std::map<ClassifierKind, EnsembleConfig> overrides;
    std::size_t n_threads = 1;

    EnsembleConfig config_for(ClassifierKind kind) const;
    void validate() const;
};

struct EnvironmentRecord {
    std::string host;
    std::string os;
    std::string compiler;
    std::string build_type;
    std::string clock = "std::chrono::steady_clock";
    unsigned hardware_threads = 0;
    std::string started_at;  // UTC, ISO 8601
};

EnvironmentRecord capture_environment();

struct ExtractorRecord {
    std::string name;
    std::size_t n = 0;
    std::size_t d = 0;
    std::string source;  // "file", "memory" or "live:<backend kind>"
    std::optional<ExtractionTiming> extraction;
    FoldPlan plan;
};

struct GridCell {
    std::string extractor;
    ClassifierKind classifier = ClassifierKind::decision_tree;
    EnsembleConfig config;
    MetricSummary summary;
};

struct GridReport {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::vector<ExtractorRecord> extractors;
    std::vector<ClassifierKind> classifiers;
    // Extractor-major, classifiers in `classifiers` order.
    std::vector<GridCell> cells;
    EnvironmentRecord environment;
    std::size_t best = 0;

    const GridCell& cell(std::string_view extractor, ClassifierKind kind) const;
    const GridCell& best_cell() const { return cells.at(best); }
};

// Highest mean accuracy; ties go to the lower mean train time, then to the
// earlier cell.
std::size_t select_best(const std::vector<GridCell>& cells);

// Loads or extracts every source before any training (missing inputs fail
// here), then cross-validates each (extractor, classifier) pair. Extractors
// whose sample ids match the first one reuse its fold plan, remapped by id.
// If `features_out` is given it receives the feature matrices by name.
GridReport run_grid(const std::vector<FeatureSource>& sources, const GridConfig& cfg,
                    std::map<std::string, FeatureMatrix>* features_out = nullptr);

enum class ReportMetric { accuracy, precision, recall, f1 };

inline constexpr std::array<ReportMetric, 4> kReportMetrics{ReportMetric::accuracy, ReportMetric::precision,
                                                            ReportMetric::recall, ReportMetric::f1};

std::string_view to_string(ReportMetric m) noexcept;

// Raw per-fold values; carries no timings, so it is reproducible byte for byte.
std::string render_metric_csv(const GridReport& r, ReportMetric metric);
std::string render_metric_markdown(const GridReport& r, ReportMetric metric);
std::string render_timing_csv(const GridReport& r);
std::string render_timing_markdown(const GridReport& r);

// "crc32:xxxxxxxx" over the four metric CSVs, concatenated in table order.
std::string report_checksum(const GridReport& r);

// "99.00 ± 0.07" from fractions.
std::string format_mean_std(double mean, double std);
// "97.00%"
std::string format_percent(double value);

// Lossless: report_from_json(report_to_json(r)) re-renders identical files.
std::string report_to_json(const GridReport& r);
GridReport report_from_json(std::string_view text);

struct ReportFiles {
    std::vector<std::filesystem::path> files;
    std::string checksum;
};

struct ReportFormats {
    bool csv = true;
    bool markdown = true;
    bool json = true;
};

// report_{accuracy,precision,recall,f1,timing}.{csv,md} plus report.json.
ReportFiles emit_report(const GridReport& r, const std::filesystem::path& out_dir, ReportFormats formats = {});

struct MetricsProvenance {
    MetricStats accuracy;
    MetricStats precision;
    MetricStats recall;
    MetricStats f1;
    std::size_t k = 0;
    std::uint64_t grid_seed = 0;
    std::string report_checksum;
};

// Sidecar `<model>.json` next to a `.cvmd` file; everything the service
// needs to rebuild the inference pipeline.
struct DeploymentManifest {
    std::string model_file;  // relative to the manifest's directory
    std::string extractor;
    std::string extractor_backend;  // "onnx" or "stub"
    std::size_t input_height = 0;
    std::size_t input_width = 0;
    std::size_t feature_dim = 0;
    std::uint64_t stub_seed = 0;
    ClassifierKind classifier = ClassifierKind::decision_tree;
    EnsembleConfig config;
    PreprocessConfig preprocess;
    std::size_t n_train = 0;
    std::optional<MetricsProvenance> metrics;
};

std::filesystem::path manifest_path_for(const std::filesystem::path& model_path);

std::string manifest_to_json(const DeploymentManifest& m);
DeploymentManifest manifest_from_json(std::string_view text);
void manifest_save(const DeploymentManifest& m, const std::filesystem::path& path);
DeploymentManifest manifest_load(const std::filesystem::path& path);

// Fills the extractor fields of a manifest from the registry or the stub.
DeploymentManifest manifest_for(std::string_view extractor, std::size_t feature_dim);

// Trains `kind` on every row of `features`, writes the model and its sidecar.
DeploymentManifest deploy_model(ClassifierKind kind, const EnsembleConfig& cfg, const FeatureMatrix& features,
                                const std::filesystem::path& model_path,
                                std::optional<MetricsProvenance> metrics = std::nullopt,
                                std::uint64_t stub_seed = 0);

// Retrains the report's best pair on all rows and deploys it with the
// report's metrics, seed and checksum as provenance.
DeploymentManifest export_best_model(const GridReport& r, const FeatureMatrix& best_features,
                                     const std::filesystem::path& model_path, std::uint64_t stub_seed = 0);

} // namespace covifex
