#pragma once

#include "covifex/error.hpp"
#include "covifex/experiment.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>

namespace covifex {

inline constexpr std::string_view kDisclaimer =
    "Research prototype. Not yet approved for diagnostic use; it has not been clinically validated. "
    "Results must be reviewed by a qualified physician.";

inline constexpr std::string_view kLabelPositive = "COVID-19 Positive";
inline constexpr std::string_view kLabelNegative = "COVID-19 Negative";

struct ServiceConfig {
    std::filesystem::path model_path;
    // ONNX network for registry extractors; ignored for the stub.
    std::filesystem::path extractor_model_path;
    std::string host = "0.0.0.0";
    int port = 8080;  // 0 picks a free port
    std::size_t max_upload_bytes = 20u * 1024u * 1024u;
    std::size_t workers = 4;
    std::string cors_origin = "*";
    // Uploads and responses are written here only when set.
    std::optional<std::filesystem::path> audit_dir;
    bool log_requests = true;

    // COVIFEX_MODEL, COVIFEX_EXTRACTOR_MODEL and COVIFEX_PORT override the
    // corresponding fields when set.
    void apply_environment();
};

struct StageTiming {
    double decode_ms = 0.0;
    double preprocess_ms = 0.0;
    double extract_ms = 0.0;
    double classify_ms = 0.0;
    double total_ms = 0.0;
};

struct Prediction {
    std::string request_id;
    bool positive = false;
    double probability_positive = 0.0;
    StageTiming timing;
};

// Errors carry an HTTP status and a stable machine-readable code.
struct ServiceError : Error {
    int status;
    std::string code;
    ServiceError(int status, std::string code, const std::string& message)
        : Error(message), status(status), code(std::move(code)) {}
};

class PredictionService {
public:
    explicit PredictionService(ServiceConfig cfg);
    ~PredictionService();

    PredictionService(const PredictionService&) = delete;
    PredictionService& operator=(const PredictionService&) = delete;

    // Loads manifest, model and one extractor backend per worker. Throws on
    // failure and leaves the service unloaded.
    void load();
    bool loaded() const noexcept { return loaded_.load(); }

    const DeploymentManifest& manifest() const;

    // Decode -> preprocess -> extract -> classify. Throws ServiceError.
    Prediction predict(std::span<const std::uint8_t> encoded_image);

    // JSON bodies as served.
    std::string prediction_json(const Prediction& p) const;
    std::string model_json() const;
    std::string health_json() const;

    // Starts the HTTP listener on a background thread and returns the bound
    // port. The model may be loaded before or after this call.
    int start();
    void stop();
    // Blocks until the listener exits.
    void wait();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    ServiceConfig cfg_;
    std::atomic<bool> loaded_{false};
};

std::string error_json(std::string_view code, std::string_view message);

} // namespace covifex
