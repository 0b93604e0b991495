#include "covifex/service.hpp"

#include "binary_io.hpp"
#include "covifex/error.hpp"
#include "covifex/image_io.hpp"
#include "covifex/preprocess.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <random>
#include <thread>

namespace covifex {

using nlohmann::json;

void ServiceConfig::apply_environment() {
    if (const char* v = std::getenv("COVIFEX_MODEL"); v && *v) model_path = v;
    if (const char* v = std::getenv("COVIFEX_EXTRACTOR_MODEL"); v && *v) extractor_model_path = v;
    if (const char* v = std::getenv("COVIFEX_PORT"); v && *v) {
        char* end = nullptr;
        const long p = std::strtol(v, &end, 10);
        if (*end != '\0' || p < 0 || p > 65535) throw ValidationError(std::string("invalid COVIFEX_PORT '") + v + "'");
        port = static_cast<int>(p);
    }
}

std::string error_json(std::string_view code, std::string_view message) {
    return json{{"error", {{"code", code}, {"message", message}}}}.dump();
}

namespace {

class BackendPool {
public:
    void add(std::unique_ptr<ExtractorBackend> b) {
        std::lock_guard lock(mu_);
        free_.push_back(std::move(b));
        cv_.notify_one();
    }

    struct Lease {
        BackendPool* pool;
        std::unique_ptr<ExtractorBackend> backend;
        ~Lease() {
            if (backend) pool->add(std::move(backend));
        }
    };

    Lease acquire() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return !free_.empty(); });
        auto b = std::move(free_.back());
        free_.pop_back();
        return Lease{this, std::move(b)};
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::unique_ptr<ExtractorBackend>> free_;
};

double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string_view code_for_status(int status) {
    switch (status) {
    case 400: return "BAD_REQUEST";
    case 404: return "NOT_FOUND";
    case 405: return "METHOD_NOT_ALLOWED";
    case 413: return "PAYLOAD_TOO_LARGE";
    case 503: return "MODEL_NOT_LOADED";
    default: return status >= 500 ? "INTERNAL" : "HTTP_ERROR";
    }
}

} // namespace

struct PredictionService::Impl {
    DeploymentManifest manifest;
    TrainedModel model;
    BackendPool pool;
    std::mutex load_mu;
    std::string load_error;

    httplib::Server server;
    std::thread listener;
    bool running = false;

    std::mutex id_mu;
    std::mt19937_64 id_rng{std::random_device{}()};

    std::mutex log_mu;

    std::string next_request_id() {
        std::lock_guard lock(id_mu);
        char buf[20];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id_rng()));
        return buf;
    }

    void log(const std::string& line) {
        std::lock_guard lock(log_mu);
        std::cerr << line << '\n';
    }
};

PredictionService::PredictionService(ServiceConfig cfg) : impl_(std::make_unique<Impl>()), cfg_(std::move(cfg)) {
    if (cfg_.workers == 0) throw ValidationError("service needs at least one worker");
    if (cfg_.max_upload_bytes == 0) throw ValidationError("max_upload_bytes must be positive");
}

PredictionService::~PredictionService() { stop(); }

void PredictionService::load() {
    try {
        DeploymentManifest m = manifest_load(manifest_path_for(cfg_.model_path));
        TrainedModel model = model_load(cfg_.model_path);
        if (model.kind != m.classifier) {
            throw ValidationError("model file holds " + std::string(to_string(model.kind)) + ", manifest says " +
                                  std::string(to_string(m.classifier)));
        }
        if (model.feature_dim != m.feature_dim) {
            throw ValidationError("model expects " + std::to_string(model.feature_dim) + " features, manifest says " +
                                  std::to_string(m.feature_dim));
        }
        m.preprocess.validate();
        for (std::size_t w = 0; w < cfg_.workers; ++w) {
            std::unique_ptr<ExtractorBackend> b;
            if (m.extractor_backend == "stub") {
                b = std::make_unique<StubBackend>(m.feature_dim, m.stub_seed);
            } else {
                if (cfg_.extractor_model_path.empty()) {
                    throw ValidationError("extractor '" + m.extractor + "' needs an extractor model file");
                }
                b = make_onnx_backend(cfg_.extractor_model_path, m.input_height, m.input_width);
            }
            if (b->output_dim() != m.feature_dim) {
                throw ValidationError("extractor produces " + std::to_string(b->output_dim()) +
                                      " features, model expects " + std::to_string(m.feature_dim));
            }
            impl_->pool.add(std::move(b));
        }
        impl_->manifest = std::move(m);
        impl_->model = std::move(model);
        loaded_.store(true);
    } catch (const std::exception& e) {
        std::lock_guard lock(impl_->load_mu);
        impl_->load_error = e.what();
        throw;
    }
}

const DeploymentManifest& PredictionService::manifest() const {
    if (!loaded()) throw ServiceError(503, "MODEL_NOT_LOADED", "model not loaded");
    return impl_->manifest;
}

Prediction PredictionService::predict(std::span<const std::uint8_t> encoded_image) {
    if (!loaded()) throw ServiceError(503, "MODEL_NOT_LOADED", "model not loaded");
    if (encoded_image.size() > cfg_.max_upload_bytes) {
        throw ServiceError(413, "PAYLOAD_TOO_LARGE",
                           "upload exceeds " + std::to_string(cfg_.max_upload_bytes) + " bytes");
    }
    Prediction p;
    p.request_id = impl_->next_request_id();
    const auto start = std::chrono::steady_clock::now();

    auto t = std::chrono::steady_clock::now();
    ImageTensor raw;
    try {
        raw = decode_image(encoded_image);
    } catch (const Error& e) {
        throw ServiceError(400, "BAD_IMAGE", e.what());
    }
    p.timing.decode_ms = ms_since(t);

    t = std::chrono::steady_clock::now();
    PreprocessResult pre;
    try {
        pre = preprocess_pipeline(raw, impl_->manifest.preprocess);
    } catch (const ValidationError& e) {
        throw ServiceError(400, "BAD_IMAGE", e.what());
    }
    p.timing.preprocess_ms = ms_since(t);

    t = std::chrono::steady_clock::now();
    std::vector<float> features;
    {
        auto lease = impl_->pool.acquire();
        const ExtractionItem item{p.request_id, std::nullopt, &pre.image};
        auto out = lease.backend->run(std::span<const ExtractionItem>(&item, 1));
        features = std::move(out.at(0));
    }
    p.timing.extract_ms = ms_since(t);

    t = std::chrono::steady_clock::now();
    p.probability_positive = predict_proba(impl_->model, features)[to_index(Label::positive)];
    p.positive = p.probability_positive > 0.5;
    p.timing.classify_ms = ms_since(t);
    p.timing.total_ms = ms_since(start);

    if (cfg_.audit_dir) {
        detail::write_file(*cfg_.audit_dir / (p.request_id + ".upload"), encoded_image);
        const std::string body = prediction_json(p);
        detail::write_file(*cfg_.audit_dir / (p.request_id + ".json"),
                           std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(body.data()),
                                                         body.size()));
    }
    return p;
}

std::string PredictionService::prediction_json(const Prediction& p) const {
    const auto& m = manifest();
    json model{{"extractor", m.extractor},
               {"classifier", std::string(to_string(m.classifier))},
               {"classifier_display_name", std::string(display_name(m.classifier))},
               {"report_checksum", m.metrics ? json(m.metrics->report_checksum) : json(nullptr)},
               {"grid_seed", m.metrics ? json(m.metrics->grid_seed) : json(nullptr)}};
    json j{{"request_id", p.request_id},
           {"label", p.positive ? kLabelPositive : kLabelNegative},
           {"probability_positive", p.probability_positive},
           {"threshold", 0.5},
           {"model", model},
           {"timing_ms",
            {{"decode", p.timing.decode_ms},
             {"preprocess", p.timing.preprocess_ms},
             {"extract", p.timing.extract_ms},
             {"classify", p.timing.classify_ms},
             {"total", p.timing.total_ms}}},
           {"disclaimer", kDisclaimer}};
    return j.dump();
}

std::string PredictionService::model_json() const {
    json j = json::parse(manifest_to_json(manifest()));
    j["model_loaded"] = true;
    return j.dump();
}

std::string PredictionService::health_json() const {
    if (loaded()) return json{{"status", "ok"}, {"model_loaded", true}}.dump();
    std::lock_guard lock(impl_->load_mu);
    if (!impl_->load_error.empty()) {
        return json{{"status", "error"}, {"model_loaded", false}, {"message", impl_->load_error}}.dump();
    }
    return json{{"status", "starting"}, {"model_loaded", false}}.dump();
}

int PredictionService::start() {
    if (impl_->running) throw ValidationError("service already started");
    auto& srv = impl_->server;
    constexpr const char* kJson = "application/json; charset=utf-8";

    srv.new_task_queue = [n = cfg_.workers] { return new httplib::ThreadPool(n); };
    srv.set_payload_max_length(cfg_.max_upload_bytes);
    srv.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                             {"Access-Control-Allow-Headers", "Content-Type"},
                             {"Cache-Control", "no-store"}});

    auto fail = [kJson](httplib::Response& res, int status, std::string_view code, std::string_view message) {
        res.status = status;
        res.set_content(error_json(code, message), kJson);
    };

    srv.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    srv.Get("/api/v1/health", [this, kJson](const httplib::Request&, httplib::Response& res) {
        res.set_content(health_json(), kJson);
    });

    srv.Get("/api/v1/model", [this, kJson, fail](const httplib::Request&, httplib::Response& res) {
        if (!loaded()) return fail(res, 503, "MODEL_NOT_LOADED", "model not loaded");
        res.set_content(model_json(), kJson);
    });

    srv.Post("/api/v1/predict", [this, kJson, fail](const httplib::Request& req, httplib::Response& res) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string outcome;
        if (!loaded()) {
            fail(res, 503, "MODEL_NOT_LOADED", "model not loaded");
            outcome = "MODEL_NOT_LOADED";
        } else if (!req.is_multipart_form_data() || !req.has_file("image")) {
            fail(res, 400, "MISSING_IMAGE", "expected multipart/form-data with an 'image' field");
            outcome = "MISSING_IMAGE";
        } else {
            const auto file = req.get_file_value("image");
            try {
                const Prediction p = predict(std::span<const std::uint8_t>(
                    reinterpret_cast<const std::uint8_t*>(file.content.data()), file.content.size()));
                res.set_content(prediction_json(p), kJson);
                outcome = "request_id=" + p.request_id + " label=\"" +
                          std::string(p.positive ? kLabelPositive : kLabelNegative) + "\"";
            } catch (const ServiceError& e) {
                fail(res, e.status, e.code, e.what());
                outcome = e.code;
            }
        }
        if (cfg_.log_requests) {
            char buf[64];
            std::snprintf(buf, sizeof buf, " status=%d ms=%.2f", res.status, ms_since(t0));
            impl_->log("predict " + outcome + buf);
        }
    });

    srv.set_exception_handler([fail](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        fail(res, 500, "INTERNAL", what);
    });

    srv.set_error_handler([kJson](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
        res.set_content(error_json(code_for_status(res.status), httplib::status_message(res.status)), kJson);
        return httplib::Server::HandlerResponse::Handled;
    });

    int port = cfg_.port;
    if (port == 0) {
        port = srv.bind_to_any_port(cfg_.host);
        if (port < 0) throw IoError("cannot bind " + cfg_.host);
    } else if (!srv.bind_to_port(cfg_.host, port)) {
        throw IoError("cannot bind " + cfg_.host + ":" + std::to_string(port));
    }
    impl_->running = true;
    impl_->listener = std::thread([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    return port;
}

void PredictionService::stop() {
    if (!impl_ || !impl_->running) return;
    impl_->server.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
    impl_->running = false;
}

void PredictionService::wait() {
    if (impl_->listener.joinable()) impl_->listener.join();
    impl_->running = false;
}

} // namespace covifex
