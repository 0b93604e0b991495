#include "covifex/error.hpp"
#include "covifex/experiment.hpp"
#include "covifex/image_io.hpp"
#include "covifex/service.hpp"
#include "covifex/synthetic.hpp"
#include "support/json_schema.hpp"
#include "support/temp_dir.hpp"

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>

#include <fstream>
#include <future>
#include <sstream>

using namespace covifex;
using nlohmann::json;

namespace {

json load_schema(const std::string& name) {
    std::ifstream in(std::filesystem::path(COVIFEX_SOURCE_DIR) / "schema" / name);
    return json::parse(in);
}

std::string png_bytes(Label label, std::uint64_t seed) {
    const auto bytes = encode_png(synthetic_image(label, 80, 80, seed));
    return std::string(bytes.begin(), bytes.end());
}

httplib::MultipartFormDataItems image_form(const std::string& content, const std::string& name = "image") {
    return {{name, content, "upload.png", "image/png"}};
}

// Stub-extractor model trained on synthetic images, shared by all tests here.
class ServiceTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new covifex::testing::TempDir("covifex-service");
        SyntheticImageConfig sc;
        sc.n_per_class = 15;
        sc.height = 80;
        sc.width = 80;
        const auto ds = write_synthetic_images(dir_->path() / "images", sc);
        const auto spec = stub_extractor_spec();
        StubBackend backend(24, kStubSeed);
        auto feats = extract_features(ds, spec, preprocess_config_for(spec), backend).features;
        GridConfig cfg;
        cfg.extractors = {"Stub"};
        cfg.k = 3;
        cfg.classifiers = {ClassifierKind::decision_tree, ClassifierKind::random_forest};
        auto rf = EnsembleConfig::defaults_for(ClassifierKind::random_forest);
        rf.n_estimators = 15;
        cfg.overrides[ClassifierKind::random_forest] = rf;
        std::map<std::string, FeatureMatrix> out;
        report_ = new GridReport(run_grid({FeatureSource::from_matrix("Stub", feats)}, cfg, &out));
        model_path_ = dir_->path() / "best.cvmd";
        export_best_model(*report_, out.at("Stub"), model_path_, kStubSeed);
    }
    static void TearDownTestSuite() {
        delete report_;
        delete dir_;
    }

    static ServiceConfig config() {
        ServiceConfig c;
        c.model_path = model_path_;
        c.host = "127.0.0.1";
        c.port = 0;
        c.workers = 3;
        c.log_requests = false;
        return c;
    }

    static constexpr std::uint64_t kStubSeed = 11;
    static inline covifex::testing::TempDir* dir_ = nullptr;
    static inline GridReport* report_ = nullptr;
    static inline std::filesystem::path model_path_;
};

} // namespace

TEST_F(ServiceTest, HealthStartingBeforeLoadThenOk) {
    PredictionService svc(config());
    const int port = svc.start();
    httplib::Client cli("127.0.0.1", port);
    auto res = cli.Get("/api/v1/health");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(json::parse(res->body), json::parse(R"({"status":"starting","model_loaded":false})"));

    res = cli.Post("/api/v1/predict", image_form(png_bytes(Label::positive, 1)));
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 503);
    EXPECT_EQ(json::parse(res->body)["error"]["code"], "MODEL_NOT_LOADED");
    EXPECT_EQ(cli.Get("/api/v1/model")->status, 503);

    svc.load();
    res = cli.Get("/api/v1/health");
    EXPECT_EQ(json::parse(res->body)["model_loaded"], true);
    EXPECT_EQ(json::parse(res->body)["status"], "ok");
    svc.stop();
}

TEST_F(ServiceTest, PredictReturnsSchemaValidResponse) {
    PredictionService svc(config());
    svc.load();
    const int port = svc.start();
    httplib::Client cli("127.0.0.1", port);
    const auto schema = load_schema("prediction_response.schema.json");
    for (auto label : {Label::negative, Label::positive}) {
        auto res = cli.Post("/api/v1/predict", image_form(png_bytes(label, 99)));
        ASSERT_TRUE(res);
        ASSERT_EQ(res->status, 200) << res->body;
        EXPECT_EQ(res->get_header_value("Content-Type"), "application/json; charset=utf-8");
        const auto body = json::parse(res->body);
        const auto errors = covifex::testing::schema_validate(schema, body);
        EXPECT_TRUE(errors.empty()) << errors.front();
        const double p = body["probability_positive"];
        EXPECT_EQ(body["label"], p > 0.5 ? "COVID-19 Positive" : "COVID-19 Negative");
        EXPECT_EQ(body["disclaimer"], std::string(kDisclaimer));
        EXPECT_EQ(body["model"]["extractor"], "Stub");
        EXPECT_EQ(body["model"]["report_checksum"], report_checksum(*report_));
    }
}

TEST_F(ServiceTest, ErrorsUseEnvelope) {
    auto cfg = config();
    cfg.max_upload_bytes = 4096;
    PredictionService svc(cfg);
    svc.load();
    httplib::Client cli("127.0.0.1", svc.start());
    const auto schema = load_schema("error_response.schema.json");
    auto check = [&](const httplib::Result& res, int status, const std::string& code) {
        ASSERT_TRUE(res);
        EXPECT_EQ(res->status, status);
        const auto body = json::parse(res->body);
        EXPECT_EQ(body["error"]["code"], code) << res->body;
        const auto errors = covifex::testing::schema_validate(schema, body);
        EXPECT_TRUE(errors.empty()) << errors.front();
    };
    check(cli.Post("/api/v1/predict", image_form("hello, this is a text file")), 400, "BAD_IMAGE");
    check(cli.Post("/api/v1/predict", image_form("tiny", "file")), 400, "MISSING_IMAGE");
    check(cli.Post("/api/v1/predict", "{}", "application/json"), 400, "MISSING_IMAGE");
    check(cli.Post("/api/v1/predict", image_form(std::string(10000, 'x'))), 413, "PAYLOAD_TOO_LARGE");
    check(cli.Get("/api/v1/nothing"), 404, "NOT_FOUND");
}

TEST_F(ServiceTest, CorsHeadersPresent) {
    auto cfg = config();
    cfg.cors_origin = "http://localhost:4200";
    PredictionService svc(cfg);
    httplib::Client cli("127.0.0.1", svc.start());
    auto res = cli.Get("/api/v1/health");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "http://localhost:4200");
    res = cli.Options("/api/v1/predict");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 204);
    EXPECT_NE(res->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}

TEST_F(ServiceTest, ConcurrentIdenticalRequestsAgree) {
    PredictionService svc(config());
    svc.load();
    const int port = svc.start();
    const std::string img = png_bytes(Label::positive, 5);
    std::vector<std::future<double>> results;
    for (int i = 0; i < 12; ++i) {
        results.push_back(std::async(std::launch::async, [&, port] {
            httplib::Client cli("127.0.0.1", port);
            auto res = cli.Post("/api/v1/predict", image_form(img));
            if (!res || res->status != 200) return -1.0;
            return json::parse(res->body)["probability_positive"].get<double>();
        }));
    }
    const double first = results[0].get();
    ASSERT_GE(first, 0.0);
    for (std::size_t i = 1; i < results.size(); ++i) EXPECT_EQ(results[i].get(), first);
}

TEST_F(ServiceTest, ModelEndpointEchoesManifest) {
    PredictionService svc(config());
    svc.load();
    httplib::Client cli("127.0.0.1", svc.start());
    auto res = cli.Get("/api/v1/model");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    const auto body = json::parse(res->body);
    EXPECT_EQ(body["extractor"]["name"], "Stub");
    EXPECT_EQ(body["classifier"]["kind"], std::string(to_string(report_->best_cell().classifier)));
    EXPECT_EQ(body["provenance"]["report_checksum"], report_checksum(*report_));
    EXPECT_EQ(body["provenance"]["grid_seed"], 42);
    EXPECT_EQ(body["model_loaded"], true);
}

TEST_F(ServiceTest, InProcessPredictMatchesOfflinePipeline) {
    PredictionService svc(config());
    svc.load();
    const auto img = synthetic_image(Label::positive, 80, 80, 17);
    const auto bytes = encode_png(img);
    const auto p = svc.predict(bytes);

    // offline: decode, preprocess, stub features, saved model
    const auto m = manifest_load(manifest_path_for(model_path_));
    const auto pre = preprocess_pipeline(decode_image(bytes), m.preprocess);
    StubBackend backend(m.feature_dim, m.stub_seed);
    const ExtractionItem item{"x", std::nullopt, &pre.image};
    const auto feats = backend.run(std::span(&item, 1))[0];
    const auto model = model_load(model_path_);
    EXPECT_EQ(p.probability_positive, predict_proba(model, feats)[1]);
    EXPECT_EQ(svc.predict(bytes).probability_positive, p.probability_positive);
    EXPECT_NE(svc.predict(bytes).request_id, p.request_id);
    EXPECT_GE(p.timing.total_ms, p.timing.classify_ms);
}

TEST_F(ServiceTest, AuditDirectoryOnlyWhenEnabled) {
    covifex::testing::TempDir audit;
    auto cfg = config();
    cfg.audit_dir = audit.path();
    PredictionService svc(cfg);
    svc.load();
    const auto p = svc.predict(encode_png(synthetic_image(Label::negative, 40, 40, 1)));
    EXPECT_TRUE(std::filesystem::exists(audit.path() / (p.request_id + ".upload")));
    EXPECT_TRUE(std::filesystem::exists(audit.path() / (p.request_id + ".json")));
}

TEST_F(ServiceTest, LoadFailuresReported) {
    auto cfg = config();
    cfg.model_path = dir_->path() / "missing.cvmd";
    PredictionService svc(cfg);
    EXPECT_THROW(svc.load(), IoError);
    EXPECT_FALSE(svc.loaded());
    const auto health = json::parse(svc.health_json());
    EXPECT_EQ(health["status"], "error");
    EXPECT_EQ(health["model_loaded"], false);
}

TEST(ServiceConfigEnv, EnvironmentOverrides) {
    ::setenv("COVIFEX_MODEL", "/m/model.cvmd", 1);
    ::setenv("COVIFEX_EXTRACTOR_MODEL", "/m/net.onnx", 1);
    ::setenv("COVIFEX_PORT", "9191", 1);
    ServiceConfig c;
    c.apply_environment();
    EXPECT_EQ(c.model_path, "/m/model.cvmd");
    EXPECT_EQ(c.extractor_model_path, "/m/net.onnx");
    EXPECT_EQ(c.port, 9191);
    ::setenv("COVIFEX_PORT", "eighty", 1);
    EXPECT_THROW(c.apply_environment(), ValidationError);
    ::unsetenv("COVIFEX_MODEL");
    ::unsetenv("COVIFEX_EXTRACTOR_MODEL");
    ::unsetenv("COVIFEX_PORT");
}

TEST(ServiceOnnx, TinyNetworkEndToEnd) {
    covifex::testing::TempDir dir;
    const auto onnx = std::filesystem::path(COVIFEX_TEST_DATA) / "tiny_gap.onnx";
    SyntheticImageConfig sc;
    sc.n_per_class = 10;
    sc.height = 48;
    sc.width = 48;
    const auto ds = write_synthetic_images(dir.path() / "images", sc);

    auto m = manifest_for("MobileNet", 12);
    m.input_height = 32;
    m.input_width = 32;
    m.preprocess.target_height = 32;
    m.preprocess.target_width = 32;
    auto backend = make_onnx_backend(onnx, 32, 32);
    auto spec = find_extractor("MobileNet");
    auto feats = extract_features(ds, spec, m.preprocess, *backend).features;
    ASSERT_EQ(feats.d, 12u);

    const auto model_path = dir.path() / "onnx.cvmd";
    m.model_file = "onnx.cvmd";
    m.classifier = ClassifierKind::decision_tree;
    m.config = EnsembleConfig::defaults_for(m.classifier);
    m.n_train = feats.n;
    model_save(train(m.classifier, feats, m.config), model_path);
    manifest_save(m, manifest_path_for(model_path));

    ServiceConfig cfg;
    cfg.model_path = model_path;
    cfg.log_requests = false;
    cfg.workers = 2;
    {
        PredictionService no_net(cfg);
        EXPECT_THROW(no_net.load(), ValidationError);
    }
    cfg.extractor_model_path = onnx;
    PredictionService svc(cfg);
    svc.load();
    const auto p = svc.predict(encode_png(synthetic_image(Label::positive, 48, 48, 3)));
    EXPECT_GE(p.probability_positive, 0.0);
    EXPECT_LE(p.probability_positive, 1.0);
    const auto body = json::parse(svc.prediction_json(p));
    EXPECT_EQ(body["model"]["report_checksum"], nullptr);
    const auto errors = covifex::testing::schema_validate(load_schema("prediction_response.schema.json"), body);
    EXPECT_TRUE(errors.empty()) << errors.front();
}

TEST(ErrorJson, Shape) {
    const auto j = json::parse(error_json("BAD_IMAGE", "nope"));
    EXPECT_EQ(j, json::parse(R"({"error":{"code":"BAD_IMAGE","message":"nope"}})"));
}
