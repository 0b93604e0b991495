// covifex: feature extraction, grid evaluation, training, prediction and serving.
#include "covifex/ensemble.hpp"
#include "covifex/error.hpp"
#include "covifex/eval.hpp"
#include "covifex/experiment.hpp"
#include "covifex/extract.hpp"
#include "covifex/service.hpp"
#include "covifex/synthetic.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <csignal>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <pthread.h>

namespace fs = std::filesystem;
using namespace covifex;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

std::unique_ptr<ExtractorBackend> backend_for(const ExtractorSpec& spec, const fs::path& model_file,
                                              std::size_t stub_dim, std::uint64_t stub_seed, TensorLayout layout) {
    if (spec.name == stub_extractor_spec().name) return std::make_unique<StubBackend>(stub_dim, stub_seed);
    if (model_file.empty()) throw ValidationError("--model-file is required for extractor '" + spec.name + "'");
    return make_onnx_backend(model_file, spec.input_height, spec.input_width, layout);
}

// Registry order first, then the stub, then anything else by name.
std::vector<std::string> discover_extractors(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("features directory not found: " + dir.string());
    std::vector<std::string> found;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".cvfx") found.push_back(entry.path().stem().string());
    }
    std::vector<std::string> order;
    for (const auto& spec : registry_list()) order.push_back(spec.name);
    order.push_back(stub_extractor_spec().name);
    auto rank = [&](const std::string& name) {
        auto it = std::find(order.begin(), order.end(), name);
        return static_cast<std::size_t>(it - order.begin());
    };
    std::sort(found.begin(), found.end(), [&](const std::string& a, const std::string& b) {
        const auto ra = rank(a);
        const auto rb = rank(b);
        return ra != rb ? ra < rb : a < b;
    });
    if (found.empty()) throw IoError("no .cvfx files in " + dir.string());
    return found;
}

struct TrainFlags {
    std::optional<std::size_t> n_estimators;
    std::optional<double> learning_rate;
    std::optional<std::size_t> max_depth;
    std::optional<std::size_t> num_leaves;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;

    void attach(CLI::App* app) {
        app->add_option("--n-estimators", n_estimators, "Members or boosting rounds");
        app->add_option("--learning-rate", learning_rate, "Shrinkage for gradient boosting");
        app->add_option("--max-depth", max_depth, "Tree depth limit");
        app->add_option("--num-leaves", num_leaves, "Leaf budget for leaf-wise boosting");
        app->add_option("--seed", seed, "Random seed");
        app->add_option("--threads", threads, "Worker threads for ensemble members")->check(CLI::PositiveNumber);
    }

    EnsembleConfig apply(ClassifierKind kind, EnsembleConfig c) const {
        if (n_estimators) c.n_estimators = *n_estimators;
        if (learning_rate) c.learning_rate = *learning_rate;
        if (max_depth) c.max_depth = *max_depth;
        if (num_leaves) c.num_leaves = *num_leaves;
        if (seed) c.rng_seed = *seed;
        c.n_threads = threads;
        c.validate(kind);
        return c;
    }
};

int run_serve(ServiceConfig cfg) {
    // Route SIGINT/SIGTERM to sigwait below; worker threads inherit the mask.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    PredictionService service(cfg);
    const int port = service.start();
    std::cerr << "listening on " << cfg.host << ":" << port << "\n";
    service.load();
    const auto& m = service.manifest();
    std::cerr << "model loaded: " << m.extractor << " + " << display_name(m.classifier) << "\n";

    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "shutting down\n";
    service.stop();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"COVID-19 chest image classification with deep features and tree ensembles"};
    app.require_subcommand(1);

    // extract
    auto* extract = app.add_subcommand("extract", "Run one extractor over a dataset manifest");
    fs::path ex_manifest, ex_model, ex_out, ex_csv;
    std::string ex_name, ex_layout = "nchw";
    std::size_t ex_batch = 8, ex_stub_dim = 64;
    std::uint64_t ex_stub_seed = 0;
    extract->add_option("--manifest", ex_manifest, "CSV with id,path,modality,label")->required();
    extract->add_option("--extractor", ex_name, "Registry name or Stub")->required();
    extract->add_option("--model-file", ex_model, "ONNX network for the extractor");
    extract->add_option("--out", ex_out, "Output .cvfx file")->required();
    extract->add_option("--csv", ex_csv, "Also write features as CSV");
    extract->add_option("--batch", ex_batch, "Images per forward pass")->check(CLI::PositiveNumber);
    extract->add_option("--layout", ex_layout, "Network input layout")->check(CLI::IsMember({"nchw", "nhwc"}));
    extract->add_option("--stub-dim", ex_stub_dim, "Stub feature length")->check(CLI::PositiveNumber);
    extract->add_option("--stub-seed", ex_stub_seed, "Stub projection seed");

    // grid
    auto* grid = app.add_subcommand("grid", "Cross-validate every extractor x classifier pair");
    fs::path gr_dir, gr_out, gr_export;
    std::size_t gr_k = 10, gr_threads = 1;
    std::uint64_t gr_seed = 42, gr_stub_seed = 0;
    std::vector<std::string> gr_extractors, gr_classifiers;
    grid->add_option("--features-dir", gr_dir, "Directory of <Extractor>.cvfx files")->required();
    grid->add_option("--k", gr_k, "Folds")->check(CLI::Range(2, 1000));
    grid->add_option("--seed", gr_seed, "Fold and classifier seed");
    grid->add_option("--out", gr_out, "Report directory")->required();
    grid->add_option("--extractors", gr_extractors, "Subset of extractors (default: every file)")->delimiter(',');
    grid->add_option("--classifiers", gr_classifiers, "Subset of classifiers (default: all six)")->delimiter(',');
    grid->add_option("--export-model", gr_export, "Retrain the best pair on all rows and save it here");
    grid->add_option("--stub-seed", gr_stub_seed, "Stub projection seed recorded in the exported manifest");
    grid->add_option("--threads", gr_threads, "Worker threads for ensemble members")->check(CLI::PositiveNumber);

    // train
    auto* trn = app.add_subcommand("train", "Train one classifier on a feature file and deploy it");
    fs::path tr_features, tr_out;
    std::string tr_classifier;
    std::uint64_t tr_stub_seed = 0;
    TrainFlags tr_flags;
    trn->add_option("--features", tr_features, "Input .cvfx file")->required();
    trn->add_option("--classifier", tr_classifier, "decision_tree, random_forest, bagging, adaboost, gbdt_levelwise, gbdt_leafwise")
        ->required();
    trn->add_option("--out", tr_out, "Output .cvmd file; the manifest goes next to it")->required();
    trn->add_option("--stub-seed", tr_stub_seed, "Stub projection seed recorded in the manifest");
    tr_flags.attach(trn);

    // predict
    auto* pred = app.add_subcommand("predict", "Classify one image with a deployed model");
    fs::path pr_model, pr_image, pr_extractor_model;
    pred->add_option("--model", pr_model, "Deployed .cvmd file")->required();
    pred->add_option("--image", pr_image, "PNG or JPEG image")->required();
    pred->add_option("--extractor-model", pr_extractor_model, "ONNX network for the extractor");

    // serve
    auto* serve = app.add_subcommand("serve", "HTTP prediction API");
    ServiceConfig sv;
    double sv_max_mb = 20.0;
    std::string sv_audit;
    serve->add_option("--model", sv.model_path, "Deployed .cvmd file (or COVIFEX_MODEL)");
    serve->add_option("--extractor-model", sv.extractor_model_path, "ONNX network (or COVIFEX_EXTRACTOR_MODEL)");
    serve->add_option("--port", sv.port, "Port (or COVIFEX_PORT); 0 picks one")->check(CLI::Range(0, 65535));
    serve->add_option("--host", sv.host, "Bind address");
    serve->add_option("--workers", sv.workers, "Request workers")->check(CLI::PositiveNumber);
    serve->add_option("--max-upload-mb", sv_max_mb, "Upload limit in MB")->check(CLI::PositiveNumber);
    serve->add_option("--cors-origin", sv.cors_origin, "Access-Control-Allow-Origin value");
    serve->add_option("--audit-dir", sv_audit, "Keep uploads and responses here (off by default)");

    // synthetic data
    auto* synth = app.add_subcommand("synth", "Write synthetic test data");
    fs::path sy_images, sy_reference;
    std::size_t sy_per_class = 20, sy_size = 96;
    std::uint64_t sy_seed = 7;
    synth->add_option("--images", sy_images, "Directory for synthetic chest-like PNGs and manifest.csv");
    synth->add_option("--reference", sy_reference, "Output .cvfx with the 16-D two-Gaussian reference set");
    synth->add_option("--per-class", sy_per_class, "Images per class")->check(CLI::PositiveNumber);
    synth->add_option("--size", sy_size, "Image side length")->check(CLI::Range(8, 4096));
    synth->add_option("--seed", sy_seed, "Image seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (*extract) {
            const Dataset ds = dataset_from_manifest(ex_manifest);
            const ExtractorSpec spec = find_extractor(ex_name);
            auto backend = backend_for(spec, ex_model, ex_stub_dim, ex_stub_seed,
                                       ex_layout == "nhwc" ? TensorLayout::nhwc : TensorLayout::nchw);
            const auto result = extract_features(ds, spec, preprocess_config_for(spec), *backend, ex_batch);
            features_save(result.features, ex_out);
            if (!ex_csv.empty()) features_export_csv(result.features, ex_csv);
            std::cout << spec.name << ": " << result.features.n << " x " << result.features.d << " in "
                      << result.timing.total_s << " s (" << result.timing.per_image_s << " s/image) -> "
                      << ex_out.string() << "\n";
        } else if (*grid) {
            GridConfig cfg;
            cfg.k = gr_k;
            cfg.seed = gr_seed;
            cfg.n_threads = gr_threads;
            cfg.extractors = gr_extractors.empty() ? discover_extractors(gr_dir) : gr_extractors;
            if (!gr_classifiers.empty()) {
                cfg.classifiers.clear();
                for (const auto& c : gr_classifiers) cfg.classifiers.push_back(classifier_from_string(c));
            }
            std::vector<FeatureSource> sources;
            for (const auto& name : cfg.extractors) sources.push_back(FeatureSource::from_file(name, gr_dir / (name + ".cvfx")));

            std::map<std::string, FeatureMatrix> features;
            const GridReport report = run_grid(sources, cfg, &features);
            const auto files = emit_report(report, gr_out);
            const auto& best = report.best_cell();
            std::cout << report.cells.size() << " cells, best: " << best.extractor << " + "
                      << display_name(best.classifier) << " "
                      << format_mean_std(best.summary.accuracy.mean, best.summary.accuracy.std) << "\n";
            std::cout << "report " << files.checksum << " -> " << gr_out.string() << "\n";
            if (!gr_export.empty()) {
                export_best_model(report, features.at(best.extractor), gr_export, gr_stub_seed);
                std::cout << "model -> " << gr_export.string() << "\n";
            }
        } else if (*trn) {
            const ClassifierKind kind = classifier_from_string(tr_classifier);
            FeatureMatrix X = features_load(tr_features);
            const EnsembleConfig cfg = tr_flags.apply(kind, EnsembleConfig::defaults_for(kind));
            deploy_model(kind, cfg, X, tr_out, std::nullopt, tr_stub_seed);
            std::cout << display_name(kind) << " on " << X.extractor_name << " (" << X.n << " x " << X.d << ") -> "
                      << tr_out.string() << "\n";
        } else if (*pred) {
            ServiceConfig cfg;
            cfg.model_path = pr_model;
            cfg.extractor_model_path = pr_extractor_model;
            cfg.workers = 1;
            cfg.log_requests = false;
            PredictionService service(cfg);
            service.load();
            std::ifstream in(pr_image, std::ios::binary);
            if (!in) throw IoError("cannot open " + pr_image.string());
            const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
            try {
                std::cout << service.prediction_json(service.predict(bytes)) << "\n";
            } catch (const ServiceError& e) {
                throw IoError(e.what());
            }
        } else if (*serve) {
            // explicit flags win over the environment
            ServiceConfig cfg;
            cfg.apply_environment();
            if (serve->count("--model")) cfg.model_path = sv.model_path;
            if (serve->count("--extractor-model")) cfg.extractor_model_path = sv.extractor_model_path;
            if (serve->count("--port")) cfg.port = sv.port;
            cfg.host = sv.host;
            cfg.workers = sv.workers;
            cfg.cors_origin = sv.cors_origin;
            cfg.max_upload_bytes = static_cast<std::size_t>(sv_max_mb * 1024.0 * 1024.0);
            if (!sv_audit.empty()) {
                fs::create_directories(sv_audit);
                cfg.audit_dir = fs::path(sv_audit);
            }
            if (cfg.model_path.empty()) throw ValidationError("no model given (--model or COVIFEX_MODEL)");
            return run_serve(cfg);
        } else if (*synth) {
            if (sy_images.empty() && sy_reference.empty()) throw ValidationError("give --images and/or --reference");
            if (!sy_images.empty()) {
                SyntheticImageConfig c;
                c.n_per_class = sy_per_class;
                c.height = c.width = sy_size;
                c.seed = sy_seed;
                const Dataset ds = write_synthetic_images(sy_images, c);
                std::cout << ds.size() << " images -> " << (sy_images / "manifest.csv").string() << "\n";
            }
            if (!sy_reference.empty()) {
                FeatureMatrix ref = reference_dataset();
                ref.extractor_name = stub_extractor_spec().name;
                features_save(ref, sy_reference);
                std::cout << "reference set " << ref.n << " x " << ref.d << " -> " << sy_reference.string() << "\n";
            }
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
