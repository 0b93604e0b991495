#include "covifex/ensemble.hpp"
#include "covifex/eval.hpp"
#include "covifex/preprocess.hpp"
#include "covifex/random.hpp"
#include "covifex/synthetic.hpp"

#include <benchmark/benchmark.h>

using namespace covifex;

namespace {

FeatureMatrix blobs(std::size_t n, std::size_t d) {
    ReferenceDatasetConfig cfg;
    cfg.n = n;
    cfg.d = d;
    cfg.separation = 1.5;  // overlapping, so trees grow deep
    return reference_dataset(cfg);
}

void BM_BuildCart(benchmark::State& state) {
    const auto m = blobs(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
    const std::vector<double> w(m.n, 1.0);
    for (auto _ : state) benchmark::DoNotOptimize(build_cart(FeatureView(m), m.labels, w, TreeConfig{}));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.n));
}
BENCHMARK(BM_BuildCart)->Args({274, 64})->Args({274, 1024})->Args({2000, 64})->Unit(benchmark::kMillisecond);

void BM_Train(benchmark::State& state) {
    const auto kind = static_cast<ClassifierKind>(state.range(0));
    const auto m = blobs(274, 256);
    const auto cfg = EnsembleConfig::defaults_for(kind);
    for (auto _ : state) benchmark::DoNotOptimize(train(kind, m, cfg));
    state.SetLabel(std::string(to_string(kind)));
}
BENCHMARK(BM_Train)->DenseRange(0, 5)->Unit(benchmark::kMillisecond);

void BM_HistogramBin(benchmark::State& state) {
    const auto m = blobs(274, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(histogram_bin(FeatureView(m), 255));
}
BENCHMARK(BM_HistogramBin)->Arg(256)->Arg(2048)->Unit(benchmark::kMicrosecond);

void BM_Preprocess(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    const auto img = synthetic_image(Label::positive, side, side, 1);
    const PreprocessConfig cfg;
    for (auto _ : state) benchmark::DoNotOptimize(preprocess_pipeline(img, cfg));
}
BENCHMARK(BM_Preprocess)->Arg(512)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_Metrics(benchmark::State& state) {
    Rng rng(1);
    std::vector<Label> t(10000), p(10000);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = uniform_index(rng, 2) ? Label::positive : Label::negative;
        p[i] = uniform_index(rng, 2) ? Label::positive : Label::negative;
    }
    for (auto _ : state) benchmark::DoNotOptimize(metrics(confusion(t, p)));
}
BENCHMARK(BM_Metrics);

void BM_StratifiedKfold(benchmark::State& state) {
    const auto m = blobs(274, 1);
    for (auto _ : state) benchmark::DoNotOptimize(stratified_kfold(m.labels, 10, 42));
}
BENCHMARK(BM_StratifiedKfold);

} // namespace

BENCHMARK_MAIN();
