#pragma once

#include "covifex/ensemble.hpp"
#include "covifex/types.hpp"

#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace covifex {

struct FoldPlan {
    std::size_t k = 0;
    std::vector<std::vector<std::size_t>> folds;  // each ascending
    std::uint64_t seed = 0;
    bool stratified = true;

    std::size_t n() const noexcept;
    // Every index outside fold f, ascending.
    std::vector<std::size_t> train_indices(std::size_t f) const;

    bool operator==(const FoldPlan&) const = default;
};

// Per class: indices shuffled with a generator seeded once from `seed`, then
// dealt round-robin to folds. The deal position carries over from one class
// to the next so fold sizes differ by at most one.
FoldPlan stratified_kfold(std::span<const Label> labels, std::size_t k, std::uint64_t seed);

// Re-expresses a plan built over `from_ids` in the row order of `to_ids`.
// Both id lists must contain the same set of ids.
FoldPlan remap_plan(const FoldPlan& plan, std::span<const std::string> from_ids,
                    std::span<const std::string> to_ids);

struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(std::span<const Label> y_true, std::span<const Label> y_pred);

struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    // Set when the corresponding denominator was zero and 0 was returned.
    bool precision_degenerate = false;
    bool recall_degenerate = false;
    bool f1_degenerate = false;
};

// Positive-class recall, precision, accuracy and F1. Throws on total = 0.
Metrics metrics(const ConfusionCounts& c);

// Unweighted mean of the per-class precision/recall/F1 (accuracy unchanged).
Metrics metrics_macro(const ConfusionCounts& c);

struct FoldResult {
    ConfusionCounts counts;
    Metrics positive;
    Metrics macro;
    double train_time_s = 0.0;
    double predict_time_s = 0.0;
};

struct MetricStats {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
};

MetricStats mean_std(std::span<const double> values);

struct MetricSummary {
    std::vector<FoldResult> per_fold;
    MetricStats accuracy;
    MetricStats precision;
    MetricStats recall;
    MetricStats f1;
    MetricStats precision_macro;
    MetricStats recall_macro;
    MetricStats f1_macro;
    MetricStats train_time_s;
    MetricStats predict_time_s;

    static MetricSummary from_folds(std::vector<FoldResult> folds);
};

// Trains on all folds but f and evaluates on f, for every f.
MetricSummary cross_validate(ClassifierKind kind, const FeatureMatrix& X, const EnsembleConfig& cfg,
                             const FoldPlan& plan);

// Rows of `m` listed in `rows`, in that order.
FeatureMatrix select_rows(const FeatureMatrix& m, std::span<const std::size_t> rows);

template <class T>
struct Timed {
    std::string label;
    T value;
    double seconds = 0.0;
};

template <>
struct Timed<void> {
    std::string label;
    double seconds = 0.0;
};

// Wall time of fn() on the steady clock.
template <class Fn>
auto time_block(std::string_view label, Fn&& fn) {
    using R = std::invoke_result_t<Fn&>;
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    if constexpr (std::is_void_v<R>) {
        fn();
        return Timed<void>{std::string(label), elapsed()};
    } else {
        R value = fn();
        const double s = elapsed();
        return Timed<R>{std::string(label), std::move(value), s};
    }
}

} // namespace covifex
