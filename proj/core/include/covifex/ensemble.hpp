#pragma once

#include "covifex/tree.hpp"
#include "covifex/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace covifex {

enum class ClassifierKind : std::uint8_t {
    decision_tree = 0,
    random_forest = 1,
    bagging = 2,
    adaboost = 3,
    gbdt_levelwise = 4,  // XGBoost-style
    gbdt_leafwise = 5,   // LightGBM-style
};

// Report column order.
inline constexpr std::array<ClassifierKind, 6> kAllClassifiers{
    ClassifierKind::decision_tree, ClassifierKind::random_forest,  ClassifierKind::gbdt_levelwise,
    ClassifierKind::adaboost,      ClassifierKind::bagging,        ClassifierKind::gbdt_leafwise,
};

std::string_view to_string(ClassifierKind k) noexcept;
std::string_view display_name(ClassifierKind k) noexcept;
ClassifierKind classifier_from_string(std::string_view name);

struct EnsembleConfig {
    std::size_t n_estimators = 100;
    double learning_rate = 0.1;
    std::optional<std::size_t> max_depth;
    std::size_t num_leaves = 31;
    std::size_t n_bins = 255;
    double subsample_ratio = 1.0;
    // Bagging/forest draw with replacement when set; otherwise a plain
    // subsample of round(subsample_ratio * n) rows.
    bool bootstrap = true;
    // Features drawn per split; 0 = kind default (ceil(sqrt d) for random
    // forest, all features otherwise).
    std::size_t feature_subsample = 0;
    std::size_t min_leaf = 1;
    double min_child_weight = 0.0;
    std::uint64_t rng_seed = 42;
    double l2_leaf_penalty = 1.0;
    // Worker threads for per-member parallelism; never changes results.
    std::size_t n_threads = 1;

    static EnsembleConfig defaults_for(ClassifierKind kind);
    void validate(ClassifierKind kind) const;

    bool operator==(const EnsembleConfig&) const = default;
};

struct TrainedModel {
    ClassifierKind kind = ClassifierKind::decision_tree;
    std::size_t feature_dim = 0;
    EnsembleConfig config;
    std::vector<Tree> trees;
    // AdaBoost vote weights (alpha per stump); empty for other kinds.
    std::vector<double> tree_weights;
    // Boosting: initial log-odds.
    double base_score = 0.0;

    // Not persisted.
    double train_time_s = 0.0;
    // Boosting: training log-loss before round 1, then after every round.
    std::vector<double> train_loss;
};

// Throws ValidationError("degenerate labels") when only one class is present.
TrainedModel train(ClassifierKind kind, const FeatureMatrix& X, const EnsembleConfig& cfg);
TrainedModel train(ClassifierKind kind, const FeatureView& X, std::span<const Label> y, const EnsembleConfig& cfg);

// Probabilities for (negative, positive); sums to 1.
std::array<double, kNumClasses> predict_proba(const TrainedModel& m, std::span<const float> x);

// argmax of predict_proba, ties to negative.
Label predict(const TrainedModel& m, std::span<const float> x);

std::vector<Label> predict_all(const TrainedModel& m, const FeatureView& X);

// One SAMME step for K = 2.
struct SammeRound {
    double error = 0.0;
    double alpha = 0.0;
    bool accepted = false;  // learner joins the ensemble
    bool stop = false;      // no further rounds
};

// error = sum(w * miss) / sum(w). A perfect learner is accepted with
// alpha = 1 and stops boosting; error >= 1/2 is rejected. Otherwise
// alpha = ln((1 - error) / error) + ln(K - 1), misclassified weights are
// multiplied by exp(alpha) and all weights renormalised to sum to 1.
SammeRound samme_update(std::span<double> weights, std::span<const std::uint8_t> misclassified);

double sigmoid(double z) noexcept;

// Mean binary log-loss of raw scores.
double log_loss(std::span<const double> scores, std::span<const Label> y);

// Binary model container `CVMD` v1 with trailing CRC32.
inline constexpr std::uint32_t kModelFileVersion = 1;

std::vector<std::uint8_t> model_serialize(const TrainedModel& m);
TrainedModel model_deserialize(std::span<const std::uint8_t> bytes);

void model_save(const TrainedModel& m, const std::filesystem::path& path);
TrainedModel model_load(const std::filesystem::path& path);

} // namespace covifex
