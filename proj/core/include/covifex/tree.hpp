#pragma once

#include "covifex/types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace covifex {

// Non-owning row-major n x d view over feature values.
struct FeatureView {
    std::span<const float> values;
    std::size_t n = 0;
    std::size_t d = 0;

    FeatureView() = default;
    FeatureView(std::span<const float> v, std::size_t rows, std::size_t cols);
    explicit FeatureView(const FeatureMatrix& m) : FeatureView(m.values, m.n, m.d) {}

    float at(std::size_t i, std::size_t j) const noexcept { return values[i * d + j]; }
    std::span<const float> row(std::size_t i) const noexcept { return values.subspan(i * d, d); }
};

enum class SplitCriterion : std::uint8_t { gini, second_order_gain };

struct TreeConfig {
    std::optional<std::size_t> max_depth;  // nullopt = unlimited
    std::size_t min_leaf = 1;
    std::size_t feature_subsample = 0;     // features drawn per split; 0 = all
    SplitCriterion criterion = SplitCriterion::gini;
    std::uint64_t rng_seed = 0;

    // Second-order trees only.
    double l2_leaf_penalty = 1.0;
    double min_child_weight = 0.0;         // minimum hessian sum per child
    std::size_t num_leaves = 0;            // leaf-wise growth budget; 0 = unlimited

    void validate() const;
};

struct SplitCandidate {
    std::size_t feature_index = 0;
    double threshold = 0.0;
    // Gini decrease (classification) or second-order gain (boosting).
    double impurity_decrease = 0.0;
    std::size_t left_count = 0;
    std::size_t right_count = 0;
};

// Samples with x[feature] <= threshold go left.
struct TreeNode {
    std::int32_t feature = -1;  // < 0 marks a leaf
    double threshold = 0.0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    std::array<double, kNumClasses> distribution{};  // classification leaves
    double value = 0.0;                              // boosting leaves

    bool is_leaf() const noexcept { return feature < 0; }
    bool operator==(const TreeNode&) const = default;
};

// Flat binary tree; nodes[0] is the root.
struct Tree {
    std::vector<TreeNode> nodes;

    const TreeNode& leaf_for(std::span<const float> x) const;
    std::size_t depth() const;
    std::size_t leaf_count() const;

    bool operator==(const Tree&) const = default;
};

// Improvements at or below this are treated as ties / no improvement.
inline constexpr double kSplitEpsilon = 1e-12;

// 1 - sum p_k^2 over (possibly weighted) class counts.
double gini(std::span<const double> counts);

// Best Gini split over `rows` (duplicates allowed, e.g. bootstrap) and the
// given candidate features (ascending). Thresholds are midpoints of adjacent
// distinct values; ties resolve to the lowest feature, then lowest threshold.
std::optional<SplitCandidate> best_split_exhaustive(const FeatureView& X, std::span<const Label> y,
                                                    std::span<const double> weights,
                                                    std::span<const std::size_t> rows,
                                                    std::span<const std::size_t> features,
                                                    const TreeConfig& cfg);

// Convenience overload over every row and every feature.
std::optional<SplitCandidate> best_split_exhaustive(const FeatureView& X, std::span<const Label> y,
                                                    std::span<const double> weights, const TreeConfig& cfg);

// Weighted CART on `rows` (all rows when empty).
Tree build_cart(const FeatureView& X, std::span<const Label> y, std::span<const double> weights,
                const TreeConfig& cfg, std::span<const std::size_t> rows = {});

// Class distribution of the leaf `x` falls into. Throws ValidationError when
// x.size() != expected_dim.
std::array<double, kNumClasses> tree_predict_proba(const Tree& tree, std::span<const float> x,
                                                   std::size_t expected_dim);

// ---------------------------------------------------------------------------
// Histogram binning

struct BinnedMatrix {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<std::uint8_t> bins;           // row-major n x d
    std::vector<std::vector<double>> edges;   // per feature, ascending upper bin bounds

    std::uint8_t at(std::size_t i, std::size_t j) const noexcept { return bins[i * d + j]; }
    std::size_t bin_count(std::size_t j) const noexcept { return edges[j].size() + 1; }
};

// Per-feature quantile edges placed at midpoints between distinct values;
// x <= edges[j][b] <=> bin <= b. n_bins must lie in [2, 255].
BinnedMatrix histogram_bin(const FeatureView& X, std::size_t n_bins);

// Bin index of a raw value under a feature's edges.
std::uint8_t bin_of(std::span<const double> edges, double x) noexcept;

// Best Gini split restricted to bin boundaries; threshold is the raw edge.
std::optional<SplitCandidate> best_split_binned(const BinnedMatrix& B, std::span<const Label> y,
                                                std::span<const double> weights, const TreeConfig& cfg);

// ---------------------------------------------------------------------------
// Second-order regression trees for boosting. Leaf value = -G / (H + l2);
// gain = 0.5 [GL^2/(HL+l2) + GR^2/(HR+l2) - G^2/(H+l2)].

// Level-wise growth on exact thresholds, bounded by cfg.max_depth.
Tree build_second_order_levelwise(const FeatureView& X, std::span<const double> grad,
                                  std::span<const double> hess, const TreeConfig& cfg);

// Leaf-wise growth on binned features: always split the leaf with the largest
// gain until cfg.num_leaves leaves exist or no split has positive gain.
Tree build_second_order_leafwise(const BinnedMatrix& B, std::span<const double> grad,
                                 std::span<const double> hess, const TreeConfig& cfg);

} // namespace covifex
