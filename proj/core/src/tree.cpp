#include "covifex/tree.hpp"

#include "covifex/error.hpp"
#include "covifex/random.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <string>

namespace covifex {

FeatureView::FeatureView(std::span<const float> v, std::size_t rows, std::size_t cols)
    : values(v), n(rows), d(cols) {
    if (values.size() != n * d) {
        throw ValidationError("feature view size " + std::to_string(values.size()) + " != " + std::to_string(n) +
                              "x" + std::to_string(d));
    }
}

void TreeConfig::validate() const {
    if (min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
    if (!(l2_leaf_penalty >= 0.0) || !std::isfinite(l2_leaf_penalty)) {
        throw ValidationError("l2_leaf_penalty must be finite and >= 0");
    }
    if (!(min_child_weight >= 0.0)) throw ValidationError("min_child_weight must be >= 0");
}

const TreeNode& Tree::leaf_for(std::span<const float> x) const {
    if (nodes.empty()) throw ValidationError("empty tree");
    const TreeNode* node = &nodes[0];
    while (!node->is_leaf()) {
        const double v = x[static_cast<std::size_t>(node->feature)];
        node = &nodes[v <= node->threshold ? node->left : node->right];
    }
    return *node;
}

std::size_t Tree::depth() const {
    if (nodes.empty()) return 0;
    std::size_t best = 0;
    std::vector<std::pair<std::uint32_t, std::size_t>> stack{{0u, 0u}};
    while (!stack.empty()) {
        auto [id, dep] = stack.back();
        stack.pop_back();
        const auto& node = nodes[id];
        if (node.is_leaf()) {
            best = std::max(best, dep);
        } else {
            stack.emplace_back(node.left, dep + 1);
            stack.emplace_back(node.right, dep + 1);
        }
    }
    return best;
}

std::size_t Tree::leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

double gini(std::span<const double> counts) {
    double total = 0.0;
    for (double c : counts) total += c;
    if (!(total > 0.0)) throw ValidationError("gini of an empty node");
    double sum_sq = 0.0;
    for (double c : counts) {
        const double p = c / total;
        sum_sq += p * p;
    }
    return 1.0 - sum_sq;
}

namespace {

void check_training_inputs(const FeatureView& X, std::span<const Label> y, std::span<const double> w) {
    if (y.size() != X.n) {
        throw ValidationError("label count " + std::to_string(y.size()) + " ≠ row count " + std::to_string(X.n));
    }
    if (w.size() != X.n) {
        throw ValidationError("weight count " + std::to_string(w.size()) + " ≠ row count " + std::to_string(X.n));
    }
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

// Accepts a candidate if it beats the incumbent by more than kSplitEpsilon.
bool improves(bool have_best, double candidate, double best) {
    return have_best ? candidate > best + kSplitEpsilon : candidate > kSplitEpsilon;
}

std::array<double, kNumClasses> class_weights(std::span<const Label> y, std::span<const double> w,
                                              std::span<const std::size_t> rows) {
    std::array<double, kNumClasses> c{};
    for (std::size_t r : rows) c[to_index(y[r])] += w[r];
    return c;
}

// Features to consider at one split, ascending.
std::vector<std::size_t> draw_features(std::size_t d, std::size_t k, Rng& rng) {
    if (k == 0 || k >= d) return all_indices(d);
    std::vector<std::size_t> pool = all_indices(d);
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform_index(rng, d - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

} // namespace

std::optional<SplitCandidate> best_split_exhaustive(const FeatureView& X, std::span<const Label> y,
                                                    std::span<const double> weights,
                                                    std::span<const std::size_t> rows,
                                                    std::span<const std::size_t> features,
                                                    const TreeConfig& cfg) {
    const std::size_t m = rows.size();
    if (m < 2 * cfg.min_leaf || m < 2) return std::nullopt;

    const auto parent = class_weights(y, weights, rows);
    const double total = parent[0] + parent[1];
    if (!(total > 0.0)) return std::nullopt;
    const double parent_gini = gini(parent);

    std::optional<SplitCandidate> best;
    std::vector<std::pair<float, std::size_t>> order(m);
    for (std::size_t j : features) {
        for (std::size_t p = 0; p < m; ++p) order[p] = {X.at(rows[p], j), rows[p]};
        std::sort(order.begin(), order.end());

        std::array<double, kNumClasses> left{};
        for (std::size_t p = 0; p + 1 < m; ++p) {
            left[to_index(y[order[p].second])] += weights[order[p].second];
            if (order[p].first == order[p + 1].first) continue;
            const std::size_t left_n = p + 1;
            const std::size_t right_n = m - left_n;
            if (left_n < cfg.min_leaf || right_n < cfg.min_leaf) continue;

            const std::array<double, kNumClasses> right{parent[0] - left[0], parent[1] - left[1]};
            const double wl = left[0] + left[1];
            const double wr = right[0] + right[1];
            if (!(wl > 0.0) || !(wr > 0.0)) continue;

            const double decrease = parent_gini - (wl / total) * gini(left) - (wr / total) * gini(right);
            if (improves(best.has_value(), decrease, best ? best->impurity_decrease : 0.0)) {
                const double thr = 0.5 * (static_cast<double>(order[p].first) + static_cast<double>(order[p + 1].first));
                best = SplitCandidate{j, thr, decrease, left_n, right_n};
            }
        }
    }
    return best;
}

std::optional<SplitCandidate> best_split_exhaustive(const FeatureView& X, std::span<const Label> y,
                                                    std::span<const double> weights, const TreeConfig& cfg) {
    check_training_inputs(X, y, weights);
    const auto rows = all_indices(X.n);
    const auto features = all_indices(X.d);
    return best_split_exhaustive(X, y, weights, rows, features, cfg);
}

namespace {

class CartBuilder {
public:
    CartBuilder(const FeatureView& X, std::span<const Label> y, std::span<const double> w, const TreeConfig& cfg)
        : X_(X), y_(y), w_(w), cfg_(cfg), rng_(cfg.rng_seed) {}

    Tree build(std::vector<std::size_t> rows) {
        grow(std::move(rows), 0);
        return std::move(tree_);
    }

private:
    std::uint32_t grow(std::vector<std::size_t> rows, std::size_t depth) {
        const auto id = static_cast<std::uint32_t>(tree_.nodes.size());
        tree_.nodes.emplace_back();

        const auto counts = class_weights(y_, w_, rows);
        const double total = counts[0] + counts[1];
        if (!(total > 0.0)) throw ValidationError("CART node has zero total weight");
        TreeNode leaf;
        leaf.distribution = {counts[0] / total, counts[1] / total};

        const bool pure = counts[0] == 0.0 || counts[1] == 0.0;
        const bool depth_capped = cfg_.max_depth && depth >= *cfg_.max_depth;
        if (pure || depth_capped || rows.size() < 2 * cfg_.min_leaf) {
            tree_.nodes[id] = leaf;
            return id;
        }

        const auto features = draw_features(X_.d, cfg_.feature_subsample, rng_);
        const auto split = best_split_exhaustive(X_, y_, w_, rows, features, cfg_);
        if (!split) {
            tree_.nodes[id] = leaf;
            return id;
        }

        std::vector<std::size_t> left_rows;
        std::vector<std::size_t> right_rows;
        left_rows.reserve(split->left_count);
        right_rows.reserve(split->right_count);
        for (std::size_t r : rows) {
            (static_cast<double>(X_.at(r, split->feature_index)) <= split->threshold ? left_rows : right_rows).push_back(r);
        }
        rows.clear();
        rows.shrink_to_fit();

        const auto left = grow(std::move(left_rows), depth + 1);
        const auto right = grow(std::move(right_rows), depth + 1);
        TreeNode& node = tree_.nodes[id];
        node.feature = static_cast<std::int32_t>(split->feature_index);
        node.threshold = split->threshold;
        node.left = left;
        node.right = right;
        node.distribution = leaf.distribution;
        return id;
    }

    const FeatureView& X_;
    std::span<const Label> y_;
    std::span<const double> w_;
    const TreeConfig& cfg_;
    Rng rng_;
    Tree tree_;
};

} // namespace

Tree build_cart(const FeatureView& X, std::span<const Label> y, std::span<const double> weights,
                const TreeConfig& cfg, std::span<const std::size_t> rows) {
    cfg.validate();
    check_training_inputs(X, y, weights);
    if (X.n == 0) throw ValidationError("cannot build a tree on an empty dataset");
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("sample weights must be finite and >= 0");
    }
    std::vector<std::size_t> start = rows.empty() ? all_indices(X.n) : std::vector<std::size_t>(rows.begin(), rows.end());
    for (std::size_t r : start) {
        if (r >= X.n) throw ValidationError("row index " + std::to_string(r) + " out of range");
    }
    return CartBuilder(X, y, weights, cfg).build(std::move(start));
}

std::array<double, kNumClasses> tree_predict_proba(const Tree& tree, std::span<const float> x,
                                                   std::size_t expected_dim) {
    if (x.size() != expected_dim) {
        throw ValidationError("feature width " + std::to_string(x.size()) + " ≠ trained width " +
                              std::to_string(expected_dim));
    }
    return tree.leaf_for(x).distribution;
}

// ---------------------------------------------------------------------------

std::uint8_t bin_of(std::span<const double> edges, double x) noexcept {
    return static_cast<std::uint8_t>(std::lower_bound(edges.begin(), edges.end(), x) - edges.begin());
}

BinnedMatrix histogram_bin(const FeatureView& X, std::size_t n_bins) {
    if (n_bins < 2 || n_bins > 255) {
        throw ValidationError("n_bins must lie in [2, 255], got " + std::to_string(n_bins));
    }
    BinnedMatrix B;
    B.n = X.n;
    B.d = X.d;
    B.bins.resize(X.n * X.d);
    B.edges.resize(X.d);

    std::vector<float> col(X.n);
    for (std::size_t j = 0; j < X.d; ++j) {
        for (std::size_t i = 0; i < X.n; ++i) col[i] = X.at(i, j);
        std::sort(col.begin(), col.end());

        std::vector<float> distinct;
        std::vector<std::size_t> counts;
        for (float v : col) {
            if (distinct.empty() || distinct.back() != v) {
                distinct.push_back(v);
                counts.push_back(1);
            } else {
                ++counts.back();
            }
        }

        auto& edges = B.edges[j];
        auto midpoint = [&](std::size_t i) {
            return 0.5 * (static_cast<double>(distinct[i]) + static_cast<double>(distinct[i + 1]));
        };
        if (distinct.size() <= n_bins) {
            for (std::size_t i = 0; i + 1 < distinct.size(); ++i) edges.push_back(midpoint(i));
        } else {
            // Cut after the distinct value where the running count first reaches
            // the next quantile target.
            const double per_bin = static_cast<double>(X.n) / static_cast<double>(n_bins);
            std::size_t cum = 0;
            for (std::size_t i = 0; i + 1 < distinct.size() && edges.size() + 1 < n_bins; ++i) {
                cum += counts[i];
                const double target = static_cast<double>(edges.size() + 1) * per_bin;
                if (static_cast<double>(cum) >= target) edges.push_back(midpoint(i));
            }
        }
        for (std::size_t i = 0; i < X.n; ++i) B.bins[i * X.d + j] = bin_of(edges, X.at(i, j));
    }
    return B;
}

std::optional<SplitCandidate> best_split_binned(const BinnedMatrix& B, std::span<const Label> y,
                                                std::span<const double> weights, const TreeConfig& cfg) {
    if (y.size() != B.n || weights.size() != B.n) throw ValidationError("binned split: length mismatch");
    if (B.n < 2 * cfg.min_leaf || B.n < 2) return std::nullopt;

    std::array<double, kNumClasses> parent{};
    for (std::size_t i = 0; i < B.n; ++i) parent[to_index(y[i])] += weights[i];
    const double total = parent[0] + parent[1];
    if (!(total > 0.0)) return std::nullopt;
    const double parent_gini = gini(parent);

    std::optional<SplitCandidate> best;
    for (std::size_t j = 0; j < B.d; ++j) {
        const std::size_t nb = B.bin_count(j);
        std::vector<std::array<double, kNumClasses>> hist(nb, {0.0, 0.0});
        std::vector<std::size_t> cnt(nb, 0);
        for (std::size_t i = 0; i < B.n; ++i) {
            hist[B.at(i, j)][to_index(y[i])] += weights[i];
            ++cnt[B.at(i, j)];
        }
        std::array<double, kNumClasses> left{};
        std::size_t left_n = 0;
        for (std::size_t b = 0; b + 1 < nb; ++b) {
            left[0] += hist[b][0];
            left[1] += hist[b][1];
            left_n += cnt[b];
            const std::size_t right_n = B.n - left_n;
            if (left_n < cfg.min_leaf || right_n < cfg.min_leaf) continue;
            const std::array<double, kNumClasses> right{parent[0] - left[0], parent[1] - left[1]};
            const double wl = left[0] + left[1];
            const double wr = right[0] + right[1];
            if (!(wl > 0.0) || !(wr > 0.0)) continue;
            const double decrease = parent_gini - (wl / total) * gini(left) - (wr / total) * gini(right);
            if (improves(best.has_value(), decrease, best ? best->impurity_decrease : 0.0)) {
                best = SplitCandidate{j, B.edges[j][b], decrease, left_n, right_n};
            }
        }
    }
    return best;
}

// ---------------------------------------------------------------------------

namespace {

struct GradStats {
    double g = 0.0;
    double h = 0.0;
};

double leaf_objective(double g, double h, double l2) { return g * g / (h + l2); }

double newton_value(double g, double h, double l2) { return -g / (h + l2); }

void check_gradients(std::size_t n, std::span<const double> grad, std::span<const double> hess) {
    if (grad.size() != n || hess.size() != n) {
        throw ValidationError("gradient/hessian length must equal row count " + std::to_string(n));
    }
}

GradStats sum_stats(std::span<const double> grad, std::span<const double> hess, std::span<const std::size_t> rows) {
    GradStats s;
    for (std::size_t r : rows) {
        s.g += grad[r];
        s.h += hess[r];
    }
    return s;
}

std::optional<SplitCandidate> best_exact_gain(const FeatureView& X, std::span<const double> grad,
                                              std::span<const double> hess, std::span<const std::size_t> rows,
                                              const GradStats& parent, const TreeConfig& cfg) {
    const std::size_t m = rows.size();
    if (m < 2 * cfg.min_leaf || m < 2) return std::nullopt;
    const double l2 = cfg.l2_leaf_penalty;
    const double parent_obj = leaf_objective(parent.g, parent.h, l2);

    std::optional<SplitCandidate> best;
    std::vector<std::pair<float, std::size_t>> order(m);
    for (std::size_t j = 0; j < X.d; ++j) {
        for (std::size_t p = 0; p < m; ++p) order[p] = {X.at(rows[p], j), rows[p]};
        std::sort(order.begin(), order.end());
        GradStats left;
        for (std::size_t p = 0; p + 1 < m; ++p) {
            left.g += grad[order[p].second];
            left.h += hess[order[p].second];
            if (order[p].first == order[p + 1].first) continue;
            const std::size_t left_n = p + 1;
            const std::size_t right_n = m - left_n;
            if (left_n < cfg.min_leaf || right_n < cfg.min_leaf) continue;
            const GradStats right{parent.g - left.g, parent.h - left.h};
            if (left.h < cfg.min_child_weight || right.h < cfg.min_child_weight) continue;
            const double gain =
                0.5 * (leaf_objective(left.g, left.h, l2) + leaf_objective(right.g, right.h, l2) - parent_obj);
            if (improves(best.has_value(), gain, best ? best->impurity_decrease : 0.0)) {
                const double thr = 0.5 * (static_cast<double>(order[p].first) + static_cast<double>(order[p + 1].first));
                best = SplitCandidate{j, thr, gain, left_n, right_n};
            }
        }
    }
    return best;
}

struct BinnedSplit {
    SplitCandidate split;
    std::size_t bin = 0;
};

std::optional<BinnedSplit> best_binned_gain(const BinnedMatrix& B, std::span<const double> grad,
                                            std::span<const double> hess, std::span<const std::size_t> rows,
                                            const GradStats& parent, const TreeConfig& cfg) {
    const std::size_t m = rows.size();
    if (m < 2 * cfg.min_leaf || m < 2) return std::nullopt;
    const double l2 = cfg.l2_leaf_penalty;
    const double parent_obj = leaf_objective(parent.g, parent.h, l2);

    std::optional<BinnedSplit> best;
    std::vector<GradStats> hist;
    std::vector<std::size_t> cnt;
    for (std::size_t j = 0; j < B.d; ++j) {
        const std::size_t nb = B.bin_count(j);
        hist.assign(nb, GradStats{});
        cnt.assign(nb, 0);
        for (std::size_t r : rows) {
            const auto b = B.at(r, j);
            hist[b].g += grad[r];
            hist[b].h += hess[r];
            ++cnt[b];
        }
        GradStats left;
        std::size_t left_n = 0;
        for (std::size_t b = 0; b + 1 < nb; ++b) {
            left.g += hist[b].g;
            left.h += hist[b].h;
            left_n += cnt[b];
            const std::size_t right_n = m - left_n;
            if (cnt[b] == 0) continue;  // same partition as the previous boundary
            if (left_n < cfg.min_leaf || right_n < cfg.min_leaf) continue;
            const GradStats right{parent.g - left.g, parent.h - left.h};
            if (left.h < cfg.min_child_weight || right.h < cfg.min_child_weight) continue;
            const double gain =
                0.5 * (leaf_objective(left.g, left.h, l2) + leaf_objective(right.g, right.h, l2) - parent_obj);
            if (improves(best.has_value(), gain, best ? best->split.impurity_decrease : 0.0)) {
                best = BinnedSplit{SplitCandidate{j, B.edges[j][b], gain, left_n, right_n}, b};
            }
        }
    }
    return best;
}

TreeNode regression_leaf(const GradStats& s, double l2) {
    TreeNode leaf;
    leaf.value = newton_value(s.g, s.h, l2);
    return leaf;
}

} // namespace

Tree build_second_order_levelwise(const FeatureView& X, std::span<const double> grad,
                                  std::span<const double> hess, const TreeConfig& cfg) {
    cfg.validate();
    check_gradients(X.n, grad, hess);
    if (X.n == 0) throw ValidationError("cannot build a tree on an empty dataset");

    struct Pending {
        std::uint32_t id;
        std::vector<std::size_t> rows;
        std::size_t depth;
    };
    Tree tree;
    tree.nodes.emplace_back();
    std::deque<Pending> frontier;
    frontier.push_back({0, all_indices(X.n), 0});
    while (!frontier.empty()) {
        Pending cur = std::move(frontier.front());
        frontier.pop_front();
        const GradStats stats = sum_stats(grad, hess, cur.rows);
        tree.nodes[cur.id] = regression_leaf(stats, cfg.l2_leaf_penalty);

        if (cfg.max_depth && cur.depth >= *cfg.max_depth) continue;
        const auto split = best_exact_gain(X, grad, hess, cur.rows, stats, cfg);
        if (!split) continue;

        std::vector<std::size_t> left_rows;
        std::vector<std::size_t> right_rows;
        for (std::size_t r : cur.rows) {
            (static_cast<double>(X.at(r, split->feature_index)) <= split->threshold ? left_rows : right_rows).push_back(r);
        }
        const auto left = static_cast<std::uint32_t>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        TreeNode& node = tree.nodes[cur.id];
        node.feature = static_cast<std::int32_t>(split->feature_index);
        node.threshold = split->threshold;
        node.left = left;
        node.right = left + 1;
        frontier.push_back({left, std::move(left_rows), cur.depth + 1});
        frontier.push_back({left + 1, std::move(right_rows), cur.depth + 1});
    }
    return tree;
}

Tree build_second_order_leafwise(const BinnedMatrix& B, std::span<const double> grad,
                                 std::span<const double> hess, const TreeConfig& cfg) {
    cfg.validate();
    check_gradients(B.n, grad, hess);
    if (B.n == 0) throw ValidationError("cannot build a tree on an empty dataset");

    struct Leaf {
        std::uint32_t id;
        std::vector<std::size_t> rows;
        std::size_t depth;
        GradStats stats;
        std::optional<BinnedSplit> split;
    };
    auto evaluate = [&](Leaf& leaf) {
        leaf.split.reset();
        if (cfg.max_depth && leaf.depth >= *cfg.max_depth) return;
        leaf.split = best_binned_gain(B, grad, hess, leaf.rows, leaf.stats, cfg);
    };

    Tree tree;
    tree.nodes.emplace_back();
    std::vector<Leaf> leaves;
    {
        Leaf root{0, all_indices(B.n), 0, {}, std::nullopt};
        root.stats = sum_stats(grad, hess, root.rows);
        evaluate(root);
        leaves.push_back(std::move(root));
    }
    const std::size_t budget = cfg.num_leaves == 0 ? B.n : cfg.num_leaves;
    while (leaves.size() < budget) {
        // Largest gain wins; equal gains go to the earliest-created leaf.
        std::optional<std::size_t> pick;
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            if (!leaves[i].split) continue;
            if (!pick) {
                pick = i;
                continue;
            }
            const auto& a = leaves[i];
            const auto& b = leaves[*pick];
            const double ga = a.split->split.impurity_decrease;
            const double gb = b.split->split.impurity_decrease;
            if (ga > gb + kSplitEpsilon || (std::abs(ga - gb) <= kSplitEpsilon && a.id < b.id)) pick = i;
        }
        if (!pick) break;

        Leaf parent = std::move(leaves[*pick]);
        leaves.erase(leaves.begin() + static_cast<std::ptrdiff_t>(*pick));
        const auto& sp = *parent.split;
        Leaf left{static_cast<std::uint32_t>(tree.nodes.size()), {}, parent.depth + 1, {}, std::nullopt};
        Leaf right{left.id + 1, {}, parent.depth + 1, {}, std::nullopt};
        for (std::size_t r : parent.rows) {
            (B.at(r, sp.split.feature_index) <= sp.bin ? left.rows : right.rows).push_back(r);
        }
        left.stats = sum_stats(grad, hess, left.rows);
        right.stats = sum_stats(grad, hess, right.rows);
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        TreeNode& node = tree.nodes[parent.id];
        node.feature = static_cast<std::int32_t>(sp.split.feature_index);
        node.threshold = sp.split.threshold;
        node.left = left.id;
        node.right = right.id;
        evaluate(left);
        evaluate(right);
        leaves.push_back(std::move(left));
        leaves.push_back(std::move(right));
    }
    for (const auto& leaf : leaves) tree.nodes[leaf.id] = regression_leaf(leaf.stats, cfg.l2_leaf_penalty);
    return tree;
}

} // namespace covifex
