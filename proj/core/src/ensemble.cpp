#include "covifex/ensemble.hpp"

#include "binary_io.hpp"
#include "covifex/error.hpp"
#include "covifex/random.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

namespace covifex {

std::string_view to_string(ClassifierKind k) noexcept {
    switch (k) {
    case ClassifierKind::decision_tree: return "decision_tree";
    case ClassifierKind::random_forest: return "random_forest";
    case ClassifierKind::bagging: return "bagging";
    case ClassifierKind::adaboost: return "adaboost";
    case ClassifierKind::gbdt_levelwise: return "gbdt_levelwise";
    case ClassifierKind::gbdt_leafwise: return "gbdt_leafwise";
    }
    return "unknown";
}

std::string_view display_name(ClassifierKind k) noexcept {
    switch (k) {
    case ClassifierKind::decision_tree: return "Decision Tree";
    case ClassifierKind::random_forest: return "Random Forest";
    case ClassifierKind::bagging: return "Bagging";
    case ClassifierKind::adaboost: return "AdaBoost";
    case ClassifierKind::gbdt_levelwise: return "XGBoost";
    case ClassifierKind::gbdt_leafwise: return "LightGBM";
    }
    return "unknown";
}

ClassifierKind classifier_from_string(std::string_view name) {
    for (auto k : kAllClassifiers) {
        if (name == to_string(k) || name == display_name(k)) return k;
    }
    if (name == "dt") return ClassifierKind::decision_tree;
    if (name == "rf") return ClassifierKind::random_forest;
    if (name == "xgboost") return ClassifierKind::gbdt_levelwise;
    if (name == "lightgbm") return ClassifierKind::gbdt_leafwise;
    throw ValidationError("unknown classifier '" + std::string(name) + "'");
}

EnsembleConfig EnsembleConfig::defaults_for(ClassifierKind kind) {
    EnsembleConfig c;
    switch (kind) {
    case ClassifierKind::decision_tree:
        c.n_estimators = 1;
        c.bootstrap = false;
        break;
    case ClassifierKind::random_forest:
    case ClassifierKind::bagging:
        c.n_estimators = 100;
        break;
    case ClassifierKind::adaboost:
        c.n_estimators = 50;
        c.max_depth = 1;
        c.learning_rate = 1.0;
        c.bootstrap = false;
        break;
    case ClassifierKind::gbdt_levelwise:
        c.n_estimators = 100;
        c.learning_rate = 0.1;
        c.max_depth = 6;
        c.l2_leaf_penalty = 1.0;
        c.min_child_weight = 1.0;
        c.bootstrap = false;
        break;
    case ClassifierKind::gbdt_leafwise:
        c.n_estimators = 100;
        c.learning_rate = 0.1;
        c.num_leaves = 31;
        c.n_bins = 255;
        c.l2_leaf_penalty = 1.0;
        c.min_leaf = 20;
        c.min_child_weight = 1e-3;
        c.bootstrap = false;
        break;
    }
    return c;
}

namespace {

bool is_boosting(ClassifierKind k) {
    return k == ClassifierKind::gbdt_levelwise || k == ClassifierKind::gbdt_leafwise;
}

} // namespace

void EnsembleConfig::validate(ClassifierKind kind) const {
    if (n_estimators == 0 && !is_boosting(kind)) {
        throw ValidationError("n_estimators must be >= 1 for " + std::string(to_string(kind)));
    }
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
        throw ValidationError("learning_rate must lie in (0, 1]");
    }
    if (!(subsample_ratio > 0.0 && subsample_ratio <= 1.0)) {
        throw ValidationError("subsample_ratio must lie in (0, 1]");
    }
    if (min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
    if (!(l2_leaf_penalty >= 0.0) || !std::isfinite(l2_leaf_penalty)) {
        throw ValidationError("l2_leaf_penalty must be finite and >= 0");
    }
    if (!(min_child_weight >= 0.0)) throw ValidationError("min_child_weight must be >= 0");
    if (is_boosting(kind) && n_bins > 255) {
        throw ValidationError("n_bins must be <= 255, got " + std::to_string(n_bins));
    }
    if (kind == ClassifierKind::gbdt_leafwise) {
        if (n_bins < 2) throw ValidationError("n_bins must be >= 2");
        if (num_leaves < 2) throw ValidationError("num_leaves must be >= 2");
    }
}

double sigmoid(double z) noexcept {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double log_loss(std::span<const double> scores, std::span<const Label> y) {
    if (scores.size() != y.size()) throw ValidationError("log_loss: length mismatch");
    if (scores.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double z = scores[i];
        // softplus(z) - y z, stable for large |z|
        const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        total += softplus - (y[i] == Label::positive ? z : 0.0);
    }
    return total / static_cast<double>(scores.size());
}

SammeRound samme_update(std::span<double> weights, std::span<const std::uint8_t> misclassified) {
    if (weights.size() != misclassified.size()) throw ValidationError("samme_update: length mismatch");
    constexpr double K = static_cast<double>(kNumClasses);
    double total = 0.0;
    double wrong = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        total += weights[i];
        if (misclassified[i]) wrong += weights[i];
    }
    if (!(total > 0.0)) throw ValidationError("samme_update: weights sum to zero");

    SammeRound round;
    round.error = wrong / total;
    if (round.error <= 0.0) {
        round.alpha = 1.0;
        round.accepted = true;
        round.stop = true;
        return round;
    }
    if (round.error >= 1.0 - 1.0 / K) {
        round.stop = true;
        return round;
    }
    round.alpha = std::log((1.0 - round.error) / round.error) + std::log(K - 1.0);
    round.accepted = true;

    const double boost = std::exp(round.alpha);
    double sum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (misclassified[i]) weights[i] *= boost;
        sum += weights[i];
    }
    for (double& w : weights) w /= sum;
    return round;
}

namespace {

// Runs fn(i) for i in [0, count) on up to `threads` workers. Each index is
// independent, so the schedule never affects results.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn fn) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

std::size_t ceil_sqrt(std::size_t d) {
    auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(d)));
    while (r * r < d) ++r;
    while (r > 0 && (r - 1) * (r - 1) >= d) --r;
    return std::max<std::size_t>(r, 1);
}

TreeConfig cart_config(const EnsembleConfig& cfg, std::uint64_t seed) {
    TreeConfig t;
    t.max_depth = cfg.max_depth;
    t.min_leaf = cfg.min_leaf;
    t.feature_subsample = cfg.feature_subsample;
    t.criterion = SplitCriterion::gini;
    t.rng_seed = seed;
    return t;
}

std::vector<std::size_t> draw_rows(std::size_t n, const EnsembleConfig& cfg, Rng& rng) {
    const auto take = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.subsample_ratio * static_cast<double>(n))));
    std::vector<std::size_t> rows;
    rows.reserve(take);
    if (cfg.bootstrap) {
        for (std::size_t i = 0; i < take; ++i) rows.push_back(static_cast<std::size_t>(uniform_index(rng, n)));
        return rows;
    }
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (take < n) {
        for (std::size_t i = 0; i < take; ++i) {
            std::swap(all[i], all[i + static_cast<std::size_t>(uniform_index(rng, n - i))]);
        }
        all.resize(take);
        std::sort(all.begin(), all.end());
    }
    return all;
}

void train_bagged(TrainedModel& m, const FeatureView& X, std::span<const Label> y) {
    const auto& cfg = m.config;
    const std::vector<double> ones(X.n, 1.0);
    m.trees.resize(cfg.n_estimators);
    parallel_for(cfg.n_estimators, cfg.n_threads, [&](std::size_t t) {
        Rng rng(derive_seed(cfg.rng_seed, t));
        const auto rows = draw_rows(X.n, cfg, rng);
        m.trees[t] = build_cart(X, y, ones, cart_config(cfg, derive_seed(cfg.rng_seed ^ 0xF0F0F0F0ull, t)), rows);
    });
}

Label argmax(const std::array<double, kNumClasses>& p) {
    return p[1] > p[0] ? Label::positive : Label::negative;
}

void train_adaboost(TrainedModel& m, const FeatureView& X, std::span<const Label> y) {
    const auto& cfg = m.config;
    std::vector<double> w(X.n, 1.0 / static_cast<double>(X.n));
    std::vector<std::uint8_t> miss(X.n);
    for (std::size_t round = 0; round < cfg.n_estimators; ++round) {
        Tree stump = build_cart(X, y, w, cart_config(cfg, derive_seed(cfg.rng_seed, round)));
        for (std::size_t i = 0; i < X.n; ++i) {
            miss[i] = argmax(stump.leaf_for(X.row(i)).distribution) != y[i] ? 1 : 0;
        }
        const SammeRound r = samme_update(w, miss);
        if (r.accepted) {
            m.trees.push_back(std::move(stump));
            m.tree_weights.push_back(r.alpha);
        }
        if (r.stop) break;
    }
}

void train_gbdt(TrainedModel& m, const FeatureView& X, std::span<const Label> y, const std::array<std::size_t, 2>& counts) {
    const auto& cfg = m.config;
    m.base_score = std::log(static_cast<double>(counts[1]) / static_cast<double>(counts[0]));

    TreeConfig tcfg;
    tcfg.max_depth = cfg.max_depth;
    tcfg.min_leaf = cfg.min_leaf;
    tcfg.criterion = SplitCriterion::second_order_gain;
    tcfg.l2_leaf_penalty = cfg.l2_leaf_penalty;
    tcfg.min_child_weight = cfg.min_child_weight;
    tcfg.num_leaves = cfg.num_leaves;

    std::optional<BinnedMatrix> binned;
    if (m.kind == ClassifierKind::gbdt_leafwise) binned = histogram_bin(X, cfg.n_bins);

    std::vector<double> score(X.n, m.base_score);
    std::vector<double> grad(X.n);
    std::vector<double> hess(X.n);
    m.train_loss.push_back(log_loss(score, y));
    Rng rng(cfg.rng_seed);
    for (std::size_t round = 0; round < cfg.n_estimators; ++round) {
        for (std::size_t i = 0; i < X.n; ++i) {
            const double p = sigmoid(score[i]);
            grad[i] = p - (y[i] == Label::positive ? 1.0 : 0.0);
            hess[i] = std::max(p * (1.0 - p), 1e-16);
        }
        if (cfg.subsample_ratio < 1.0) {
            // Rows left out of this round contribute no gradient statistics.
            std::vector<std::uint8_t> keep(X.n, 0);
            EnsembleConfig sub = cfg;
            sub.bootstrap = false;
            for (std::size_t r : draw_rows(X.n, sub, rng)) keep[r] = 1;
            for (std::size_t i = 0; i < X.n; ++i) {
                if (!keep[i]) grad[i] = hess[i] = 0.0;
            }
        }
        Tree tree = binned ? build_second_order_leafwise(*binned, grad, hess, tcfg)
                           : build_second_order_levelwise(X, grad, hess, tcfg);
        for (auto& node : tree.nodes) {
            if (node.is_leaf()) node.value *= cfg.learning_rate;
        }
        for (std::size_t i = 0; i < X.n; ++i) score[i] += tree.leaf_for(X.row(i)).value;
        m.train_loss.push_back(log_loss(score, y));
        m.trees.push_back(std::move(tree));
    }
}

} // namespace

TrainedModel train(ClassifierKind kind, const FeatureView& X, std::span<const Label> y, const EnsembleConfig& cfg) {
    cfg.validate(kind);
    if (y.size() != X.n) {
        throw ValidationError("label count " + std::to_string(y.size()) + " ≠ row count " + std::to_string(X.n));
    }
    if (X.n == 0) throw ValidationError("cannot train on an empty dataset");
    if (X.d == 0) throw ValidationError("cannot train on zero-width features");
    for (float v : X.values) {
        if (!std::isfinite(v)) throw ValidationError("non-finite feature value in training data");
    }
    std::array<std::size_t, 2> counts{};
    for (Label l : y) ++counts[to_index(l)];
    if (counts[0] == 0 || counts[1] == 0) throw ValidationError("degenerate labels: training set has a single class");

    const auto start = std::chrono::steady_clock::now();
    TrainedModel m;
    m.kind = kind;
    m.feature_dim = X.d;
    m.config = cfg;
    if (kind == ClassifierKind::random_forest && m.config.feature_subsample == 0) {
        m.config.feature_subsample = ceil_sqrt(X.d);
    }

    switch (kind) {
    case ClassifierKind::decision_tree: {
        const std::vector<double> ones(X.n, 1.0);
        m.trees.push_back(build_cart(X, y, ones, cart_config(m.config, m.config.rng_seed)));
        break;
    }
    case ClassifierKind::random_forest:
    case ClassifierKind::bagging:
        train_bagged(m, X, y);
        break;
    case ClassifierKind::adaboost:
        train_adaboost(m, X, y);
        break;
    case ClassifierKind::gbdt_levelwise:
    case ClassifierKind::gbdt_leafwise:
        train_gbdt(m, X, y, counts);
        break;
    }
    m.train_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
}

TrainedModel train(ClassifierKind kind, const FeatureMatrix& X, const EnsembleConfig& cfg) {
    feature_matrix_validate(X);
    return train(kind, FeatureView(X), X.labels, cfg);
}

std::array<double, kNumClasses> predict_proba(const TrainedModel& m, std::span<const float> x) {
    if (x.size() != m.feature_dim) {
        throw ValidationError("feature width " + std::to_string(x.size()) + " ≠ model width " +
                              std::to_string(m.feature_dim));
    }
    switch (m.kind) {
    case ClassifierKind::decision_tree:
    case ClassifierKind::random_forest:
    case ClassifierKind::bagging: {
        if (m.trees.empty()) throw ValidationError("model has no trees");
        std::array<double, kNumClasses> acc{};
        for (const auto& t : m.trees) {
            const auto& d = t.leaf_for(x).distribution;
            acc[0] += d[0];
            acc[1] += d[1];
        }
        const double s = acc[0] + acc[1];
        return {acc[0] / s, acc[1] / s};
    }
    case ClassifierKind::adaboost: {
        std::array<double, kNumClasses> votes{};
        for (std::size_t i = 0; i < m.trees.size(); ++i) {
            votes[to_index(argmax(m.trees[i].leaf_for(x).distribution))] += m.tree_weights[i];
        }
        const double top = std::max(votes[0], votes[1]);
        const double e0 = std::exp(votes[0] - top);
        const double e1 = std::exp(votes[1] - top);
        return {e0 / (e0 + e1), e1 / (e0 + e1)};
    }
    case ClassifierKind::gbdt_levelwise:
    case ClassifierKind::gbdt_leafwise: {
        double score = m.base_score;
        for (const auto& t : m.trees) score += t.leaf_for(x).value;
        const double p = sigmoid(score);
        return {1.0 - p, p};
    }
    }
    throw ValidationError("unknown classifier kind");
}

Label predict(const TrainedModel& m, std::span<const float> x) {
    return argmax(predict_proba(m, x));
}

std::vector<Label> predict_all(const TrainedModel& m, const FeatureView& X) {
    std::vector<Label> out;
    out.reserve(X.n);
    for (std::size_t i = 0; i < X.n; ++i) out.push_back(predict(m, X.row(i)));
    return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kModelMagic = "CVMD";

void write_config(detail::ByteWriter& w, const EnsembleConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.n_estimators));
    w.f64(c.learning_rate);
    w.i32(c.max_depth ? static_cast<std::int32_t>(*c.max_depth) : -1);
    w.u32(static_cast<std::uint32_t>(c.num_leaves));
    w.u32(static_cast<std::uint32_t>(c.n_bins));
    w.f64(c.subsample_ratio);
    w.u8(c.bootstrap ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(c.feature_subsample));
    w.u32(static_cast<std::uint32_t>(c.min_leaf));
    w.f64(c.min_child_weight);
    w.u64(c.rng_seed);
    w.f64(c.l2_leaf_penalty);
}

EnsembleConfig read_config(detail::ByteReader& r) {
    EnsembleConfig c;
    c.n_estimators = r.u32();
    c.learning_rate = r.f64();
    const std::int32_t depth = r.i32();
    if (depth >= 0) c.max_depth = static_cast<std::size_t>(depth);
    c.num_leaves = r.u32();
    c.n_bins = r.u32();
    c.subsample_ratio = r.f64();
    c.bootstrap = r.u8() != 0;
    c.feature_subsample = r.u32();
    c.min_leaf = r.u32();
    c.min_child_weight = r.f64();
    c.rng_seed = r.u64();
    c.l2_leaf_penalty = r.f64();
    return c;
}

} // namespace

std::vector<std::uint8_t> model_serialize(const TrainedModel& m) {
    detail::ByteWriter w;
    w.bytes(kModelMagic);
    w.u32(kModelFileVersion);
    w.u8(static_cast<std::uint8_t>(m.kind));

    detail::ByteWriter hp;
    write_config(hp, m.config);
    w.u32(static_cast<std::uint32_t>(hp.size()));
    w.bytes(std::string_view(reinterpret_cast<const char*>(hp.buffer().data()), hp.size()));

    w.u32(static_cast<std::uint32_t>(m.feature_dim));
    w.f64(m.base_score);
    w.u32(static_cast<std::uint32_t>(m.trees.size()));
    std::uint32_t offset = 0;
    for (std::size_t t = 0; t < m.trees.size(); ++t) {
        w.f64(m.tree_weights.empty() ? 1.0 : m.tree_weights[t]);
        w.u32(offset);
        w.u32(static_cast<std::uint32_t>(m.trees[t].nodes.size()));
        offset += static_cast<std::uint32_t>(m.trees[t].nodes.size());
    }
    w.u32(offset);
    for (const auto& tree : m.trees) {
        for (const auto& n : tree.nodes) {
            w.i32(n.feature);
            w.f64(n.threshold);
            w.u32(n.left);
            w.u32(n.right);
            w.f64(n.distribution[0]);
            w.f64(n.distribution[1]);
            w.f64(n.value);
        }
    }
    w.u32(detail::crc32(w.buffer()));
    return std::move(w.buffer());
}

TrainedModel model_deserialize(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "model file");
    if (r.bytes(4) != kModelMagic) throw FormatError("not a model file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kModelFileVersion) {
        throw FormatError("unsupported model-file version " + std::to_string(version) + " (expected " +
                          std::to_string(kModelFileVersion) + ")");
    }
    const std::uint8_t tag = r.u8();
    if (tag > static_cast<std::uint8_t>(ClassifierKind::gbdt_leafwise)) {
        throw FormatError("unknown classifier kind tag " + std::to_string(tag) + " at offset 8");
    }
    TrainedModel m;
    m.kind = static_cast<ClassifierKind>(tag);

    const std::uint32_t hp_len = r.u32();
    const std::size_t hp_start = r.offset();
    r.need(hp_len);
    m.config = read_config(r);
    if (r.offset() - hp_start != hp_len) {
        throw FormatError("hyperparameter block length " + std::to_string(hp_len) + " does not match contents");
    }

    m.feature_dim = r.u32();
    m.base_score = r.f64();
    const std::uint32_t n_trees = r.u32();
    r.need(static_cast<std::size_t>(n_trees) * 16);
    struct Entry {
        double weight;
        std::uint32_t offset;
        std::uint32_t count;
    };
    std::vector<Entry> table(n_trees);
    for (auto& e : table) {
        e.weight = r.f64();
        e.offset = r.u32();
        e.count = r.u32();
    }
    const std::uint32_t pool_size = r.u32();
    constexpr std::size_t kNodeBytes = 4 + 8 + 4 + 4 + 8 + 8 + 8;
    r.need(static_cast<std::size_t>(pool_size) * kNodeBytes);
    std::vector<TreeNode> pool(pool_size);
    for (auto& n : pool) {
        n.feature = r.i32();
        n.threshold = r.f64();
        n.left = r.u32();
        n.right = r.u32();
        n.distribution = {r.f64(), r.f64()};
        n.value = r.f64();
    }
    const std::size_t crc_offset = r.offset();
    const std::uint32_t stored = r.u32();
    if (r.remaining() != 0) {
        throw FormatError("trailing bytes after checksum at offset " + std::to_string(r.offset()));
    }
    const std::uint32_t computed = detail::crc32(bytes.first(crc_offset));
    if (stored != computed) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "model checksum mismatch at offset %zu (stored %08x, computed %08x)",
                      crc_offset, stored, computed);
        throw FormatError(buf);
    }

    for (std::size_t t = 0; t < table.size(); ++t) {
        const auto& e = table[t];
        if (e.count == 0 || static_cast<std::size_t>(e.offset) + e.count > pool.size()) {
            throw FormatError("tree " + std::to_string(t) + " node range out of bounds");
        }
        Tree tree;
        tree.nodes.assign(pool.begin() + e.offset, pool.begin() + e.offset + e.count);
        for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
            const auto& n = tree.nodes[id];
            if (n.is_leaf()) continue;
            if (static_cast<std::size_t>(n.feature) >= m.feature_dim || n.left <= id || n.right <= id ||
                n.left >= tree.nodes.size() || n.right >= tree.nodes.size()) {
                throw FormatError("tree " + std::to_string(t) + " node " + std::to_string(id) + " is malformed");
            }
        }
        m.trees.push_back(std::move(tree));
        if (m.kind == ClassifierKind::adaboost) m.tree_weights.push_back(e.weight);
    }
    return m;
}

void model_save(const TrainedModel& m, const std::filesystem::path& path) {
    detail::write_file(path, model_serialize(m));
}

TrainedModel model_load(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    try {
        return model_deserialize(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

} // namespace covifex
