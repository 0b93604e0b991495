#include "covifex/eval.hpp"

#include "covifex/error.hpp"
#include "covifex/random.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace covifex {

std::size_t FoldPlan::n() const noexcept {
    std::size_t total = 0;
    for (const auto& f : folds) total += f.size();
    return total;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t f) const {
    if (f >= folds.size()) throw ValidationError("fold index out of range");
    std::vector<std::size_t> out;
    out.reserve(n() - folds[f].size());
    for (std::size_t g = 0; g < folds.size(); ++g) {
        if (g != f) out.insert(out.end(), folds[g].begin(), folds[g].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

FoldPlan stratified_kfold(std::span<const Label> labels, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ValidationError("k must be >= 2, got " + std::to_string(k));
    std::array<std::vector<std::size_t>, kNumClasses> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[to_index(labels[i])].push_back(i);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        if (by_class[c].size() < k) {
            throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                                  " members, fewer than k = " + std::to_string(k));
        }
    }

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.stratified = true;
    plan.folds.resize(k);
    Rng rng(seed);
    std::size_t deal = 0;
    for (auto& members : by_class) {
        shuffle(std::span<std::size_t>(members), rng);
        for (std::size_t idx : members) {
            plan.folds[deal].push_back(idx);
            deal = (deal + 1) % k;
        }
    }
    for (auto& f : plan.folds) std::sort(f.begin(), f.end());
    return plan;
}

FoldPlan remap_plan(const FoldPlan& plan, std::span<const std::string> from_ids, std::span<const std::string> to_ids) {
    if (from_ids.size() != to_ids.size()) {
        throw ValidationError("cannot remap fold plan: row counts differ (" + std::to_string(from_ids.size()) +
                              " vs " + std::to_string(to_ids.size()) + ")");
    }
    std::unordered_map<std::string_view, std::size_t> row_in_target;
    row_in_target.reserve(to_ids.size());
    for (std::size_t i = 0; i < to_ids.size(); ++i) row_in_target.emplace(to_ids[i], i);

    FoldPlan out = plan;
    for (auto& fold : out.folds) {
        for (auto& idx : fold) {
            if (idx >= from_ids.size()) throw ValidationError("fold plan index out of range");
            auto it = row_in_target.find(from_ids[idx]);
            if (it == row_in_target.end()) {
                throw ValidationError("cannot remap fold plan: id \"" + from_ids[idx] + "\" missing from target");
            }
            idx = it->second;
        }
        std::sort(fold.begin(), fold.end());
    }
    return out;
}

ConfusionCounts confusion(std::span<const Label> y_true, std::span<const Label> y_pred) {
    if (y_true.size() != y_pred.size()) {
        throw ValidationError("confusion: length mismatch (" + std::to_string(y_true.size()) + " vs " +
                              std::to_string(y_pred.size()) + ")");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const bool t = y_true[i] == Label::positive;
        const bool p = y_pred[i] == Label::positive;
        if (t && p) {
            ++c.tp;
        } else if (t) {
            ++c.fn;
        } else if (p) {
            ++c.fp;
        } else {
            ++c.tn;
        }
    }
    return c;
}

namespace {

double ratio(std::size_t num, std::size_t den, bool& degenerate) {
    if (den == 0) {
        degenerate = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

} // namespace

Metrics metrics(const ConfusionCounts& c) {
    const std::size_t total = c.total();
    if (total == 0) throw ValidationError("metrics of an empty confusion matrix");
    Metrics m;
    m.recall = ratio(c.tp, c.tp + c.fn, m.recall_degenerate);
    m.precision = ratio(c.tp, c.tp + c.fp, m.precision_degenerate);
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
    const double denom = m.recall + m.precision;
    if (denom == 0.0) {
        m.f1_degenerate = true;
        m.f1 = 0.0;
    } else {
        m.f1 = 2.0 * (m.recall * m.precision) / denom;
    }
    return m;
}

Metrics metrics_macro(const ConfusionCounts& c) {
    const Metrics pos = metrics(c);
    const Metrics neg = metrics(ConfusionCounts{c.tn, c.fn, c.tp, c.fp});
    Metrics m;
    m.accuracy = pos.accuracy;
    m.precision = 0.5 * (pos.precision + neg.precision);
    m.recall = 0.5 * (pos.recall + neg.recall);
    m.f1 = 0.5 * (pos.f1 + neg.f1);
    m.precision_degenerate = pos.precision_degenerate || neg.precision_degenerate;
    m.recall_degenerate = pos.recall_degenerate || neg.recall_degenerate;
    m.f1_degenerate = pos.f1_degenerate || neg.f1_degenerate;
    return m;
}

MetricStats mean_std(std::span<const double> values) {
    MetricStats s;
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size()));
    return s;
}

MetricSummary MetricSummary::from_folds(std::vector<FoldResult> folds) {
    MetricSummary s;
    s.per_fold = std::move(folds);
    auto stat = [&](auto getter) {
        std::vector<double> v;
        v.reserve(s.per_fold.size());
        for (const auto& f : s.per_fold) v.push_back(getter(f));
        return mean_std(v);
    };
    s.accuracy = stat([](const FoldResult& f) { return f.positive.accuracy; });
    s.precision = stat([](const FoldResult& f) { return f.positive.precision; });
    s.recall = stat([](const FoldResult& f) { return f.positive.recall; });
    s.f1 = stat([](const FoldResult& f) { return f.positive.f1; });
    s.precision_macro = stat([](const FoldResult& f) { return f.macro.precision; });
    s.recall_macro = stat([](const FoldResult& f) { return f.macro.recall; });
    s.f1_macro = stat([](const FoldResult& f) { return f.macro.f1; });
    s.train_time_s = stat([](const FoldResult& f) { return f.train_time_s; });
    s.predict_time_s = stat([](const FoldResult& f) { return f.predict_time_s; });
    return s;
}

FeatureMatrix select_rows(const FeatureMatrix& m, std::span<const std::size_t> rows) {
    FeatureMatrix out;
    out.n = rows.size();
    out.d = m.d;
    out.extractor_name = m.extractor_name;
    out.values.reserve(rows.size() * m.d);
    out.labels.reserve(rows.size());
    out.sample_ids.reserve(rows.size());
    for (std::size_t r : rows) {
        if (r >= m.n) throw ValidationError("row index " + std::to_string(r) + " out of range");
        const auto row = m.row(r);
        out.values.insert(out.values.end(), row.begin(), row.end());
        out.labels.push_back(m.labels[r]);
        out.sample_ids.push_back(m.sample_ids[r]);
    }
    return out;
}

MetricSummary cross_validate(ClassifierKind kind, const FeatureMatrix& X, const EnsembleConfig& cfg,
                             const FoldPlan& plan) {
    feature_matrix_validate(X);
    if (plan.n() != X.n) {
        throw ValidationError("fold plan covers " + std::to_string(plan.n()) + " rows, matrix has " +
                              std::to_string(X.n));
    }
    std::vector<FoldResult> folds;
    folds.reserve(plan.k);
    for (std::size_t f = 0; f < plan.folds.size(); ++f) {
        const FeatureMatrix train_set = select_rows(X, plan.train_indices(f));
        const FeatureMatrix test_set = select_rows(X, plan.folds[f]);

        auto trained = time_block("train", [&] { return train(kind, train_set, cfg); });
        auto predicted = time_block("predict", [&] { return predict_all(trained.value, FeatureView(test_set)); });

        FoldResult r;
        r.counts = confusion(test_set.labels, predicted.value);
        r.positive = metrics(r.counts);
        r.macro = metrics_macro(r.counts);
        r.train_time_s = trained.seconds;
        r.predict_time_s = predicted.seconds;
        folds.push_back(r);
    }
    return MetricSummary::from_folds(std::move(folds));
}

} // namespace covifex
