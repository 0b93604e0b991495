#include "covifex/ensemble.hpp"
#include "covifex/error.hpp"
#include "covifex/eval.hpp"
#include "covifex/random.hpp"
#include "covifex/synthetic.hpp"
#include "support/temp_dir.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

using namespace covifex;

namespace {

const FeatureMatrix& reference() {
    static const FeatureMatrix m = reference_dataset();
    return m;
}

FeatureMatrix noisy_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    FeatureMatrix m;
    m.n = n;
    m.d = d;
    m.extractor_name = "noisy";
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = standard_normal(rng);
            if (j < 2) s += v;
            m.values.push_back(static_cast<float>(v));
        }
        m.labels.push_back(s + 0.8 * standard_normal(rng) > 0 ? Label::positive : Label::negative);
        m.sample_ids.push_back(std::to_string(i));
    }
    return m;
}

// Strictly increasing per-column remap: each value becomes its rank among
// the column's distinct values, scaled and offset per column.
FeatureMatrix rank_transform(const FeatureMatrix& m) {
    FeatureMatrix out = m;
    for (std::size_t j = 0; j < m.d; ++j) {
        std::vector<float> col;
        for (std::size_t i = 0; i < m.n; ++i) col.push_back(m.at(i, j));
        std::sort(col.begin(), col.end());
        col.erase(std::unique(col.begin(), col.end()), col.end());
        for (std::size_t i = 0; i < m.n; ++i) {
            const auto r = std::lower_bound(col.begin(), col.end(), m.at(i, j)) - col.begin();
            out.values[i * m.d + j] = static_cast<float>(r) * (1.5f + static_cast<float>(j)) - 40.0f;
        }
    }
    return out;
}

EnsembleConfig small_config(ClassifierKind kind) {
    auto c = EnsembleConfig::defaults_for(kind);
    if (kind == ClassifierKind::random_forest || kind == ClassifierKind::bagging) c.n_estimators = 15;
    if (kind == ClassifierKind::gbdt_levelwise || kind == ClassifierKind::gbdt_leafwise) c.n_estimators = 20;
    if (kind == ClassifierKind::gbdt_leafwise) c.min_leaf = 5;
    return c;
}

} // namespace

TEST(Names, RoundTrip) {
    for (auto k : kAllClassifiers) {
        EXPECT_EQ(classifier_from_string(to_string(k)), k);
        EXPECT_FALSE(display_name(k).empty());
    }
    EXPECT_EQ(display_name(ClassifierKind::gbdt_leafwise), "LightGBM");
    EXPECT_EQ(display_name(ClassifierKind::gbdt_levelwise), "XGBoost");
    EXPECT_THROW(classifier_from_string("svm"), ValidationError);
}

TEST(Samme, QuarterErrorGivesLn3) {
    std::vector<double> w(4, 0.25);
    const std::vector<std::uint8_t> miss{1, 0, 0, 0};
    const auto r = samme_update(w, miss);
    EXPECT_DOUBLE_EQ(r.error, 0.25);
    EXPECT_NEAR(r.alpha, std::log(3.0), 1e-15);
    EXPECT_NEAR(r.alpha, 1.0986, 1e-4);
    EXPECT_TRUE(r.accepted);
    EXPECT_FALSE(r.stop);
    // missed sample weight 0.25*3 = 0.75 against 0.75 for the rest
    EXPECT_NEAR(w[0], 0.5, 1e-15);
    EXPECT_NEAR(w[1], 0.5 / 3.0, 1e-15);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
}

TEST(Samme, PerfectAndUselessLearners) {
    std::vector<double> w(4, 0.25);
    const auto perfect = samme_update(w, std::vector<std::uint8_t>(4, 0));
    EXPECT_TRUE(perfect.accepted);
    EXPECT_TRUE(perfect.stop);
    EXPECT_EQ(perfect.alpha, 1.0);

    const std::vector<std::uint8_t> half{1, 1, 0, 0};
    const auto useless = samme_update(w, half);
    EXPECT_FALSE(useless.accepted);
    EXPECT_TRUE(useless.stop);
}

TEST(Samme, WeightsStayNormalisedOverRandomRounds) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> w(37, 1.0 / 37.0);
        for (int round = 0; round < 30; ++round) {
            std::vector<std::uint8_t> miss(w.size());
            for (auto& m : miss) m = uniform01(rng) < 0.3 ? 1 : 0;
            const auto r = samme_update(w, miss);
            if (r.accepted) {
                EXPECT_LT(r.error, 0.5);
            }
            ASSERT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
            if (r.stop) break;
        }
    }
}

TEST(AdaBoost, PerfectStumpProbability) {
    const FeatureMatrix& m = reference();
    const auto model = train(ClassifierKind::adaboost, m, EnsembleConfig::defaults_for(ClassifierKind::adaboost));
    // 6 sigma apart: one stump is perfect and boosting stops after it
    ASSERT_EQ(model.trees.size(), 1u);
    EXPECT_EQ(model.tree_weights[0], 1.0);
    for (std::size_t i = 0; i < m.n; ++i) {
        const auto p = predict_proba(model, m.row(i));
        EXPECT_NEAR(p[to_index(m.labels[i])], sigmoid(1.0), 1e-12);
    }
}

TEST(Gbdt, BalancedBaseScoreIsZero) {
    FeatureMatrix m = noisy_dataset(274, 4, 1);
    for (std::size_t i = 0; i < m.n; ++i) m.labels[i] = i < 137 ? Label::positive : Label::negative;
    auto cfg = EnsembleConfig::defaults_for(ClassifierKind::gbdt_levelwise);
    cfg.n_estimators = 1;
    const auto model = train(ClassifierKind::gbdt_levelwise, m, cfg);
    EXPECT_EQ(model.base_score, 0.0);
    EXPECT_NEAR(model.train_loss[0], std::log(2.0), 1e-12);

    // no completed rounds: probability is the sigmoid of the base score
    TrainedModel empty = model;
    empty.trees.clear();
    for (std::size_t i = 0; i < 10; ++i) {
        const auto p = predict_proba(empty, m.row(i));
        EXPECT_EQ(p[1], 0.5);
    }
}

TEST(Gbdt, BaseScoreIsLogOdds) {
    FeatureMatrix m = noisy_dataset(100, 3, 2);
    for (std::size_t i = 0; i < m.n; ++i) m.labels[i] = i < 30 ? Label::positive : Label::negative;
    const auto model = train(ClassifierKind::gbdt_leafwise, m, small_config(ClassifierKind::gbdt_leafwise));
    EXPECT_NEAR(model.base_score, std::log(30.0 / 70.0), 1e-15);
}

// Stored curve: training log-loss of the level-wise learner on the reference
// dataset, learning_rate 0.1, 50 rounds. Entry 0 precedes the first round.
TEST(Gbdt, LevelwiseLossCurveGolden) {
    auto cfg = EnsembleConfig::defaults_for(ClassifierKind::gbdt_levelwise);
    cfg.n_estimators = 50;
    const auto model = train(ClassifierKind::gbdt_levelwise, reference(), cfg);
    ASSERT_EQ(model.train_loss.size(), 51u);
    for (std::size_t r = 1; r < model.train_loss.size(); ++r) {
        EXPECT_LE(model.train_loss[r], model.train_loss[r - 1]) << r;
    }
    const std::vector<std::pair<std::size_t, double>> golden{
        {0, 0.69314718055994651},  {1, 0.60160900961632824},  {2, 0.52609055886614542},
        {5, 0.36292145027802336},  {10, 0.20818029606712429}, {20, 0.077894628406410593},
        {30, 0.033276721383142388}, {40, 0.0164429840413538},  {50, 0.0098985738932305736}};
    for (auto [round, loss] : golden) EXPECT_NEAR(model.train_loss[round], loss, 1e-9) << round;

    // Round 1 by hand: one perfect split, g = -/+0.5, h = 0.25 per row, so each
    // leaf moves its 100 rows by 0.1 * 50 / (25 + 1) toward their label.
    const double step = 0.1 * 50.0 / 26.0;
    EXPECT_NEAR(model.train_loss[1], std::log1p(std::exp(-step)), 1e-12);
}

TEST(Gbdt, LossNonIncreasingOnNoisyData) {
    const auto m = noisy_dataset(300, 6, 9);
    for (auto kind : {ClassifierKind::gbdt_levelwise, ClassifierKind::gbdt_leafwise}) {
        auto cfg = EnsembleConfig::defaults_for(kind);
        cfg.n_estimators = 50;
        const auto model = train(kind, m, cfg);
        for (std::size_t r = 1; r < model.train_loss.size(); ++r) {
            EXPECT_LE(model.train_loss[r], model.train_loss[r - 1] + 1e-12) << to_string(kind) << " " << r;
        }
    }
}

TEST(Gbdt, LeafwiseAgreesWithLevelwise) {
    const FeatureMatrix& m = reference();
    auto lv = EnsembleConfig::defaults_for(ClassifierKind::gbdt_levelwise);
    auto lf = EnsembleConfig::defaults_for(ClassifierKind::gbdt_leafwise);
    lf.n_bins = 255;
    lf.num_leaves = std::size_t{1} << *lv.max_depth;
    const auto a = predict_all(train(ClassifierKind::gbdt_levelwise, m, lv), FeatureView(m));
    const auto b = predict_all(train(ClassifierKind::gbdt_leafwise, m, lf), FeatureView(m));
    std::size_t agree = 0;
    for (std::size_t i = 0; i < m.n; ++i) agree += a[i] == b[i];
    EXPECT_GE(static_cast<double>(agree) / static_cast<double>(m.n), 0.95);
}

TEST(Gbdt, RejectsTooManyBins) {
    for (auto kind : {ClassifierKind::gbdt_levelwise, ClassifierKind::gbdt_leafwise}) {
        auto cfg = EnsembleConfig::defaults_for(kind);
        cfg.n_bins = 256;
        EXPECT_THROW(train(kind, reference(), cfg), ValidationError);
    }
}

TEST(Forest, FullFeatureSubsampleEqualsBagging) {
    const auto m = noisy_dataset(80, 5, 3);
    auto rf = EnsembleConfig::defaults_for(ClassifierKind::random_forest);
    rf.n_estimators = 10;
    rf.feature_subsample = m.d;
    auto bag = EnsembleConfig::defaults_for(ClassifierKind::bagging);
    bag.n_estimators = 10;
    const auto a = train(ClassifierKind::random_forest, m, rf);
    const auto b = train(ClassifierKind::bagging, m, bag);
    ASSERT_EQ(a.trees.size(), b.trees.size());
    for (std::size_t t = 0; t < a.trees.size(); ++t) EXPECT_EQ(a.trees[t], b.trees[t]) << t;
}

TEST(Bagging, SingleMemberWithoutBootstrapEqualsTree) {
    const auto m = noisy_dataset(90, 4, 4);
    auto bag = EnsembleConfig::defaults_for(ClassifierKind::bagging);
    bag.n_estimators = 1;
    bag.bootstrap = false;
    bag.subsample_ratio = 1.0;
    const auto a = train(ClassifierKind::bagging, m, bag);
    const auto b = train(ClassifierKind::decision_tree, m, EnsembleConfig::defaults_for(ClassifierKind::decision_tree));
    EXPECT_EQ(predict_all(a, FeatureView(m)), predict_all(b, FeatureView(m)));
    const auto probe = noisy_dataset(50, 4, 99);
    for (std::size_t i = 0; i < probe.n; ++i) EXPECT_EQ(predict_proba(a, probe.row(i)), predict_proba(b, probe.row(i)));
}

TEST(Bagging, ThreadCountDoesNotChangeModel) {
    const auto m = noisy_dataset(60, 4, 5);
    auto c1 = small_config(ClassifierKind::random_forest);
    auto c4 = c1;
    c4.n_threads = 4;
    EXPECT_EQ(model_serialize(train(ClassifierKind::random_forest, m, c1)),
              model_serialize(train(ClassifierKind::random_forest, m, c4)));
}

TEST(Ensembles, UnanimousForestGivesCertainty) {
    const FeatureMatrix& m = reference();
    // every member sees feature 0, whose root split is perfect
    const auto model = train(ClassifierKind::bagging, m, small_config(ClassifierKind::bagging));
    std::vector<float> hi(m.d, 0.0f), lo(m.d, 0.0f);
    hi[0] = 50.0f;
    lo[0] = -50.0f;
    // far outside both clusters along the separating axis every tree agrees
    const auto p_hi = predict_proba(model, hi);
    const auto p_lo = predict_proba(model, lo);
    EXPECT_EQ(std::max(p_hi[0], p_hi[1]), 1.0);
    EXPECT_EQ(std::max(p_lo[0], p_lo[1]), 1.0);
    EXPECT_NE(predict(model, hi), predict(model, lo));
}

TEST(Ensembles, ProbabilitiesFormDistribution) {
    const auto m = noisy_dataset(120, 5, 6);
    const auto probe = noisy_dataset(100, 5, 60);
    for (auto kind : kAllClassifiers) {
        const auto model = train(kind, m, small_config(kind));
        for (std::size_t i = 0; i < probe.n; ++i) {
            const auto p = predict_proba(model, probe.row(i));
            ASSERT_GE(p[0], 0.0);
            ASSERT_GE(p[1], 0.0);
            ASSERT_NEAR(p[0] + p[1], 1.0, 1e-9) << to_string(kind);
            ASSERT_EQ(predict(model, probe.row(i)), p[1] > p[0] ? Label::positive : Label::negative);
        }
        std::vector<float> narrow(4);
        EXPECT_THROW(predict_proba(model, narrow), ValidationError);
    }
}

TEST(Ensembles, DegenerateLabelsRejected) {
    FeatureMatrix m = noisy_dataset(20, 2, 7);
    std::fill(m.labels.begin(), m.labels.end(), Label::positive);
    for (auto kind : kAllClassifiers) {
        try {
            train(kind, m, small_config(kind));
            FAIL() << to_string(kind);
        } catch (const ValidationError& e) {
            EXPECT_NE(std::string(e.what()).find("degenerate labels"), std::string::npos);
        }
    }
}

TEST(Ensembles, ReferenceDatasetAccuracy) {
    const FeatureMatrix& m = reference();
    const auto plan = stratified_kfold(m.labels, 10, 42);
    for (auto kind : kAllClassifiers) {
        auto cfg = EnsembleConfig::defaults_for(kind);
        const auto model = train(kind, m, cfg);
        const auto pred = predict_all(model, FeatureView(m));
        std::size_t correct = 0;
        for (std::size_t i = 0; i < m.n; ++i) correct += pred[i] == m.labels[i];
        EXPECT_GE(static_cast<double>(correct) / static_cast<double>(m.n), 0.95) << to_string(kind);
        const auto cv = cross_validate(kind, m, cfg, plan);
        EXPECT_GE(cv.accuracy.mean, 0.95) << to_string(kind);
    }
}

TEST(Ensembles, MonotoneTransformKeepsPredictions) {
    const auto m = noisy_dataset(120, 4, 8);
    const auto u = rank_transform(m);
    for (auto kind : kAllClassifiers) {
        const auto cfg = small_config(kind);
        const auto a = predict_all(train(kind, m, cfg), FeatureView(m));
        const auto b = predict_all(train(kind, u, cfg), FeatureView(u));
        EXPECT_EQ(a, b) << to_string(kind);
    }
}

TEST(ModelFile, RoundTripIsBitIdentical) {
    covifex::testing::TempDir tmp;
    const auto m = noisy_dataset(100, 5, 10);
    const auto probe = noisy_dataset(100, 5, 11);
    for (auto kind : kAllClassifiers) {
        const auto model = train(kind, m, small_config(kind));
        const auto path = tmp.path() / (std::string(to_string(kind)) + ".cvmd");
        model_save(model, path);
        const auto back = model_load(path);
        EXPECT_EQ(back.kind, kind);
        EXPECT_EQ(back.config, model.config);
        EXPECT_EQ(back.trees, model.trees);
        for (std::size_t i = 0; i < probe.n; ++i) {
            EXPECT_EQ(predict_proba(back, probe.row(i)), predict_proba(model, probe.row(i)));
        }
    }
}

TEST(ModelFile, SameSeedSameBytes) {
    covifex::testing::TempDir tmp;
    const auto m = noisy_dataset(100, 5, 12);
    auto cfg = small_config(ClassifierKind::random_forest);
    cfg.rng_seed = 7;
    model_save(train(ClassifierKind::random_forest, m, cfg), tmp.path() / "a.cvmd");
    model_save(train(ClassifierKind::random_forest, m, cfg), tmp.path() / "b.cvmd");
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    EXPECT_EQ(slurp(tmp.path() / "a.cvmd"), slurp(tmp.path() / "b.cvmd"));
    cfg.rng_seed = 8;
    model_save(train(ClassifierKind::random_forest, m, cfg), tmp.path() / "c.cvmd");
    EXPECT_NE(slurp(tmp.path() / "a.cvmd"), slurp(tmp.path() / "c.cvmd"));
}

TEST(ModelFile, CorruptionDetected) {
    const auto m = noisy_dataset(50, 3, 13);
    const auto bytes = model_serialize(train(ClassifierKind::decision_tree, m, small_config(ClassifierKind::decision_tree)));

    auto flipped = bytes;
    flipped[flipped.size() - 10] ^= 0x40;
    try {
        model_deserialize(flipped);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
    }

    auto version = bytes;
    version[4] = 2;
    EXPECT_THROW(model_deserialize(version), FormatError);

    auto kind = bytes;
    kind[8] = 17;
    try {
        model_deserialize(kind);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("kind"), std::string::npos) << e.what();
    }

    for (std::size_t cut : {std::size_t{2}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        EXPECT_THROW(model_deserialize(std::span(bytes).first(cut)), FormatError) << cut;
    }
    EXPECT_THROW(model_load("/nonexistent/model.cvmd"), IoError);
}

TEST(Config, Validation) {
    auto c = EnsembleConfig::defaults_for(ClassifierKind::gbdt_levelwise);
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(ClassifierKind::gbdt_levelwise), ValidationError);
    c = EnsembleConfig::defaults_for(ClassifierKind::bagging);
    c.n_estimators = 0;
    EXPECT_THROW(c.validate(ClassifierKind::bagging), ValidationError);
    c = EnsembleConfig::defaults_for(ClassifierKind::gbdt_leafwise);
    c.num_leaves = 1;
    EXPECT_THROW(c.validate(ClassifierKind::gbdt_leafwise), ValidationError);
}
