#include "flowsuff/analysis/ablation.hpp"
#include "flowsuff/analysis/correlation.hpp"
#include "flowsuff/synth/generators.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace flowsuff;

namespace {

// Upper binomial tail by direct summation in log space.
double binomial_tail(int k, int n, double p) {
    double s = 0.0;
    for (int i = k; i <= n; ++i)
        s += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) + i * std::log(p) +
                      (n - i) * std::log1p(-p));
    return s;
}

GroundTruth truth(const std::vector<std::string>& ids, const std::vector<double>& s) {
    GroundTruth g;
    g.ids = ids;
    g.scores = s;
    return g;
}

// Entry (a, b) grows with the source quality q[a] so the median ranking equals q's.
ISMatrix monotone_matrix(const std::vector<double>& q) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < q.size(); ++i) ids.push_back("m" + std::to_string(i));
    ISMatrix m = ISMatrix::empty(ids, std::vector<Index>(q.size(), 1));
    for (std::size_t a = 0; a < q.size(); ++a)
        for (std::size_t b = 0; b < q.size(); ++b)
            if (a != b) m.set(static_cast<Index>(a), static_cast<Index>(b), q[a] + 0.01 * static_cast<double>(b));
    return m;
}

ValidationNlls synthetic_nlls(const std::vector<double>& strength, Index rows, std::uint64_t seed) {
    RngStream rng(seed);
    ValidationNlls v;
    const auto k = strength.size();
    for (std::size_t i = 0; i < k; ++i) {
        v.ids.push_back("m" + std::to_string(i));
        v.dims.push_back(2);
        Vector m(rows);
        for (Index r = 0; r < rows; ++r) m(r) = 2.0 + 0.5 * rng.normal();
        v.marginal.push_back(m);
    }
    v.conditional.assign(k, std::vector<Vector>(k));
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) {
            if (a == b) continue;
            Vector c(rows);
            for (Index r = 0; r < rows; ++r) c(r) = v.marginal[b](r) - strength[a] + 0.3 * rng.normal();
            v.conditional[a][b] = c;
        }
    return v;
}

}  // namespace

TEST(Correlation, Kernels) {
    const std::vector<double> x{1, 2, 3, 4};
    auto r = rank_correlations(x, x);
    EXPECT_DOUBLE_EQ(r.spearman, 1.0);
    EXPECT_DOUBLE_EQ(r.pearson, 1.0);
    EXPECT_DOUBLE_EQ(rank_correlations(x, {4, 3, 2, 1}).spearman, -1.0);
    EXPECT_NEAR(rank_correlations(x, {1, 3, 2, 4}).spearman, 0.8, 1e-15);
    EXPECT_FALSE(rank_correlations(x, {2, 2, 2, 2}).defined());
    EXPECT_THROW(rank_correlations({1, 2}, {1, 2}), DataError);
}

TEST(Correlation, AverageRanksAndMonotoneInvariance) {
    const auto r = average_ranks({10, 20, 20, 5});
    EXPECT_EQ(r, (std::vector<double>{2, 3.5, 3.5, 1}));
    const std::vector<double> x{0.3, -1.2, 4.0, 2.2, 0.0, 7.5};
    const std::vector<double> y{1.0, 0.2, 3.0, 3.5, -0.4, 2.0};
    std::vector<double> fx;
    for (double v : x) fx.push_back(std::exp(3.0 * v) + 5.0);
    EXPECT_DOUBLE_EQ(spearman_correlation(x, y), spearman_correlation(fx, y));
}

TEST(TopK, OverlapCases) {
    const std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
    const std::vector<double> s{6, 5, 4, 3, 2, 1};
    EXPECT_EQ(top3_overlap(ids, s, s), 3);
    EXPECT_EQ(top3_overlap(ids, s, {1, 2, 3, 4, 5, 6}), 0);
    std::vector<double> scaled;
    for (double v : s) scaled.push_back(10.0 * v - 3.0);
    const std::vector<double> other{2, 6, 1, 5, 4, 3};
    EXPECT_EQ(top3_overlap(ids, s, other), top3_overlap(ids, other, s));
    EXPECT_EQ(top3_overlap(ids, s, other), top3_overlap(ids, scaled, other));
    EXPECT_EQ(set_overlap({"Linq", "SFR", "GritLM"}, {"SFR", "GritLM", "Linq"}), 3);
    // ties resolved by name
    EXPECT_EQ(top_k({"z", "y", "x", "w"}, {1, 1, 1, 1}, 3), (std::vector<std::string>{"w", "x", "y"}));
}

TEST(Bootstrap, MonotoneAndDegenerate) {
    const std::vector<double> q{0.5, 0.1, 0.9, 0.3, 0.7};
    const auto m = monotone_matrix(q);
    const auto gt = truth(m.ids, q);
    const auto rep = loo_bootstrap(m, gt);
    EXPECT_DOUBLE_EQ(rep.rho_full, 1.0);
    EXPECT_DOUBLE_EQ(rep.rho_min, 1.0);
    EXPECT_DOUBLE_EQ(rep.rho_max, 1.0);
    EXPECT_EQ(rep.replicates.size(), 5u);
    EXPECT_EQ(rep.flagged, 0);

    ISMatrix flat = ISMatrix::empty(m.ids, m.dims);
    for (Index a = 0; a < 5; ++a)
        for (Index b = 0; b < 5; ++b)
            if (a != b) flat.set(a, b, 1.0);
    const auto deg = loo_bootstrap(flat, gt);
    EXPECT_EQ(deg.flagged, 5);
    EXPECT_TRUE(std::isnan(deg.rho_min));

    const auto sub = restrict_matrix(m, {0, 2, 4});
    EXPECT_EQ(sub.size(), 3);
    EXPECT_EQ(sub.raw(1, 2), m.raw(2, 4));
    EXPECT_THROW(loo_bootstrap(restrict_matrix(m, {0, 1, 2}), gt), DataError);
}

TEST(Preference, BinomialTailAndLowerBound) {
    const auto t = binomial_preference_test(225, 308);
    EXPECT_NEAR(t.fraction, 0.7305, 5e-5);
    const double oracle = binomial_tail(225, 308, 0.5);
    EXPECT_NEAR(t.p_value / oracle, 1.0, 1e-9);
    EXPECT_NEAR(t.p_value, 1.37e-16, 0.005e-16);
    EXPECT_NEAR(binomial_tail(225, 308, t.lower_bound), 0.05, 1e-9);
    EXPECT_NEAR(t.lower_bound, 0.686, 5e-4);
}

TEST(Preference, PairCountingWithTies) {
    const auto t = pairwise_preferences({4, 3, 2, 1}, {4, 3, 1, 2});
    EXPECT_EQ(t.pairs, 6);
    EXPECT_EQ(t.agreements, 5);
    const auto tied = pairwise_preferences({1, 2, 3}, {1, 1, 3});
    EXPECT_EQ(tied.agreements, 2);
}

TEST(Subsample, FullAlphaIsExactlyZeroAndSmallSkipped) {
    const std::vector<double> strength{0.4, 0.1, 0.3, 0.2};
    const auto nll = synthetic_nlls(strength, 200, 1);
    const auto gt = truth(nll.ids, strength);
    const auto curve = subsample_stability(nll, {0.02, 0.2, 1.0}, 5, gt, 9);
    EXPECT_EQ(curve.warnings.size(), 1u);
    for (const auto& p : curve.points) {
        if (p.control == 1.0) {
            EXPECT_EQ(p.statistic, 0.0);
        }
    }
    EXPECT_EQ(curve.mean_at(1.0), 0.0);
    EXPECT_LT(curve.mean_at(0.2), 0.1);
    const auto csv = curve.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "control,statistic,repeat,seed");
    const auto again = subsample_stability(nll, {0.02, 0.2, 1.0}, 5, gt, 9);
    EXPECT_EQ(again.to_csv(), csv);
}

TEST(Subsample, FullRowsReproduceMatrix) {
    const auto nll = synthetic_nlls({0.4, 0.1, 0.3}, 50, 2);
    const auto m = subset_is_matrix(nll, all_rows(50));
    EXPECT_NEAR(m.raw(0, 1), nll.marginal[1].mean() - nll.conditional[0][1].mean(), 1e-12);
    EXPECT_NEAR(m.normalized(0, 1), m.raw(0, 1) / 2.0, 1e-15);
}

TEST(Shuffle, MapProperties) {
    const RngStream rng(4);
    EXPECT_EQ(shuffle_map(100, 0.0, rng), all_rows(100));
    const auto full = shuffle_map(100, 1.0, rng);
    EXPECT_EQ(std::set<int>(full.begin(), full.end()).size(), 100u);
    const auto half = shuffle_map(100, 0.5, rng);
    int moved = 0;
    std::set<int> touched;
    for (int i = 0; i < 100; ++i)
        if (half[static_cast<std::size_t>(i)] != i) {
            ++moved;
            touched.insert(i);
        }
    EXPECT_LE(moved, 50);
    EXPECT_GT(moved, 40);
    std::set<int> images;
    for (int i : touched) images.insert(half[static_cast<std::size_t>(i)]);
    EXPECT_EQ(images, touched);
}

TEST(Shuffle, DestroysDependenceOnTrainedPair) {
    RngStream rng(21);
    auto g = gen_correlated_gaussians(3000, 1, 1, 0.9, rng);
    const auto split = split_dataset(g.V, 0.9, 3);
    auto mc = TrainConfig::desk(Stage::marginal);
    auto cc = TrainConfig::desk(Stage::conditional);
    mc.flow.hidden_width = cc.flow.hidden_width = 16;
    mc.max_epochs = cc.max_epochs = 10;
    const auto marg = train_marginal(g.V, split, mc);
    const auto cond = train_conditional(g.U, g.V, marg.model, split, cc);
    const Matrix u = g.U.take(split.val), v = g.V.take(split.val);
    const RngStream srng(5);
    const double is0 = shuffled_is(marg.model, cond.model, u, v, 0.0, srng);
    EXPECT_EQ(is0, information_sufficiency(marg.model, cond.model, u, v).is);
    const double is1 = shuffled_is(marg.model, cond.model, u, v, 1.0, srng);
    EXPECT_GT(is0, 0.3);
    EXPECT_LT(is1, 0.2 * is0);
}

TEST(CondOnly, UntrainedCloneEqualsNegativeMarginalNll) {
    RngStream rng(6);
    const auto g = gen_correlated_gaussians(300, 3, 2, 0.5, rng);
    FlowConfig fc;
    fc.hidden_width = 16;
    FlowModel marg = build_flow(2, fc, rng);
    marg.standardizer() = Standardizer::fit(g.V.values);
    marg.initialize_actnorm(g.V.values);
    const FlowModel cond = clone_to_conditional(marg, 3, 4, rng, &g.U.values);
    EXPECT_DOUBLE_EQ(cond_only_score(cond, g.U.values, g.V.values), -mean_nll(marg, g.V.values) / 2.0);
}

TEST(Perturbation, ZeroSigmaIsExactAndZeroTensorsUntouched) {
    RngStream rng(8);
    const auto g = gen_correlated_gaussians(300, 2, 2, 0.5, rng);
    FlowConfig fc;
    fc.hidden_width = 16;
    FlowModel marg = build_flow(2, fc, rng);
    marg.standardizer() = Standardizer::fit(g.V.values);
    marg.initialize_actnorm(g.V.values);
    const auto rows = weight_perturbation_sweep(marg, {0.0, 0.01, 0.05}, 3, g.V.values, nullptr, 1);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].median, 0.0);
    EXPECT_EQ(rows[0].max, 0.0);
    EXPECT_GT(rows[2].mean, 0.0);
    EXPECT_THROW(weight_perturbation_sweep(marg, {0.6}, 1, g.V.values, nullptr, 1), ContractViolation);

    // a zero-initialized conditional branch stays zero, so the clone matches the marginal row
    const FlowModel cond = clone_to_conditional(marg, 2, 4, rng, &g.U.values);
    const auto crow = weight_perturbation_sweep(cond, {0.01}, 3, g.V.values, &g.U.values, 1);
    EXPECT_TRUE(std::isfinite(crow[0].median));
}
