#include "flowsuff/synth/generators.hpp"
#include "flowsuff/training/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

using namespace flowsuff;

namespace {

double gaussian_entropy(const Matrix& cov) {
    const double d = static_cast<double>(cov.rows());
    return 0.5 * (d * std::log(2.0 * std::numbers::pi * std::numbers::e) + std::log(cov.determinant()));
}

TrainConfig quick(Stage s, int width = 32) {
    auto c = TrainConfig::desk(s);
    c.flow.hidden_width = width;
    return c;
}

EmbeddingSet gaussian_set(const Matrix& cov, Index n, std::uint64_t seed) {
    RngStream rng(seed);
    const Eigen::LLT<Matrix> llt(cov);
    EmbeddingSet e;
    e.model_id = "V";
    e.values = llt.matrixL() * rng.normal_matrix(cov.rows(), n);
    return e;
}

}  // namespace

TEST(Split, SmallAndFullSizes) {
    const auto s = split_rows(10, 0.9, 3);
    EXPECT_EQ(s.train.size(), 9u);
    EXPECT_EQ(s.val.size(), 1u);
    std::set<int> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    EXPECT_EQ(all.size(), 10u);

    const auto big = split_rows(14650, 0.9, 1);
    EXPECT_EQ(big.train.size(), 13185u);
    EXPECT_EQ(big.val.size(), 1465u);
}

TEST(Split, DeterministicAndValidated) {
    const auto a = split_rows(500, 0.8, 42), b = split_rows(500, 0.8, 42), c = split_rows(500, 0.8, 43);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.val, b.val);
    EXPECT_NE(a.train, c.train);
    EXPECT_THROW(split_rows(1, 0.9, 0), DataError);
    EXPECT_THROW(split_rows(100, 1.0, 0), ConfigError);
    EXPECT_THROW(split_rows(100, 0.0, 0), ConfigError);
}

TEST(TrainConfig, FullScaleDefaults) {
    const auto m = TrainConfig::marginal_defaults();
    EXPECT_EQ(m.lr, 2e-2);
    EXPECT_EQ(m.batch_size, 256);
    EXPECT_EQ(m.accum_steps, 2);
    EXPECT_EQ(m.max_epochs, 1000);
    EXPECT_EQ(m.weight_decay, 1e-3);
    EXPECT_EQ(m.ema_decay, 0.999);
    const auto c = TrainConfig::conditional_defaults();
    EXPECT_EQ(c.lr, 1e-1);
    EXPECT_EQ(c.batch_size, 64);
    EXPECT_EQ(c.accum_steps, 4);
    EXPECT_EQ(c.max_epochs, 500);
    TrainConfig bad;
    bad.ema_decay = 1.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Training, EpochZeroIsStandardizedNormal) {
    const Matrix cov = Matrix::Identity(2, 2) * 4.0;
    const auto V = gaussian_set(cov, 1000, 1);
    const auto split = split_dataset(V, 0.9, 1);
    auto cfg = quick(Stage::marginal);
    cfg.max_epochs = 0;
    const auto t = train_marginal(V, split, cfg);
    const Standardizer s = Standardizer::fit(V.take(split.train));
    const Matrix z = s.apply(V.take(split.val));
    const double expect = (0.5 * z.colwise().squaredNorm().array() + kLog2Pi).mean() - s.log_abs_det();
    EXPECT_NEAR(t.record.initial_val_nll, expect, 1e-9);
    EXPECT_EQ(t.record.val_nll.size(), 1u);
}

TEST(Training, StandardNormalEntropy) {
    const Matrix cov = Matrix::Identity(2, 2);
    const auto V = gaussian_set(cov, 2000, 2);
    const auto t = train_marginal(V, split_dataset(V, 0.9, 2), quick(Stage::marginal));
    EXPECT_NEAR(t.record.final_val_nll, gaussian_entropy(cov), 0.1);
    EXPECT_NEAR(gaussian_entropy(cov), 2.8379, 1e-4);
    EXPECT_TRUE(std::isfinite(t.record.m_train));
    EXPECT_GE(t.record.m_val, std::abs(t.record.final_val_nll) - 1e-12);
}

TEST(Training, CorrelatedGaussianEntropy) {
    Matrix cov(2, 2);
    cov << 1.0, 0.9, 0.9, 1.0;
    const auto V = gaussian_set(cov, 4000, 3);
    auto cfg = quick(Stage::marginal);
    cfg.max_epochs = 40;
    const auto t = train_marginal(V, split_dataset(V, 0.9, 3), cfg);
    EXPECT_NEAR(gaussian_entropy(cov), 2.0076, 1e-4);
    EXPECT_NEAR(t.record.final_val_nll, gaussian_entropy(cov), 0.1);
    EXPECT_LT(t.record.final_val_nll, t.record.initial_val_nll - 0.5);
}

TEST(Training, ConditionalWarmStartAndGaussianConditionalEntropy) {
    RngStream rng(4);
    const double rho = 0.9;
    const auto g = gen_correlated_gaussians(5000, 1, 1, rho, rng);
    const auto split = split_dataset(g.V, 0.9, 4);
    const auto marg = train_marginal(g.V, split, quick(Stage::marginal));
    const auto cond = train_conditional(g.U, g.V, marg.model, split, quick(Stage::conditional));
    EXPECT_NEAR(cond.record.initial_val_nll, marg.record.final_val_nll, 1e-6);
    const double h_cond = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * (1.0 - rho * rho));
    EXPECT_NEAR(h_cond, 0.5886, 1e-4);
    EXPECT_NEAR(cond.record.final_val_nll, h_cond, 0.1);
    EXPECT_LT(cond.record.final_val_nll, marg.record.final_val_nll - 0.05);
}

TEST(Training, IndependentSourceLeavesNllUnchanged) {
    RngStream rng(5);
    const auto g = gen_correlated_gaussians(3000, 2, 1, 0.0, rng);
    const auto split = split_dataset(g.V, 0.9, 5);
    const auto marg = train_marginal(g.V, split, quick(Stage::marginal));
    const auto cond = train_conditional(g.U, g.V, marg.model, split, quick(Stage::conditional));
    EXPECT_NEAR(cond.record.final_val_nll, marg.record.final_val_nll, 0.1);
}

TEST(Training, DeterministicRecords) {
    RngStream rng(6);
    const auto g = gen_correlated_gaussians(600, 2, 2, 0.7, rng);
    const auto split = split_dataset(g.V, 0.9, 6);
    auto mc = quick(Stage::marginal, 16);
    mc.max_epochs = 3;
    auto cc = quick(Stage::conditional, 16);
    cc.max_epochs = 3;
    auto run = [&] {
        const auto m = train_marginal(g.V, split, mc);
        const auto c = train_conditional(g.U, g.V, m.model, split, cc);
        return m.record.to_json(false).dump() + c.record.to_json(false).dump();
    };
    EXPECT_EQ(run(), run());
}

TEST(Training, RowMismatchIsAlignmentError) {
    RngStream rng(7);
    const auto g = gen_correlated_gaussians(100, 1, 1, 0.5, rng);
    auto cfg = quick(Stage::marginal, 8);
    cfg.max_epochs = 0;
    const auto split = split_dataset(g.V, 0.9, 7);
    const auto m = train_marginal(g.V, split, cfg);
    EmbeddingSet short_u = g.U;
    short_u.values.conservativeResize(Eigen::NoChange, 50);
    EXPECT_THROW(train_conditional(short_u, g.V, m.model, split, quick(Stage::conditional)), AlignmentError);
}

TEST(Training, ReportedWeightsAreSinglePrecision) {
    RngStream rng(8);
    const auto g = gen_correlated_gaussians(400, 1, 2, 0.5, rng);
    auto cfg = quick(Stage::marginal, 8);
    cfg.max_epochs = 2;
    auto t = train_marginal(g.V, split_dataset(g.V, 0.9, 8), cfg);
    for (auto* p : t.model.parameters())
        for (Index i = 0; i < p->value.size(); ++i)
            EXPECT_EQ(p->value.data()[i], static_cast<double>(static_cast<float>(p->value.data()[i])));
}

TEST(Training, SamplesMatchTrainedDensity) {
    Matrix cov(2, 2);
    cov << 2.0, 0.5, 0.5, 1.0;
    const auto V = gaussian_set(cov, 3000, 9);
    const auto t = train_marginal(V, split_dataset(V, 0.9, 9), quick(Stage::marginal));
    RngStream rng(10);
    const Matrix s = t.model.sample(20000, rng);
    const Vector mean = s.rowwise().mean();
    const Matrix c = (s.colwise() - mean) * (s.colwise() - mean).transpose() / static_cast<double>(s.cols() - 1);
    EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.1);
    EXPECT_LT((c - cov).cwiseAbs().maxCoeff(), 0.15);
}
