#include "flowsuff/flow/flow_model.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace flowsuff;
using flowsuff::testing::randomize;
using flowsuff::testing::small_config;

namespace {

Matrix fd_jacobian(const FlowModel& m, const Vector& v, double h) {
    const Index d = v.size();
    Matrix J(d, d);
    for (Index j = 0; j < d; ++j) {
        Vector p = v, q = v;
        p(j) += h;
        q(j) -= h;
        J.col(j) = (m.to_latent(Matrix(p)) - m.to_latent(Matrix(q))).col(0) / (2 * h);
    }
    return J;
}

}  // namespace

TEST(Flow, IdentityFlowAtOriginIsStandardNormal) {
    RngStream rng(1);
    const auto m = build_flow(2, FlowConfig{}, rng);
    EXPECT_NEAR(flow_log_prob(m, Vector::Zero(2)), -1.8379, 1e-4);
    EXPECT_NEAR(flow_log_prob(m, Vector::Zero(2)), -kLog2Pi, 1e-12);
}

TEST(Flow, BuildIsStandardizedNormalEverywhere) {
    RngStream rng(2);
    auto m = build_flow(3, small_config(), rng);
    m.standardizer().mean = Vector::LinSpaced(3, -1.0, 2.0);
    m.standardizer().scale = Vector::LinSpaced(3, 0.5, 3.0);
    for (int t = 0; t < 100; ++t) {
        const Vector v = rng.normal_matrix(3, 1) * 4.0;
        const Vector z = ((v - m.standardizer().mean).array() / m.standardizer().scale.array()).matrix();
        const double expect = -0.5 * z.squaredNorm() - 1.5 * kLog2Pi - m.standardizer().scale.array().log().sum();
        EXPECT_NEAR(flow_log_prob(m, v), expect, 1e-11);
    }
}

TEST(Flow, BlockStructure) {
    RngStream rng(3);
    const auto m = build_flow(5, FlowConfig{}, rng);
    EXPECT_EQ(m.blocks().size(), 6u);
    EXPECT_EQ(m.atomic_count(), 18);
    for (std::size_t l = 0; l < m.blocks().size(); ++l) {
        const auto& c = m.blocks()[l].coupling;
        EXPECT_EQ(c.identity_idx.size() + c.transform_idx.size(), 5u);
        for (int i : c.transform_idx) EXPECT_EQ(i % 2, static_cast<int>(l % 2));
        EXPECT_EQ(c.net.feature_dim(), 64);
    }
}

TEST(Flow, OneDimensionalFlowTransformsItsOnlyCoordinate) {
    RngStream rng(4);
    const auto m = build_flow(1, FlowConfig{}, rng);
    for (const auto& b : m.blocks()) {
        EXPECT_TRUE(b.coupling.identity_idx.empty());
        EXPECT_EQ(b.coupling.transform_idx, std::vector<int>{0});
    }
}

TEST(Flow, PerLayerLogdetContributions) {
    RngStream rng(5);
    auto m = build_flow(4, small_config(), rng);
    randomize(m, rng, 0.3);
    const Matrix y = rng.normal_matrix(4, 1);
    for (int i = 0; i < m.atomic_count(); ++i) {
        const Matrix out = m.apply_atomic(i, y);
        Matrix J(4, 4);
        const double h = 1e-5;
        for (Index j = 0; j < 4; ++j) {
            Matrix p = y, q = y;
            p(j) += h;
            q(j) -= h;
            J.col(j) = (m.apply_atomic(i, p) - m.apply_atomic(i, q)).col(0) / (2 * h);
        }
        const double fd = std::log(std::abs(J.determinant()));
        const auto& b = m.blocks()[static_cast<std::size_t>(i / 3)];
        switch (FlowModel::atomic_kind(i)) {
            case AtomicKind::permutation: EXPECT_NEAR(fd, 0.0, 1e-8); break;
            case AtomicKind::actnorm: EXPECT_NEAR(fd, b.actnorm.log_abs_det(), 1e-8); break;
            case AtomicKind::coupling: break;
        }
    }
}

TEST(Flow, ChangeOfVariablesMatchesFiniteDifferenceJacobian) {
    RngStream rng(6);
    auto m = build_flow(4, small_config(), rng);
    randomize(m, rng, 0.4);
    m.standardizer().scale << 1.5, 0.7, 1.0, 2.0;
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Vector v = rng.normal_matrix(4, 1) * 1.5;
        const Matrix z = m.to_latent(Matrix(v));
        const double analytic = flow_log_prob(m, v) + 0.5 * z.squaredNorm() + 2.0 * kLog2Pi;
        const double numeric = std::log(std::abs(fd_jacobian(m, v, 1e-4).determinant()));
        worst = std::max(worst, std::abs(std::expm1(analytic - numeric)));
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(Flow, GradientsMatchFiniteDifferences) {
    RngStream rng(7);
    auto marginal = build_flow(3, small_config(8), rng);
    auto m = marginal.clone_to_conditional(2, 2, rng);
    randomize(m, rng, 0.4);
    const Matrix v = rng.normal_matrix(3, 5);
    const Matrix u = rng.normal_matrix(2, 5);
    const Vector weight = Vector::Constant(5, -1.0 / 5.0);  // mean NLL
    auto loss = [&] { return weight.dot(m.log_prob(v, &u)); };
    auto params = m.parameters();
    zero_grads(params);
    FlowModel::Tape tape;
    m.forward(v, &u, tape);
    m.backward(tape, weight);

    const double h = 1e-4;
    double worst = 0.0;
    for (int probe = 0; probe < 100; ++probe) {
        auto* p = params[rng.uniform_index(params.size())];
        const auto i = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(p->size())));
        const double o = p->value.data()[i];
        p->value.data()[i] = o + h;
        const double lp = loss();
        p->value.data()[i] = o - h;
        const double lm = loss();
        p->value.data()[i] = o;
        const double fd = (lp - lm) / (2 * h);
        const double an = p->grad.data()[i];
        worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Flow, ZeroInitConditionalEqualsMarginal) {
    RngStream rng(8);
    auto marginal = build_flow(3, small_config(), rng);
    randomize(marginal, rng, 0.4);
    const auto cond = clone_to_conditional(marginal, 5, 4, rng);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const Vector v = rng.normal_matrix(3, 1) * 2.0;
        const Vector u = rng.normal_matrix(5, 1) * 3.0;
        worst = std::max(worst, std::abs(flow_log_prob(cond, v, &u) - flow_log_prob(marginal, v)));
    }
    EXPECT_LT(worst, 1e-6);
    EXPECT_EQ(worst, 0.0);
}

TEST(Flow, CloneCopiesBackboneAndAttachesZeroB) {
    RngStream rng(9);
    auto marginal = build_flow(4, small_config(), rng);
    randomize(marginal, rng);
    const auto cond = marginal.clone_to_conditional(6, 3, rng);
    const auto mp = marginal.parameters();
    const auto cp = cond.parameters();
    ASSERT_EQ(cp.size(), mp.size() + 1 + marginal.blocks().size());
    for (std::size_t i = 0; i < mp.size(); ++i) EXPECT_EQ(mp[i]->value, cp[i]->value);
    for (std::size_t l = 0; l < marginal.blocks().size(); ++l)
        EXPECT_EQ(cond.blocks()[l].permutation.perm, marginal.blocks()[l].permutation.perm);
    for (const auto& B : cond.conditioner()->B) EXPECT_TRUE(B.value.isZero(0.0));
    EXPECT_FALSE(cond.conditioner()->A.value.isZero(0.0));
    EXPECT_EQ(cond.conditioner()->rank, 3);
}

TEST(Flow, RankBeyondFeatureWidthIsConfigError) {
    RngStream rng(10);
    const auto m = build_flow(2, small_config(16), rng);
    EXPECT_THROW(m.clone_to_conditional(100, 17, rng), ConfigError);
    EXPECT_EQ(m.clone_to_conditional(3, 16, rng).conditioner()->rank, 3);  // capped at source dim
}

TEST(Flow, IdentityInverseUnstandardizes) {
    RngStream rng(11);
    auto m = build_flow(3, small_config(), rng);
    m.standardizer().mean << 1.0, 2.0, 3.0;
    m.standardizer().scale << 2.0, 0.5, 1.0;
    const Vector z = rng.normal_matrix(3, 1);
    const Vector v = flow_inverse(m, z);
    // The fixed permutations still act, so compare after undoing them.
    Matrix x = z;
    for (auto it = m.blocks().rbegin(); it != m.blocks().rend(); ++it) x = it->permutation.inverse(x);
    EXPECT_LT((v - m.standardizer().invert(x).col(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Flow, InverseRoundTripOnRandomFlow) {
    RngStream rng(12);
    auto m = build_flow(8, small_config(), rng);
    randomize(m, rng, 0.3);
    const Matrix z = rng.normal_matrix(8, 100);
    const Matrix v = m.inverse(z);
    EXPECT_LT((m.to_latent(v) - z).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Flow, ConditionalNeedsSource) {
    RngStream rng(13);
    const auto cond = build_flow(2, small_config(), rng).clone_to_conditional(2, 2, rng);
    EXPECT_THROW(cond.log_prob(Matrix(Matrix::Zero(2, 1))), ContractViolation);
}

TEST(Flow, NonFiniteInputReportsLayer) {
    RngStream rng(14);
    auto m = build_flow(2, small_config(), rng);
    randomize(m, rng);
    Matrix v = Matrix::Zero(2, 1);
    v(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        m.log_prob(v);
        FAIL() << "expected DensityError";
    } catch (const DensityError& e) {
        EXPECT_GE(e.layer(), 0);
    }
}

TEST(Flow, RandomFlowDensityIntegratesToOne) {
    RngStream rng(15);
    auto m = build_flow(2, small_config(), rng);
    randomize(m, rng, 0.3);
    m.standardizer().scale << 0.8, 0.9;
    const int n = 241;
    const double lo = -6.0, hi = 6.0, step = (hi - lo) / (n - 1);
    Matrix grid(2, n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) grid.col(i * n + j) << lo + i * step, lo + j * step;
    const Vector p = m.log_prob(grid).array().exp();
    double total = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
            const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
            total += wi * wj * p(i * n + j);
        }
    EXPECT_NEAR(total * step * step, 1.0, 0.02);
}
