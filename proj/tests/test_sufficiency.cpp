#include "flowsuff/sufficiency/pairwise.hpp"
#include "flowsuff/synth/generators.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

using namespace flowsuff;

namespace {

class MemoryStore : public FlowStore {
public:
    std::optional<TrainedFlow> load(const std::string& key) override {
        auto it = flows.find(key);
        if (it == flows.end()) return std::nullopt;
        return it->second;
    }
    void save(const std::string& key, const TrainedFlow& flow) override { flows[key] = flow; }
    std::map<std::string, TrainedFlow> flows;
};

PoolConfig quick_pool(std::uint64_t seed, int epochs = 4) {
    PoolConfig c;
    c.marginal = TrainConfig::desk(Stage::marginal);
    c.conditional = TrainConfig::desk(Stage::conditional);
    for (auto* t : {&c.marginal, &c.conditional}) {
        t->flow.hidden_width = 16;
        t->flow.blocks = 2;
        t->max_epochs = epochs;
    }
    c.seed = seed;
    return c;
}

SyntheticPool small_pool(std::size_t k, Index rows, std::uint64_t seed) {
    SyntheticPoolSpec s;
    s.latent_dim = 2;
    for (std::size_t i = 0; i < k; ++i) {
        s.output_dims.push_back(i % 2 ? 3 : 2);
        s.noise_levels.push_back(0.1 * std::pow(3.0, static_cast<double>(i)));
    }
    s.rows = rows;
    s.seed = seed;
    return gen_synthetic_pool(s);
}

ModelScore scored(const std::string& id, double value) {
    ModelScore s;
    s.model_id = id;
    s.method = "median";
    s.score = value;
    s.scored = true;
    return s;
}

ISMatrix matrix_from_rows(const std::vector<std::vector<double>>& rows) {
    const auto k = rows.size();
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < k; ++i) ids.push_back("m" + std::to_string(i));
    ISMatrix m = ISMatrix::empty(ids, std::vector<Index>(k, 1));
    for (std::size_t a = 0; a < k; ++a) {
        std::size_t c = 0;
        for (std::size_t b = 0; b < k; ++b)
            if (a != b) m.set(static_cast<Index>(a), static_cast<Index>(b), rows[a][c++]);
    }
    return m;
}

}  // namespace

TEST(Aggregate, MedianMeanOutlierContrast) {
    EXPECT_DOUBLE_EQ(aggregate_values({1, 2, 100}, AggregateMethod::median()), 2.0);
    EXPECT_NEAR(aggregate_values({1, 2, 100}, AggregateMethod::mean()), 103.0 / 3.0, 1e-12);
    EXPECT_DOUBLE_EQ(aggregate_values({4, 1, 3, 2}, AggregateMethod::median()), 2.5);
    for (const auto& m : {AggregateMethod::median(), AggregateMethod::mean(), AggregateMethod::trimmed(0.2)})
        EXPECT_DOUBLE_EQ(aggregate_values({0.7, 0.7, 0.7, 0.7, 0.7}, m), 0.7);
}

TEST(Aggregate, TrimmedDropsFloorFromEachEnd) {
    // floor(0.1 * 9) = 0 entries dropped, floor(0.2 * 9) = 1
    const std::vector<double> row{1, 2, 3, 4, 5, 6, 7, 8, 100};
    EXPECT_NEAR(aggregate_values(row, AggregateMethod::trimmed(0.1)), 136.0 / 9.0, 1e-12);
    EXPECT_NEAR(aggregate_values(row, AggregateMethod::trimmed(0.2)), 35.0 / 7.0, 1e-12);
    const std::vector<double> ten{1, 2, 3, 4, 5, 6, 7, 8, 9, 1000};
    EXPECT_NEAR(aggregate_values(ten, AggregateMethod::trimmed(0.1)), 44.0 / 8.0, 1e-12);
}

TEST(Aggregate, ParseAndValidate) {
    EXPECT_EQ(AggregateMethod::parse("median").kind, AggregateKind::median);
    EXPECT_EQ(AggregateMethod::parse("mean").kind, AggregateKind::mean);
    const auto t = AggregateMethod::parse("trimmed");
    EXPECT_EQ(t.kind, AggregateKind::trimmed);
    EXPECT_DOUBLE_EQ(t.trim, 0.10);
    EXPECT_DOUBLE_EQ(AggregateMethod::parse("trimmed:0.2").trim, 0.2);
    EXPECT_THROW(AggregateMethod::parse("trimmed:0.5"), ConfigError);
    EXPECT_THROW(AggregateMethod::parse("trimmed:0"), ConfigError);
    EXPECT_THROW(AggregateMethod::parse("mode"), ConfigError);
}

TEST(Aggregate, MedianResistsSingleSidedCorruption) {
    const std::vector<double> row{0.3, 0.1, 0.4, 0.2, 0.5};
    const double med = aggregate_values(row, AggregateMethod::median());
    const double mean = aggregate_values(row, AggregateMethod::mean());
    for (std::size_t i = 0; i < row.size(); ++i) {
        for (double corrupt : {1e6, -1e6}) {
            const bool above = row[i] > med, below = row[i] < med;
            if (!((above && corrupt > med) || (below && corrupt < med))) continue;
            auto c = row;
            c[i] = corrupt;
            EXPECT_DOUBLE_EQ(aggregate_values(c, AggregateMethod::median()), med);
            EXPECT_NE(aggregate_values(c, AggregateMethod::mean()), mean);
        }
    }
}

TEST(Ranking, DescendingWithIdTieBreak) {
    auto r = rank_models({scored("a", 0.20), scored("b", 0.13)});
    EXPECT_EQ(r[0].model_id, "a");
    EXPECT_EQ(r[0].rank, 1);
    EXPECT_EQ(r[1].rank, 2);

    const std::vector<std::string> ids{"Zeta", "Linq", "SFR", "GritLM", "GTE", "Stella", "Jina", "MiniLM"};
    const std::vector<double> s{0.20, 0.20, 0.19, 0.19, 0.18, 0.17, 0.13, 0.13};
    std::vector<ModelScore> in;
    for (std::size_t i = 0; i < ids.size(); ++i) in.push_back(scored(ids[i], s[i]));
    const auto ranked = rank_models(in);
    EXPECT_TRUE(ranked[0].tied);
    EXPECT_TRUE(ranked[1].tied);
    EXPECT_EQ(std::set<std::string>({ranked[0].model_id, ranked[1].model_id}), std::set<std::string>({"Zeta", "Linq"}));

    auto shuffled = in;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
    std::map<std::string, int> before, after;
    for (const auto& x : ranked) before[x.model_id] = x.rank;
    for (const auto& x : rank_models(shuffled)) after[x.model_id] = x.rank;
    EXPECT_EQ(before, after);
    EXPECT_EQ(before["Linq"], 1);
    EXPECT_EQ(before["Zeta"], 2);
}

TEST(ISMatrixTest, NormalizationFlagsAndUnscored) {
    ISMatrix m = ISMatrix::empty({"a", "b", "c"}, {2, 4, 8});
    m.set(0, 1, 2.0);
    m.set(0, 2, 4.0);
    m.set(1, 0, 1.0);
    m.flag(1, 2, "diverged");
    m.flag(2, 0, "diverged");
    m.flag(2, 1, "diverged");
    EXPECT_DOUBLE_EQ(m.normalized(0, 1), 0.5);
    EXPECT_DOUBLE_EQ(m.normalized(0, 2), 0.5);
    EXPECT_TRUE(std::isnan(m.raw(0, 0)));
    EXPECT_EQ(m.flagged_count(), 3);
    const auto scores = aggregate_scores(m, AggregateMethod::median());
    ASSERT_EQ(scores.size(), 3u);
    EXPECT_EQ(scores[0].model_id, "a");
    EXPECT_DOUBLE_EQ(scores[0].score, 0.5);
    EXPECT_EQ(scores[1].model_id, "b");
    EXPECT_EQ(scores[1].omitted, 1);
    EXPECT_FALSE(scores[2].scored);
    EXPECT_EQ(scores[2].model_id, "c");

    const auto csv = m.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "source,target,target_dim,raw_is,normalized_is,flag");
    EXPECT_NE(csv.find("b,c,8,,,diverged"), std::string::npos);
    const auto j = m.to_json();
    EXPECT_TRUE(j["raw"][0][0].is_null());
    EXPECT_EQ(j["flags"].size(), 3u);
    const auto sc = scores_csv(scores);
    EXPECT_EQ(sc.substr(0, sc.find('\n')), "model_id,score,rank,method");
}

TEST(ISMatrixTest, RowMatrixAggregation) {
    const auto m = matrix_from_rows({{1, 2, 100}, {3, 3, 3}, {0, 1, 2}, {5, 6, 7}});
    const auto med = aggregate_scores(m, AggregateMethod::median());
    const auto mean = aggregate_scores(m, AggregateMethod::mean());
    auto by_id = [](const std::vector<ModelScore>& v, const std::string& id) {
        for (const auto& s : v)
            if (s.model_id == id) return s.score;
        return std::nan("");
    };
    EXPECT_DOUBLE_EQ(by_id(med, "m0"), 2.0);
    EXPECT_NEAR(by_id(mean, "m0"), 103.0 / 3.0, 1e-12);
    EXPECT_DOUBLE_EQ(by_id(med, "m3"), 6.0);
}

TEST(InformationSufficiency, ZeroForFreshCloneAndAlignmentChecked) {
    RngStream rng(5);
    const auto g = gen_correlated_gaussians(400, 2, 2, 0.8, rng);
    FlowConfig fc;
    fc.hidden_width = 16;
    FlowModel marg = build_flow(2, fc, rng);
    marg.standardizer() = Standardizer::fit(g.V.values);
    marg.initialize_actnorm(g.V.values);
    const FlowModel cond = clone_to_conditional(marg, 2, 8, rng, &g.U.values);
    const auto e = information_sufficiency(marg, cond, g.U.values, g.V.values);
    EXPECT_EQ(e.is, 0.0);
    EXPECT_EQ(e.h_v, e.h_v_given_u);
    EXPECT_THROW(information_sufficiency(marg, cond, g.U.values.leftCols(10), g.V.values), AlignmentError);
}

TEST(Pairwise, PoolValidation) {
    auto p = small_pool(2, 50, 1).models;
    EXPECT_THROW(validate_pool({p[0]}), DataError);
    auto dup = p;
    dup[1].model_id = dup[0].model_id;
    EXPECT_THROW(validate_pool(dup), DataError);
    auto hash = p;
    hash[1].corpus_hash = "other";
    EXPECT_THROW(validate_pool(hash), AlignmentError);
    auto rows = p;
    rows[1].values = rows[1].values.leftCols(40).eval();
    EXPECT_THROW(validate_pool(rows), AlignmentError);
}

TEST(Pairwise, JobCountsCachingAndIncrementalModel) {
    const auto pool4 = small_pool(4, 300, 2).models;
    const std::vector<EmbeddingSet> pool3(pool4.begin(), pool4.begin() + 3);
    MemoryStore store;
    const auto cfg = quick_pool(7, 2);
    const auto first = pairwise_is_matrix(pool3, cfg, &store);
    EXPECT_EQ(first.trained_marginals, 3);
    EXPECT_EQ(first.trained_conditionals, 6);
    EXPECT_EQ(first.pairs.size(), 6u);
    EXPECT_EQ(first.matrix.flagged_count(), 0);

    const auto again = pairwise_is_matrix(pool3, cfg, &store);
    EXPECT_EQ(again.trained_marginals, 0);
    EXPECT_EQ(again.trained_conditionals, 0);
    for (Index a = 0; a < 3; ++a)
        for (Index b = 0; b < 3; ++b)
            if (a != b) {
                EXPECT_EQ(again.matrix.raw(a, b), first.matrix.raw(a, b));
            }

    const auto grown = pairwise_is_matrix(pool4, cfg, &store);
    EXPECT_EQ(grown.trained_marginals, 1);
    EXPECT_EQ(grown.trained_conditionals, 3 + 3);
}

TEST(Pairwise, ParallelMatchesSerial) {
    const auto pool = small_pool(3, 300, 3).models;
    auto cfg = quick_pool(11, 2);
    const auto serial = pairwise_is_matrix(pool, cfg);
    cfg.jobs = 3;
    const auto parallel = pairwise_is_matrix(pool, cfg);
    for (Index a = 0; a < 3; ++a)
        for (Index b = 0; b < 3; ++b)
            if (a != b) {
                EXPECT_EQ(serial.matrix.raw(a, b), parallel.matrix.raw(a, b));
            }
}

TEST(Pairwise, BrokenMarginalFlagsItsColumn) {
    const auto pool = small_pool(3, 200, 4).models;
    MemoryStore store;
    const auto cfg = quick_pool(5, 1);
    const auto clean = pairwise_is_matrix(pool, cfg, &store);
    const std::string key = clean.marginals[1].key;
    for (auto* p : store.flows[key].model.parameters()) p->value.setConstant(std::nan(""));
    const auto r = pairwise_is_matrix(pool, cfg, &store);
    EXPECT_FALSE(r.marginals[1].ok());
    EXPECT_FALSE(r.matrix.usable(0, 1));
    EXPECT_FALSE(r.matrix.usable(2, 1));
    EXPECT_TRUE(r.matrix.usable(0, 2));
    EXPECT_EQ(r.matrix.flagged_count(), 2);
}

TEST(Pairwise, NoiseModelHasLowestScore) {
    auto pool = small_pool(3, 1500, 8).models;
    RngStream rng(99);
    pool[2].values = rng.normal_matrix(pool[2].dim(), pool[2].rows());
    const auto r = pairwise_is_matrix(pool, quick_pool(3, 12));
    const auto scores = aggregate_scores(r.matrix);
    EXPECT_EQ(scores[2].rank, 3);
}
