#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/sufficiency/is_matrix.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace flowsuff {

/// Supervised reference scores for the pool; higher = better.
struct GroundTruth {
    std::vector<std::string> ids;
    std::vector<double> scores;
    std::string task;  // classification, sts, retrieval or clustering

    double score_of(const std::string& id) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return scores[i];
        throw DataError("ground truth: no score for model '" + id + "'");
    }

    void validate() const {
        if (ids.size() != scores.size()) throw DataError("ground truth: ids/scores length mismatch");
        std::set<std::string> seen;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!seen.insert(ids[i]).second) throw DataError("ground truth: duplicate id '" + ids[i] + "'");
            if (!std::isfinite(scores[i])) throw DataError("ground truth: non-finite score for '" + ids[i] + "'");
        }
        static const std::set<std::string> tasks{"", "classification", "sts", "retrieval", "clustering"};
        if (!tasks.count(task)) throw DataError("ground truth: unknown task '" + task + "'");
    }
};

struct CorrelationReport {
    double spearman = std::numeric_limits<double>::quiet_NaN();
    double pearson = std::numeric_limits<double>::quiet_NaN();
    int n = 0;
    bool defined() const { return std::isfinite(spearman); }

    nlohmann::ordered_json to_json() const {
        return {{"spearman", detail::number_or_null(spearman)}, {"pearson", detail::number_or_null(pearson)}, {"n", n}};
    }
};

/// 1-based ranks in ascending order; ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
        i = j + 1;
    }
    return r;
}

/// Pearson correlation; NaN when either vector has zero variance.
inline double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    FLOWSUFF_EXPECT(x.size() == y.size() && !x.empty(), "pearson: vectors must have equal, non-zero length");
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson_correlation(average_ranks(x), average_ranks(y));
}

inline CorrelationReport rank_correlations(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 3)
        throw DataError("rank_correlations: need two vectors of equal length >= 3");
    CorrelationReport r;
    r.n = static_cast<int>(x.size());
    r.spearman = spearman_correlation(x, y);
    r.pearson = pearson_correlation(x, y);
    return r;
}

/// Correlate model scores against the ground truth, matching by id.
inline CorrelationReport correlate_scores(const std::vector<ModelScore>& scores, const GroundTruth& gt) {
    std::vector<double> pred, ref;
    for (const auto& s : scores) {
        if (!s.scored) continue;
        pred.push_back(s.score);
        ref.push_back(gt.score_of(s.model_id));
    }
    if (pred.size() < 3) return CorrelationReport{};
    return rank_correlations(pred, ref);
}

/// Names of the k best models: descending score, ties by name.
inline std::vector<std::string> top_k(const std::vector<std::string>& ids, const std::vector<double>& scores,
                                      std::size_t k) {
    FLOWSUFF_EXPECT(ids.size() == scores.size(), "top_k: ids/scores length mismatch");
    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return ids[a] < ids[b];
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i) out.push_back(ids[order[i]]);
    return out;
}

/// Size of the intersection of two unordered name sets.
inline int set_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::set<std::string> sa(a.begin(), a.end());
    int n = 0;
    for (const auto& x : std::set<std::string>(b.begin(), b.end())) n += static_cast<int>(sa.count(x));
    return n;
}

inline int top3_overlap(const std::vector<std::string>& ids, const std::vector<double>& gt_scores,
                        const std::vector<double>& predicted_scores) {
    if (ids.size() < 3) throw DataError("top3_overlap: need at least three models");
    return set_overlap(top_k(ids, gt_scores, 3), top_k(ids, predicted_scores, 3));
}

struct BootstrapReplicate {
    std::string dropped;
    double rho = std::numeric_limits<double>::quiet_NaN();
    bool defined = false;
};

struct BootstrapReport {
    double rho_full = std::numeric_limits<double>::quiet_NaN();
    double rho_min = std::numeric_limits<double>::quiet_NaN();
    double rho_max = std::numeric_limits<double>::quiet_NaN();
    std::vector<BootstrapReplicate> replicates;
    int flagged = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["rho_full"] = detail::number_or_null(rho_full);
        j["rho_min"] = detail::number_or_null(rho_min);
        j["rho_max"] = detail::number_or_null(rho_max);
        j["flagged_replicates"] = flagged;
        auto reps = nlohmann::ordered_json::array();
        for (const auto& r : replicates)
            reps.push_back({{"dropped", r.dropped}, {"rho", detail::number_or_null(r.rho)}, {"defined", r.defined}});
        j["replicates"] = std::move(reps);
        return j;
    }
};

/// Sub-matrix restricted to the listed model indices.
inline ISMatrix restrict_matrix(const ISMatrix& m, const std::vector<Index>& keep) {
    std::vector<std::string> ids;
    std::vector<Index> dims;
    for (Index i : keep) {
        ids.push_back(m.ids[static_cast<std::size_t>(i)]);
        dims.push_back(m.dims[static_cast<std::size_t>(i)]);
    }
    ISMatrix out = ISMatrix::empty(ids, dims);
    for (std::size_t a = 0; a < keep.size(); ++a)
        for (std::size_t b = 0; b < keep.size(); ++b) {
            if (a == b) continue;
            const Index sa = keep[a], sb = keep[b];
            const auto& f = m.flags[static_cast<std::size_t>(sa)][static_cast<std::size_t>(sb)];
            if (!f.empty() || !std::isfinite(m.raw(sa, sb)))
                out.flag(static_cast<Index>(a), static_cast<Index>(b), f);
            else
                out.set(static_cast<Index>(a), static_cast<Index>(b), m.raw(sa, sb));
        }
    return out;
}

/// Leave-one-out over the pool: each replicate drops one model, re-scores
/// the remaining K-1 sources over K-2 targets and correlates with gt.
inline BootstrapReport loo_bootstrap(const ISMatrix& m, const GroundTruth& gt, const AggregateMethod& method = {}) {
    if (m.size() < 4) throw DataError("loo_bootstrap: need at least four models");
    BootstrapReport rep;
    rep.rho_full = correlate_scores(aggregate_scores(m, method), gt).spearman;
    for (Index drop = 0; drop < m.size(); ++drop) {
        std::vector<Index> keep;
        for (Index i = 0; i < m.size(); ++i)
            if (i != drop) keep.push_back(i);
        BootstrapReplicate r;
        r.dropped = m.ids[static_cast<std::size_t>(drop)];
        r.rho = correlate_scores(aggregate_scores(restrict_matrix(m, keep), method), gt).spearman;
        r.defined = std::isfinite(r.rho);
        if (r.defined) {
            rep.rho_min = std::isfinite(rep.rho_min) ? std::min(rep.rho_min, r.rho) : r.rho;
            rep.rho_max = std::isfinite(rep.rho_max) ? std::max(rep.rho_max, r.rho) : r.rho;
        } else {
            ++rep.flagged;
        }
        rep.replicates.push_back(r);
    }
    return rep;
}

struct PreferenceTest {
    int agreements = 0;
    int pairs = 0;
    double fraction = 0.0;
    double p_value = 1.0;      // exact one-sided binomial tail P(X >= agreements | 1/2)
    double lower_bound = 0.0;  // one-sided Clopper-Pearson lower confidence bound

    nlohmann::ordered_json to_json() const {
        return {{"agreements", agreements}, {"pairs", pairs}, {"fraction", fraction},
                {"p_value", p_value},       {"lower_bound", lower_bound}};
    }
};

inline PreferenceTest binomial_preference_test(int agreements, int pairs, double confidence = 0.95) {
    FLOWSUFF_EXPECT(pairs >= 1 && agreements >= 0 && agreements <= pairs, "preference test: invalid counts");
    FLOWSUFF_EXPECT(confidence > 0.0 && confidence < 1.0, "preference test: confidence must lie in (0, 1)");
    PreferenceTest t;
    t.agreements = agreements;
    t.pairs = pairs;
    t.fraction = static_cast<double>(agreements) / pairs;
    t.p_value = agreements == 0 ? 1.0 : boost::math::ibeta(agreements, pairs - agreements + 1, 0.5);
    t.lower_bound = agreements == 0 ? 0.0 : boost::math::ibeta_inv(agreements, pairs - agreements + 1, 1.0 - confidence);
    return t;
}

/// Count model pairs ordered the same way by both score vectors. A pair
/// tied in either vector counts as a disagreement.
inline PreferenceTest pairwise_preferences(const std::vector<double>& gt, const std::vector<double>& predicted) {
    FLOWSUFF_EXPECT(gt.size() == predicted.size() && gt.size() >= 2, "pairwise_preferences: length mismatch");
    int agree = 0, total = 0;
    for (std::size_t i = 0; i < gt.size(); ++i)
        for (std::size_t j = i + 1; j < gt.size(); ++j) {
            ++total;
            const double a = gt[i] - gt[j], b = predicted[i] - predicted[j];
            if ((a > 0 && b > 0) || (a < 0 && b < 0)) ++agree;
        }
    return binomial_preference_test(agree, total);
}

}  // namespace flowsuff
