#pragma once

#include "flowsuff/analysis/correlation.hpp"
#include "flowsuff/numcore/rng.hpp"
#include "flowsuff/sufficiency/pairwise.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace flowsuff {

struct CurvePoint {
    double control = 0.0;
    double statistic = 0.0;
    int repeat = 0;
    std::uint64_t seed = 0;
};

/// Statistic as a function of a control variable (shuffle ratio p or
/// subsample fraction alpha), one point per repeat.
struct AblationCurve {
    std::string name;
    std::string control_name;
    std::string statistic_name;
    std::vector<CurvePoint> points;
    std::vector<std::string> warnings;

    std::vector<double> controls() const {
        std::vector<double> c;
        for (const auto& p : points)
            if (c.empty() || c.back() != p.control) c.push_back(p.control);
        return c;
    }

    /// Mean statistic over repeats (finite values only) at one control value.
    double mean_at(double control) const {
        double s = 0.0;
        int n = 0;
        for (const auto& p : points)
            if (p.control == control && std::isfinite(p.statistic)) {
                s += p.statistic;
                ++n;
            }
        return n ? s / n : std::numeric_limits<double>::quiet_NaN();
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "control,statistic,repeat,seed\n";
        for (const auto& p : points)
            out << detail::csv_number(p.control) << ',' << detail::csv_number(p.statistic) << ',' << p.repeat << ','
                << p.seed << '\n';
        return out.str();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["name"] = name;
        j["control"] = control_name;
        j["statistic"] = statistic_name;
        auto summary = nlohmann::ordered_json::array();
        for (double c : controls()) summary.push_back({{"control", c}, {"mean", detail::number_or_null(mean_at(c))}});
        j["summary"] = std::move(summary);
        j["warnings"] = warnings;
        return j;
    }
};

/// Per-row validation NLLs of every trained flow in a pool; enough to
/// recompute IS on any subset of validation rows without retraining.
struct ValidationNlls {
    std::vector<std::string> ids;
    std::vector<Index> dims;
    std::vector<Vector> marginal;                 // per target
    std::vector<std::vector<Vector>> conditional;  // [source][target]; empty when unavailable

    static ValidationNlls from(const PoolResult& r) {
        ValidationNlls v;
        v.ids = r.matrix.ids;
        v.dims = r.matrix.dims;
        const auto k = r.matrix.ids.size();
        v.marginal.resize(k);
        v.conditional.assign(k, std::vector<Vector>(k));
        for (std::size_t b = 0; b < k; ++b)
            if (r.marginals[b].ok()) v.marginal[b] = r.marginals[b].val_nll;
        for (const auto& p : r.pairs)
            if (p.ok()) v.conditional[static_cast<std::size_t>(p.source)][static_cast<std::size_t>(p.target)] = p.val_nll;
        return v;
    }

    Index rows() const {
        for (const auto& m : marginal)
            if (m.size() > 0) return m.size();
        return 0;
    }
};

namespace detail {

inline double subset_mean(const Vector& v, const std::vector<int>& rows) {
    double s = 0.0;
    for (int r : rows) s += v(r);
    return s / static_cast<double>(rows.size());
}

}  // namespace detail

/// IS matrix on a subset of validation rows (sorted indices).
inline ISMatrix subset_is_matrix(const ValidationNlls& nll, const std::vector<int>& rows) {
    ISMatrix m = ISMatrix::empty(nll.ids, nll.dims);
    const auto k = static_cast<Index>(nll.ids.size());
    for (Index a = 0; a < k; ++a)
        for (Index b = 0; b < k; ++b) {
            if (a == b) continue;
            const auto& cond = nll.conditional[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
            const auto& marg = nll.marginal[static_cast<std::size_t>(b)];
            if (cond.size() == 0 || marg.size() == 0) {
                m.flag(a, b, "unavailable");
                continue;
            }
            m.set(a, b, detail::subset_mean(marg, rows) - detail::subset_mean(cond, rows));
        }
    return m;
}

inline std::vector<int> all_rows(Index n) {
    std::vector<int> r(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = static_cast<int>(i);
    return r;
}

/// Delta_rho(alpha) = |rho(alpha) - rho(1)| per repeat, using the same
/// trained flows on random row subsets.
inline AblationCurve subsample_stability(const ValidationNlls& nll, const std::vector<double>& alphas, int repeats,
                                         const GroundTruth& gt, std::uint64_t seed,
                                         const AggregateMethod& method = {}) {
    FLOWSUFF_EXPECT(repeats >= 1, "subsample_stability: repeats must be >= 1");
    const Index m = nll.rows();
    AblationCurve curve;
    curve.name = "subsample";
    curve.control_name = "alpha";
    curve.statistic_name = "delta_rho";
    const double rho_full = correlate_scores(aggregate_scores(subset_is_matrix(nll, all_rows(m)), method), gt).spearman;
    const RngStream root(seed);
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
        const double alpha = alphas[ai];
        FLOWSUFF_EXPECT(alpha > 0.0 && alpha <= 1.0, "subsample_stability: alpha must lie in (0, 1]");
        const auto count = static_cast<Index>(std::floor(alpha * static_cast<double>(m)));
        if (count < 10) {
            curve.warnings.push_back("alpha " + std::to_string(alpha) + " skipped: " + std::to_string(count) +
                                     " rows < 10");
            continue;
        }
        for (int rep = 0; rep < repeats; ++rep) {
            RngStream rng = root.split(ai, static_cast<std::uint64_t>(rep));
            std::vector<int> rows;
            if (count == m) {
                rows = all_rows(m);
            } else {
                auto perm = rng.permutation(static_cast<std::size_t>(m));
                rows.assign(perm.begin(), perm.begin() + count);
                std::sort(rows.begin(), rows.end());
            }
            const double rho = correlate_scores(aggregate_scores(subset_is_matrix(nll, rows), method), gt).spearman;
            curve.points.push_back({alpha, std::abs(rho - rho_full), rep, rng.seed()});
        }
    }
    return curve;
}

/// Rows of the validation split whose target side is permuted: the first
/// floor(p m) entries of a fixed random order (nested across p), permuted
/// uniformly among themselves. Returns the row map (identity outside).
inline std::vector<int> shuffle_map(Index m, double p, const RngStream& rng) {
    FLOWSUFF_EXPECT(p >= 0.0 && p <= 1.0, "shuffle: ratio must lie in [0, 1]");
    RngStream order_rng = rng.split(0);
    const auto order = order_rng.permutation(static_cast<std::size_t>(m));
    const auto count = static_cast<std::size_t>(std::floor(p * static_cast<double>(m)));
    std::vector<int> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(chosen.begin(), chosen.end());
    RngStream perm_rng = rng.split(1, static_cast<std::uint64_t>(count));
    const auto perm = perm_rng.permutation(count);
    std::vector<int> map = all_rows(m);
    for (std::size_t i = 0; i < count; ++i) map[static_cast<std::size_t>(chosen[i])] = chosen[perm[i]];
    return map;
}

inline Matrix apply_row_map(const Matrix& v, const std::vector<int>& map) {
    Matrix out(v.rows(), v.cols());
    for (Index i = 0; i < v.cols(); ++i) out.col(i) = v.col(map[static_cast<std::size_t>(i)]);
    return out;
}

/// IS of one trained pair after permuting the target among a p-fraction
/// of validation rows.
inline double shuffled_is(const FlowModel& marginal, const FlowModel& conditional, const Matrix& u_val,
                          const Matrix& v_val, double p, const RngStream& rng) {
    const auto map = shuffle_map(v_val.cols(), p, rng);
    const Matrix v = apply_row_map(v_val, map);
    return mean_nll(marginal, v) - mean_nll(conditional, v, &u_val);
}

struct ShuffleAblation {
    AblationCurve rho;                // spearman vs ground truth per p (when gt supplied)
    std::vector<ISMatrix> matrices;   // per p
    std::vector<double> p_values;
};

/// Pool-wide shuffle ablation with the already trained flows.
inline ShuffleAblation shuffle_ablation(const PoolResult& r, const std::vector<EmbeddingSet>& pool,
                                        const std::vector<double>& p_list, std::uint64_t seed,
                                        const GroundTruth* gt = nullptr, const AggregateMethod& method = {},
                                        int jobs = 1) {
    ShuffleAblation out;
    out.rho.name = "shuffle";
    out.rho.control_name = "p";
    out.rho.statistic_name = "spearman";
    out.p_values = p_list;
    std::vector<Matrix> val(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) val[i] = pool[i].take(r.split.val);
    const RngStream root(seed);
    for (double p : p_list) {
        const auto map = shuffle_map(static_cast<Index>(r.split.val.size()), p, root);
        ISMatrix m = ISMatrix::empty(r.matrix.ids, r.matrix.dims);
        std::vector<double> is(r.pairs.size(), std::numeric_limits<double>::quiet_NaN());
        parallel_for(r.pairs.size(), jobs, [&](std::size_t i) {
            const auto& pr = r.pairs[i];
            const auto& marg = r.marginals[static_cast<std::size_t>(pr.target)];
            if (!pr.ok() || !marg.ok()) return;
            const Matrix v = apply_row_map(val[static_cast<std::size_t>(pr.target)], map);
            is[i] = mean_nll(*marg.model, v) - mean_nll(*pr.model, v, &val[static_cast<std::size_t>(pr.source)]);
        });
        for (std::size_t i = 0; i < r.pairs.size(); ++i) {
            if (std::isfinite(is[i]))
                m.set(r.pairs[i].source, r.pairs[i].target, is[i]);
            else
                m.flag(r.pairs[i].source, r.pairs[i].target, "unavailable");
        }
        if (gt)
            out.rho.points.push_back({p, correlate_scores(aggregate_scores(m, method), *gt).spearman, 0, seed});
        out.matrices.push_back(std::move(m));
    }
    return out;
}

/// Mean validation log p(v | u), per target dimension.
inline double cond_only_score(const FlowModel& conditional, const Matrix& u_val, const Matrix& v_val) {
    if (u_val.cols() != v_val.cols()) throw AlignmentError("cond_only_score: row mismatch");
    return -mean_nll(conditional, v_val, &u_val) / static_cast<double>(v_val.rows());
}

/// Pool-wide conditional-only variant: entry (a, b) is the mean
/// conditional log-likelihood, normalized by dim(b) like the IS matrix.
inline ISMatrix cond_only_matrix(const PoolResult& r) {
    ISMatrix m = ISMatrix::empty(r.matrix.ids, r.matrix.dims);
    for (const auto& p : r.pairs) {
        if (p.ok())
            m.set(p.source, p.target, -p.val_nll.mean());
        else
            m.flag(p.source, p.target, p.error);
    }
    return m;
}

struct PerturbationRow {
    double sigma = 0.0;
    int draws = 0;
    int divergent = 0;
    double median = 0.0;  // relative NLL change |L' - L| / |L|
    double mean = 0.0;
    double stddev = 0.0;
    double max = 0.0;

    nlohmann::ordered_json to_json() const {
        return {{"sigma", sigma},   {"draws", draws}, {"divergent", divergent}, {"median", median},
                {"mean", mean},     {"std", stddev},  {"max", max}};
    }
};

/// Relative validation-NLL change under Gaussian weight noise scaled by
/// sigma times each tensor's mean absolute value.
inline std::vector<PerturbationRow> weight_perturbation_sweep(const FlowModel& model, const std::vector<double>& sigmas,
                                                              int draws, const Matrix& v_val, const Matrix* u_val,
                                                              std::uint64_t seed) {
    FLOWSUFF_EXPECT(draws >= 1, "weight_perturbation_sweep: draws must be >= 1");
    const double clean = mean_nll(model, v_val, u_val);
    const RngStream root(seed);
    std::vector<PerturbationRow> out;
    for (std::size_t si = 0; si < sigmas.size(); ++si) {
        const double sigma = sigmas[si];
        FLOWSUFF_EXPECT(sigma >= 0.0 && sigma <= 0.5, "weight_perturbation_sweep: sigma must lie in [0, 0.5]");
        PerturbationRow row;
        row.sigma = sigma;
        row.draws = draws;
        std::vector<double> changes;
        for (int d = 0; d < draws; ++d) {
            RngStream rng = root.split(si, static_cast<std::uint64_t>(d));
            FlowModel noisy = model;
            for (auto* p : noisy.parameters()) {
                const double scale = sigma * p->value.cwiseAbs().mean();
                if (scale == 0.0) continue;
                p->value += rng.normal_matrix(p->value.rows(), p->value.cols()) * scale;
            }
            double nll = std::numeric_limits<double>::quiet_NaN();
            try {
                nll = mean_nll(noisy, v_val, u_val);
            } catch (const DensityError&) {
            }
            if (!std::isfinite(nll)) {
                ++row.divergent;
                continue;
            }
            changes.push_back(std::abs(nll - clean) / std::max(std::abs(clean), 1e-12));
        }
        if (!changes.empty()) {
            row.median = aggregate_values(changes, AggregateMethod::median());
            row.mean = aggregate_values(changes, AggregateMethod::mean());
            double ss = 0.0;
            for (double c : changes) ss += (c - row.mean) * (c - row.mean);
            row.stddev = changes.size() > 1 ? std::sqrt(ss / static_cast<double>(changes.size() - 1)) : 0.0;
            row.max = *std::max_element(changes.begin(), changes.end());
        } else {
            row.median = row.mean = row.stddev = row.max = std::numeric_limits<double>::quiet_NaN();
        }
        out.push_back(row);
    }
    return out;
}

}  // namespace flowsuff
