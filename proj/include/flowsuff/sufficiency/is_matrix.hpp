#pragma once

#include "flowsuff/flow/flow_model.hpp"
#include "flowsuff/numcore/common.hpp"
#include "flowsuff/training/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace flowsuff {

/// Entropies in nats, both measured on the same validation rows.
struct EntropyEstimates {
    double h_v = 0.0;          // mean -log p(v)
    double h_v_given_u = 0.0;  // mean -log p(v | u)
    double is = 0.0;           // h_v - h_v_given_u, unclamped
};

inline EntropyEstimates information_sufficiency(const FlowModel& marginal, const FlowModel& conditional,
                                                const Matrix& u_val, const Matrix& v_val) {
    if (u_val.cols() != v_val.cols())
        throw AlignmentError("information_sufficiency: " + std::to_string(u_val.cols()) + " source rows vs " +
                             std::to_string(v_val.cols()) + " target rows");
    FLOWSUFF_EXPECT(v_val.cols() > 0, "information_sufficiency: empty validation set");
    EntropyEstimates e;
    e.h_v = mean_nll(marginal, v_val);
    e.h_v_given_u = mean_nll(conditional, v_val, &u_val);
    e.is = e.h_v - e.h_v_given_u;
    if (!std::isfinite(e.is)) throw DensityError("information_sufficiency: non-finite entropy estimate", -1);
    return e;
}

namespace detail {

inline nlohmann::ordered_json number_or_null(double x) {
    return std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(nullptr);
}

inline std::string csv_number(double x) {
    if (!std::isfinite(x)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace detail

/// Directional IS between every ordered pair of pool models. Row a is the
/// source, column b the target; the diagonal is undefined (NaN).
struct ISMatrix {
    std::vector<std::string> ids;
    std::vector<Index> dims;
    Matrix raw;
    Matrix normalized;                            // raw(a, b) / dims[b], nats per dimension
    std::vector<std::vector<std::string>> flags;  // empty string = usable entry

    Index size() const noexcept { return static_cast<Index>(ids.size()); }

    bool usable(Index a, Index b) const {
        return a != b && flags[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)].empty() &&
               std::isfinite(normalized(a, b));
    }

    static ISMatrix empty(std::vector<std::string> ids, std::vector<Index> dims) {
        FLOWSUFF_EXPECT(ids.size() == dims.size(), "ISMatrix: ids/dims length mismatch");
        ISMatrix m;
        const auto k = static_cast<Index>(ids.size());
        m.ids = std::move(ids);
        m.dims = std::move(dims);
        m.raw = Matrix::Constant(k, k, std::numeric_limits<double>::quiet_NaN());
        m.normalized = m.raw;
        m.flags.assign(static_cast<std::size_t>(k), std::vector<std::string>(static_cast<std::size_t>(k)));
        return m;
    }

    void set(Index a, Index b, double value) {
        FLOWSUFF_EXPECT(a != b, "ISMatrix: diagonal entries are undefined");
        raw(a, b) = value;
        normalized(a, b) = value / static_cast<double>(dims[static_cast<std::size_t>(b)]);
    }

    void flag(Index a, Index b, std::string reason) {
        raw(a, b) = normalized(a, b) = std::numeric_limits<double>::quiet_NaN();
        flags[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = reason.empty() ? "flagged" : std::move(reason);
    }

    int flagged_count() const {
        int n = 0;
        for (Index a = 0; a < size(); ++a)
            for (Index b = 0; b < size(); ++b)
                if (a != b && !usable(a, b)) ++n;
        return n;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["ids"] = ids;
        j["dims"] = dims;
        auto grid = [&](const Matrix& m) {
            auto rows = nlohmann::ordered_json::array();
            for (Index a = 0; a < size(); ++a) {
                auto row = nlohmann::ordered_json::array();
                for (Index b = 0; b < size(); ++b) row.push_back(detail::number_or_null(m(a, b)));
                rows.push_back(std::move(row));
            }
            return rows;
        };
        j["raw"] = grid(raw);
        j["normalized"] = grid(normalized);
        auto fl = nlohmann::ordered_json::array();
        for (Index a = 0; a < size(); ++a)
            for (Index b = 0; b < size(); ++b)
                if (a != b && !flags[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)].empty())
                    fl.push_back({{"source", ids[static_cast<std::size_t>(a)]},
                                  {"target", ids[static_cast<std::size_t>(b)]},
                                  {"reason", flags[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]}});
        j["flags"] = std::move(fl);
        return j;
    }

    /// Long format: one line per ordered off-diagonal pair.
    std::string to_csv() const {
        std::ostringstream out;
        out << "source,target,target_dim,raw_is,normalized_is,flag\n";
        for (Index a = 0; a < size(); ++a)
            for (Index b = 0; b < size(); ++b) {
                if (a == b) continue;
                out << ids[static_cast<std::size_t>(a)] << ',' << ids[static_cast<std::size_t>(b)] << ','
                    << dims[static_cast<std::size_t>(b)] << ',' << detail::csv_number(raw(a, b)) << ','
                    << detail::csv_number(normalized(a, b)) << ','
                    << flags[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] << '\n';
            }
        return out.str();
    }
};

enum class AggregateKind { median, mean, trimmed };

struct AggregateMethod {
    AggregateKind kind = AggregateKind::median;
    double trim = 0.10;  // fraction dropped from each end (trimmed only)

    static AggregateMethod median() { return {AggregateKind::median, 0.10}; }
    static AggregateMethod mean() { return {AggregateKind::mean, 0.10}; }
    static AggregateMethod trimmed(double f = 0.10) { return {AggregateKind::trimmed, f}; }

    /// "median", "mean", "trimmed" or "trimmed:<f>".
    static AggregateMethod parse(const std::string& s) {
        if (s == "median") return median();
        if (s == "mean") return mean();
        if (s.rfind("trimmed", 0) == 0) {
            double f = 0.10;
            if (s.size() > 7) {
                if (s[7] != ':') throw ConfigError("aggregation: expected trimmed:<fraction>, got '" + s + "'");
                try {
                    std::size_t used = 0;
                    f = std::stod(s.substr(8), &used);
                    if (used != s.size() - 8) throw std::invalid_argument(s);
                } catch (const std::exception&) {
                    throw ConfigError("aggregation: bad trim fraction in '" + s + "'");
                }
            }
            auto m = trimmed(f);
            m.validate();
            return m;
        }
        throw ConfigError("aggregation: unknown method '" + s + "' (median, mean, trimmed[:f])");
    }

    void validate() const {
        if (kind == AggregateKind::trimmed && !(trim > 0.0 && trim < 0.5))
            throw ConfigError("aggregation: trim fraction must lie in (0, 0.5)");
    }

    std::string name() const {
        switch (kind) {
            case AggregateKind::median: return "median";
            case AggregateKind::mean: return "mean";
            case AggregateKind::trimmed: {
                std::ostringstream s;
                s << "trimmed:" << trim;
                return s.str();
            }
        }
        return "median";
    }
};

/// Aggregate a list of finite values. Median of an even count is the midpoint.
inline double aggregate_values(std::vector<double> v, const AggregateMethod& method) {
    FLOWSUFF_EXPECT(!v.empty(), "aggregate_values: no values");
    method.validate();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    switch (method.kind) {
        case AggregateKind::median: return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
        case AggregateKind::mean: {
            double s = 0.0;
            for (double x : v) s += x;
            return s / static_cast<double>(n);
        }
        case AggregateKind::trimmed: {
            const auto cut = static_cast<std::size_t>(std::floor(method.trim * static_cast<double>(n)));
            double s = 0.0;
            for (std::size_t i = cut; i < n - cut; ++i) s += v[i];
            return s / static_cast<double>(n - 2 * cut);
        }
    }
    return std::numeric_limits<double>::quiet_NaN();
}

struct ModelScore {
    std::string model_id;
    std::string method;
    double score = std::numeric_limits<double>::quiet_NaN();
    int rank = 0;  // 1 = best
    bool scored = false;
    bool tied = false;  // equal score with another model; order fixed by id
    int omitted = 0;    // flagged row entries skipped
};

/// Assign ranks: descending score, ties by model id; unscored models last.
inline std::vector<ModelScore> rank_models(std::vector<ModelScore> scores) {
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        const auto& a = scores[x];
        const auto& b = scores[y];
        if (a.scored != b.scored) return a.scored;
        if (a.scored && a.score != b.score) return a.score > b.score;
        return a.model_id < b.model_id;
    });
    for (std::size_t r = 0; r < order.size(); ++r) scores[order[r]].rank = static_cast<int>(r + 1);
    for (auto& s : scores) {
        s.tied = false;
        if (!s.scored) continue;
        for (const auto& o : scores)
            if (&o != &s && o.scored && o.score == s.score) s.tied = true;
    }
    return scores;
}

/// Per-source score from the usable normalized entries of its row.
inline std::vector<ModelScore> aggregate_scores(const ISMatrix& m, const AggregateMethod& method = {}) {
    method.validate();
    std::vector<ModelScore> out;
    for (Index a = 0; a < m.size(); ++a) {
        ModelScore s;
        s.model_id = m.ids[static_cast<std::size_t>(a)];
        s.method = method.name();
        std::vector<double> row;
        for (Index b = 0; b < m.size(); ++b) {
            if (a == b) continue;
            if (m.usable(a, b))
                row.push_back(m.normalized(a, b));
            else
                ++s.omitted;
        }
        if (!row.empty()) {
            s.score = aggregate_values(std::move(row), method);
            s.scored = true;
        }
        out.push_back(std::move(s));
    }
    return rank_models(std::move(out));
}

inline std::string scores_csv(const std::vector<ModelScore>& scores) {
    std::vector<const ModelScore*> sorted;
    for (const auto& s : scores) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->rank < b->rank; });
    std::ostringstream out;
    out << "model_id,score,rank,method\n";
    for (const auto* s : sorted)
        out << s->model_id << ',' << detail::csv_number(s->score) << ',' << s->rank << ',' << s->method << '\n';
    return out.str();
}

inline nlohmann::ordered_json scores_json(const std::vector<ModelScore>& scores) {
    auto arr = nlohmann::ordered_json::array();
    std::vector<const ModelScore*> sorted;
    for (const auto& s : scores) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->rank < b->rank; });
    for (const auto* s : sorted)
        arr.push_back({{"model_id", s->model_id},
                       {"score", detail::number_or_null(s->score)},
                       {"rank", s->rank},
                       {"method", s->method},
                       {"tied", s->tied},
                       {"omitted_entries", s->omitted}});
    return arr;
}

}  // namespace flowsuff
