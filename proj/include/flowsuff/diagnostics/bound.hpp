#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/sufficiency/is_matrix.hpp"
#include "flowsuff/training/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace flowsuff {

/// Default complexity constant 6 sqrt(pi).
inline const double kDefaultRadConstant = 6.0 * std::sqrt(std::numbers::pi);

struct BoundInputs {
    int depth = 18;               // L, atomic transforms
    double sigma_bar = 0.0;       // mean spectral norm of J_l - I
    double d_eff = 1.0;
    double m = 1.0;               // training split size
    double m_val = 1.0;           // validation split size
    double loss_bound_train = 0.0;
    double loss_bound_val = 0.0;
    double delta = 0.05;
    double c_rad = kDefaultRadConstant;

    void validate() const {
        if (depth < 1) throw ConfigError("bound: depth must be >= 1");
        if (!(sigma_bar >= 0.0) || !std::isfinite(sigma_bar)) throw ConfigError("bound: sigma_bar must be finite and >= 0");
        if (!(d_eff >= 1.0)) throw ConfigError("bound: d_eff must be >= 1");
        if (!(m >= 1.0) || !(m_val >= 1.0)) throw ConfigError("bound: split sizes must be >= 1");
        if (!(loss_bound_train >= 0.0) || !(loss_bound_val >= 0.0)) throw ConfigError("bound: loss bounds must be >= 0");
        if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("bound: delta must lie in (0, 1)");
        if (!(c_rad > 0.0)) throw ConfigError("bound: complexity constant must be positive");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["depth"] = depth;
        j["sigma_bar"] = sigma_bar;
        j["d_eff"] = d_eff;
        j["m"] = m;
        j["m_val"] = m_val;
        j["loss_bound_train"] = loss_bound_train;
        j["loss_bound_val"] = loss_bound_val;
        j["delta"] = delta;
        j["c_rad"] = c_rad;
        return j;
    }
};

struct BoundTerms {
    double rademacher = 0.0;
    double hoeffding_val = 0.0;
    double hoeffding_train = 0.0;
    double total = 0.0;

    BoundTerms& operator+=(const BoundTerms& o) {
        rademacher += o.rademacher;
        hoeffding_val += o.hoeffding_val;
        hoeffding_train += o.hoeffding_train;
        total += o.total;
        return *this;
    }

    nlohmann::ordered_json to_json() const {
        return {{"rademacher", rademacher}, {"hoeffding_val", hoeffding_val},
                {"hoeffding_train", hoeffding_train}, {"total", total}};
    }
};

/// Train-validation gap bound for one flow.
inline BoundTerms generalization_bound(const BoundInputs& b) {
    b.validate();
    BoundTerms t;
    t.rademacher = 2.0 * b.c_rad * b.depth * b.sigma_bar * std::sqrt(b.d_eff) / std::sqrt(b.m);
    const double log_term = std::log(2.0 / b.delta);
    t.hoeffding_val = b.loss_bound_val * std::sqrt(log_term / (2.0 * b.m_val));
    t.hoeffding_train = 3.0 * b.loss_bound_train * std::sqrt(log_term / (2.0 * b.m));
    t.total = t.rademacher + t.hoeffding_val + t.hoeffding_train;
    return t;
}

struct BoundReport {
    std::string label;
    std::string task;
    BoundTerms marginal;
    BoundTerms conditional;
    BoundTerms combined;  // summed over both flows
    double gap_marginal = 0.0;
    double gap_conditional = 0.0;
    double delta_emp = 0.0;
    double delta_theo = 0.0;
    double ratio = 0.0;            // +inf when delta_emp is 0
    double rademacher_share = 0.0; // percent of delta_theo
    double is_error_bound = 0.0;
    bool degenerate = false;       // delta_emp == 0

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["label"] = label;
        j["task"] = task;
        j["marginal"] = marginal.to_json();
        j["conditional"] = conditional.to_json();
        j["gap_marginal"] = gap_marginal;
        j["gap_conditional"] = gap_conditional;
        j["delta_emp"] = delta_emp;
        j["delta_theo"] = delta_theo;
        j["ratio"] = std::isfinite(ratio) ? nlohmann::ordered_json(ratio) : nlohmann::ordered_json("inf");
        j["rademacher_share"] = rademacher_share;
        j["is_error_bound"] = is_error_bound;
        j["degenerate"] = degenerate;
        return j;
    }
};

/// Combine the empirical gaps of a marginal/conditional pair with the bound
/// evaluated for each flow.
inline BoundReport bound_report(const TrainRecord& marginal, const TrainRecord& conditional,
                                const BoundInputs& marginal_inputs, const BoundInputs& conditional_inputs) {
    BoundReport r;
    r.marginal = generalization_bound(marginal_inputs);
    r.conditional = generalization_bound(conditional_inputs);
    r.combined = r.marginal;
    r.combined += r.conditional;
    r.gap_marginal = std::abs(marginal.final_train_nll - marginal.final_val_nll);
    r.gap_conditional = std::abs(conditional.final_train_nll - conditional.final_val_nll);
    r.delta_emp = r.gap_marginal + r.gap_conditional;
    r.delta_theo = r.combined.total;
    r.is_error_bound = r.combined.total;
    r.rademacher_share = r.delta_theo > 0.0 ? 100.0 * r.combined.rademacher / r.delta_theo : 0.0;
    if (r.delta_emp == 0.0) {
        r.degenerate = true;
        r.ratio = std::numeric_limits<double>::infinity();
    } else {
        r.ratio = r.delta_theo / r.delta_emp;
    }
    return r;
}

/// Loss bounds and split sizes filled in from a training record.
inline BoundInputs bound_inputs_from(const TrainRecord& rec, Index m, Index m_val, double sigma_bar, double d_eff,
                                     int depth = 18, double delta = 0.05, double c_rad = kDefaultRadConstant) {
    BoundInputs b;
    b.depth = depth;
    b.sigma_bar = sigma_bar;
    b.d_eff = d_eff;
    b.m = static_cast<double>(m);
    b.m_val = static_cast<double>(m_val);
    b.loss_bound_train = rec.m_train;
    b.loss_bound_val = rec.m_val;
    b.delta = delta;
    b.c_rad = c_rad;
    return b;
}

struct BoundTableRow {
    std::string group;
    double ratio = 0.0;
    double share = 0.0;
    int count = 0;
};

/// Rows grouped by task (or label when no task is set), in first-seen
/// order; degenerate reports are left out of the averages.
inline std::vector<BoundTableRow> bound_table_rows(const std::vector<BoundReport>& reports) {
    std::vector<BoundTableRow> rows;
    for (const auto& r : reports) {
        if (r.degenerate) continue;
        const std::string g = r.task.empty() ? r.label : r.task;
        BoundTableRow* row = nullptr;
        for (auto& x : rows)
            if (x.group == g) row = &x;
        if (!row) {
            rows.push_back({g, 0.0, 0.0, 0});
            row = &rows.back();
        }
        row->ratio += r.ratio;
        row->share += r.rademacher_share;
        ++row->count;
    }
    for (auto& x : rows) {
        x.ratio /= x.count;
        x.share /= x.count;
    }
    return rows;
}

/// Plain-text table: group, bound ratio, rademacher share, with an average row.
inline std::string bound_table(const std::vector<BoundReport>& reports) {
    const auto rows = bound_table_rows(reports);
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-28s %12s %14s\n", "Task Type", "Bound Ratio", "Rademacher %");
    out += buf;
    double ratio = 0.0, share = 0.0;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-28s %11.1fx %13.1f%%\n", r.group.c_str(), r.ratio, r.share);
        out += buf;
        ratio += r.ratio;
        share += r.share;
    }
    if (!rows.empty()) {
        std::snprintf(buf, sizeof buf, "%-28s %11.1fx %13.1f%%\n", "Average", ratio / static_cast<double>(rows.size()),
                      share / static_cast<double>(rows.size()));
        out += buf;
    }
    int flagged = 0;
    for (const auto& r : reports) flagged += r.degenerate ? 1 : 0;
    if (flagged > 0) {
        std::snprintf(buf, sizeof buf, "(%d pair(s) with zero empirical gap omitted)\n", flagged);
        out += buf;
    }
    return out;
}

inline std::string bounds_csv(const std::vector<BoundReport>& reports) {
    std::string out = "label,task,delta_emp,delta_theo,ratio,rademacher_share,rademacher,hoeffding_val,hoeffding_train,degenerate\n";
    for (const auto& r : reports) {
        out += r.label + "," + r.task + "," + detail::csv_number(r.delta_emp) + "," + detail::csv_number(r.delta_theo) + "," +
               (std::isfinite(r.ratio) ? detail::csv_number(r.ratio) : std::string("inf")) + "," +
               detail::csv_number(r.rademacher_share) + "," + detail::csv_number(r.combined.rademacher) + "," +
               detail::csv_number(r.combined.hoeffding_val) + "," + detail::csv_number(r.combined.hoeffding_train) + "," +
               (r.degenerate ? "1" : "0") + "\n";
    }
    return out;
}

}  // namespace flowsuff
