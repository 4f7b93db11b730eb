#pragma once

#include "flowsuff/analysis/correlation.hpp"
#include "flowsuff/io/binary.hpp"
#include "flowsuff/sufficiency/is_matrix.hpp"
#include "flowsuff/training/trainer.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace flowsuff::io {

struct AnalysisConfig {
    bool bootstrap = false;
    bool shuffle = false;
    std::vector<double> shuffle_grid{0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
    bool subsample = false;
    std::vector<double> subsample_grid{0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
    int subsample_repeats = 20;
    bool aggregation = false;
    double trim_fraction = 0.10;
    bool cond_only = false;
    bool perturb = false;
    std::vector<double> perturb_grid{0.01, 0.02, 0.05, 0.10, 0.20};
    int perturb_draws = 3;
    bool diagnostics = false;
    int probe_points = 8;
    int probe_directions = 3;
    bool bounds = false;
    double bound_delta = 0.05;
    double bound_c_rad = 6.0 * 1.7724538509055160273;
    double d_eff_threshold = 0.95;
    bool baselines = false;

    bool any() const {
        return bootstrap || shuffle || subsample || aggregation || cond_only || perturb || diagnostics || bounds ||
               baselines;
    }
};

struct RunConfig {
    std::vector<fs::path> pool;
    std::optional<fs::path> ground_truth;
    std::string task;  // label for the ground-truth scores (bound table grouping)
    fs::path out = "flowsuff-out";
    std::optional<fs::path> cache;  // default <out>/cache
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string preset = "desk";
    double split_ratio = 0.9;
    AggregateMethod aggregation = AggregateMethod::median();
    TrainConfig marginal = TrainConfig::desk(Stage::marginal);
    TrainConfig conditional = TrainConfig::desk(Stage::conditional);
    AnalysisConfig analysis;

    fs::path cache_dir() const { return cache ? *cache : out / "cache"; }

    void validate() const {
        if (jobs < 1) throw ConfigError("run.jobs must be >= 1");
        if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("run.split_ratio must lie in (0, 1)");
        aggregation.validate();
        marginal.validate();
        conditional.validate();
        const auto& a = analysis;
        for (double p : a.shuffle_grid)
            if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("analysis.shuffle_grid values must lie in [0, 1]");
        for (double x : a.subsample_grid)
            if (!(x > 0.0 && x <= 1.0)) throw ConfigError("analysis.subsample_grid values must lie in (0, 1]");
        for (double s : a.perturb_grid)
            if (!(s >= 0.0 && s <= 0.5)) throw ConfigError("analysis.perturb_grid values must lie in [0, 0.5]");
        if (a.subsample_repeats < 1 || a.perturb_draws < 1) throw ConfigError("analysis repeats/draws must be >= 1");
        if (a.probe_points < 1 || a.probe_directions < 1) throw ConfigError("analysis probe counts must be >= 1");
        if (!(a.trim_fraction > 0.0 && a.trim_fraction < 0.5))
            throw ConfigError("analysis.trim_fraction must lie in (0, 0.5)");
        if (!(a.bound_delta > 0.0 && a.bound_delta < 1.0)) throw ConfigError("bound.delta must lie in (0, 1)");
        if (!(a.bound_c_rad > 0.0)) throw ConfigError("bound.c_rad must be positive");
        if (!(a.d_eff_threshold > 0.0 && a.d_eff_threshold < 1.0))
            throw ConfigError("bound.d_eff_threshold must lie in (0, 1)");
        if ((a.bootstrap || a.subsample) && !ground_truth)
            throw ConfigError("bootstrap and subsample analyses need pool.ground_truth");
    }

    /// Everything that determines emitted numbers (paths and job count excluded).
    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["preset"] = preset;
        j["split_ratio"] = split_ratio;
        j["aggregation"] = aggregation.name();
        j["marginal"] = marginal.to_json();
        j["conditional"] = conditional.to_json();
        const auto& a = analysis;
        j["analysis"] = {{"bootstrap", a.bootstrap},
                         {"shuffle", a.shuffle},
                         {"shuffle_grid", a.shuffle_grid},
                         {"subsample", a.subsample},
                         {"subsample_grid", a.subsample_grid},
                         {"subsample_repeats", a.subsample_repeats},
                         {"aggregation", a.aggregation},
                         {"trim_fraction", a.trim_fraction},
                         {"cond_only", a.cond_only},
                         {"perturb", a.perturb},
                         {"perturb_grid", a.perturb_grid},
                         {"perturb_draws", a.perturb_draws},
                         {"diagnostics", a.diagnostics},
                         {"probe_points", a.probe_points},
                         {"probe_directions", a.probe_directions},
                         {"bounds", a.bounds},
                         {"bound_delta", a.bound_delta},
                         {"bound_c_rad", a.bound_c_rad},
                         {"d_eff_threshold", a.d_eff_threshold},
                         {"baselines", a.baselines}};
        j["task"] = task;
        return j;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError(key + ": value out of range '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    std::string s = v;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
    if (s == "false" || s == "no" || s == "off" || s == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<double> parse_grid(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& item : split_list(v)) out.push_back(parse_double(key, item));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

inline int parse_positive_int(const std::string& key, const std::string& v) {
    const long long x = parse_int(key, v);
    if (x < 1 || x > 1'000'000'000) throw ConfigError(key + ": must be a positive integer");
    return static_cast<int>(x);
}

inline void apply_train_key(TrainConfig& c, const std::string& section, const std::string& key,
                            const std::string& v) {
    const std::string name = section + "." + key;
    if (key == "lr") c.lr = parse_double(name, v);
    else if (key == "weight_decay") c.weight_decay = parse_double(name, v);
    else if (key == "ema_decay") c.ema_decay = parse_double(name, v);
    else if (key == "batch_size") c.batch_size = parse_positive_int(name, v);
    else if (key == "accum_steps") c.accum_steps = parse_positive_int(name, v);
    else if (key == "max_epochs") c.max_epochs = static_cast<int>(parse_int(name, v));
    else if (key == "patience") c.patience = parse_positive_int(name, v);
    else if (key == "final_lr_factor") c.final_lr_factor = parse_double(name, v);
    else if (key == "rank" && c.stage == Stage::conditional) c.rank = parse_positive_int(name, v);
    else if (key == "blocks") c.flow.blocks = parse_positive_int(name, v);
    else if (key == "bins") c.flow.spline.bins = parse_positive_int(name, v);
    else if (key == "tail_bound") c.flow.spline.tail_bound = parse_double(name, v);
    else if (key == "hidden_width") c.flow.hidden_width = static_cast<int>(parse_int(name, v));
    else if (key == "hidden_layers") c.flow.hidden_layers = parse_positive_int(name, v);
    else if (key == "activation") c.flow.activation = activation_from_string(v);
    else throw ConfigError("unknown key '" + name + "'");
    if (c.max_epochs < 0) throw ConfigError(name + ": max_epochs must be >= 0");
    if (c.flow.hidden_width < 0) throw ConfigError(name + ": hidden_width must be >= 0");
    if (!(c.flow.spline.tail_bound > 0.0)) throw ConfigError(name + ": tail_bound must be positive");
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path q(p);
    return q.is_absolute() || base.empty() ? q : base / q;
}

inline std::vector<fs::path> pool_from_dir(const fs::path& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw ConfigError("pool.dir '" + dir.string() + "' is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".fsem") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

/// Seed override from FLOWSUFF_SEED, if set.
inline std::optional<std::uint64_t> seed_from_env() {
    const char* s = std::getenv("FLOWSUFF_SEED");
    if (!s || !*s) return std::nullopt;
    return detail::parse_u64("FLOWSUFF_SEED", detail::trim(s));
}

/// Parse an INI document. Relative paths resolve against `base`.
/// Sections: run, pool, marginal, conditional, analysis, bound.
inline RunConfig parse_config(const std::string& text, const fs::path& base = {}) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig c;
    // preset first so that stage keys override it regardless of order
    if (auto run = tree.get_child_optional("run")) {
        if (auto p = run->get_optional<std::string>("preset")) {
            const std::string v = detail::trim(*p);
            if (v == "desk") {
                c.marginal = TrainConfig::desk(Stage::marginal);
                c.conditional = TrainConfig::desk(Stage::conditional);
            } else if (v == "full") {
                c.marginal = TrainConfig::marginal_defaults();
                c.conditional = TrainConfig::conditional_defaults();
            } else {
                throw ConfigError("run.preset: expected desk or full, got '" + v + "'");
            }
            c.preset = v;
        }
    }
    std::string pool_dir;
    for (const auto& [section, child] : tree) {
        if (child.empty() && !child.data().empty())
            throw ConfigError("key '" + section + "' must be inside a section");
        for (const auto& [key, node] : child) {
            const std::string v = detail::trim(node.data());
            const std::string name = section + "." + key;
            if (section == "run") {
                if (key == "preset") continue;
                if (key == "seed") c.seed = detail::parse_u64(name, v);
                else if (key == "out") c.out = detail::resolve(base, v);
                else if (key == "cache") c.cache = detail::resolve(base, v);
                else if (key == "jobs") c.jobs = detail::parse_positive_int(name, v);
                else if (key == "split_ratio") c.split_ratio = detail::parse_double(name, v);
                else if (key == "aggregation") c.aggregation = AggregateMethod::parse(v);
                else throw ConfigError("unknown key '" + name + "'");
            } else if (section == "pool") {
                if (key == "paths") {
                    for (const auto& p : detail::split_list(v)) c.pool.push_back(detail::resolve(base, p));
                } else if (key == "dir") {
                    pool_dir = v;
                } else if (key == "ground_truth") {
                    c.ground_truth = detail::resolve(base, v);
                } else if (key == "task") {
                    c.task = v;
                } else {
                    throw ConfigError("unknown key '" + name + "'");
                }
            } else if (section == "marginal") {
                detail::apply_train_key(c.marginal, section, key, v);
            } else if (section == "conditional") {
                detail::apply_train_key(c.conditional, section, key, v);
            } else if (section == "analysis") {
                auto& a = c.analysis;
                if (key == "bootstrap") a.bootstrap = detail::parse_bool(name, v);
                else if (key == "shuffle") a.shuffle = detail::parse_bool(name, v);
                else if (key == "shuffle_grid") a.shuffle_grid = detail::parse_grid(name, v);
                else if (key == "subsample") a.subsample = detail::parse_bool(name, v);
                else if (key == "subsample_grid") a.subsample_grid = detail::parse_grid(name, v);
                else if (key == "subsample_repeats") a.subsample_repeats = detail::parse_positive_int(name, v);
                else if (key == "aggregation") a.aggregation = detail::parse_bool(name, v);
                else if (key == "trim_fraction") a.trim_fraction = detail::parse_double(name, v);
                else if (key == "cond_only") a.cond_only = detail::parse_bool(name, v);
                else if (key == "perturb") a.perturb = detail::parse_bool(name, v);
                else if (key == "perturb_grid") a.perturb_grid = detail::parse_grid(name, v);
                else if (key == "perturb_draws") a.perturb_draws = detail::parse_positive_int(name, v);
                else if (key == "diagnostics") a.diagnostics = detail::parse_bool(name, v);
                else if (key == "probe_points") a.probe_points = detail::parse_positive_int(name, v);
                else if (key == "probe_directions") a.probe_directions = detail::parse_positive_int(name, v);
                else if (key == "bounds") a.bounds = detail::parse_bool(name, v);
                else if (key == "baselines") a.baselines = detail::parse_bool(name, v);
                else throw ConfigError("unknown key '" + name + "'");
            } else if (section == "bound") {
                auto& a = c.analysis;
                if (key == "delta") a.bound_delta = detail::parse_double(name, v);
                else if (key == "c_rad") a.bound_c_rad = detail::parse_double(name, v);
                else if (key == "d_eff_threshold") a.d_eff_threshold = detail::parse_double(name, v);
                else throw ConfigError("unknown key '" + name + "'");
            } else {
                throw ConfigError("unknown section '[" + section + "]'");
            }
        }
    }
    if (!pool_dir.empty()) {
        if (!c.pool.empty()) throw ConfigError("pool.paths and pool.dir are mutually exclusive");
        c.pool = detail::pool_from_dir(detail::resolve(base, pool_dir));
    }
    if (auto s = seed_from_env()) c.seed = *s;
    c.validate();
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(text, path.parent_path());
}

/// Ground truth CSV: header "model_id,score", one row per model.
inline GroundTruth parse_ground_truth(const std::string& text, const std::string& task = {},
                                      const std::string& origin = "<memory>") {
    GroundTruth gt;
    gt.task = task;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto cells = detail::split_list(line);
        if (lineno == 1 && !cells.empty() && cells[0] == "model_id") continue;
        if (cells.size() != 2)
            throw DataError(origin + ":" + std::to_string(lineno) + ": expected model_id,score");
        double score = 0.0;
        try {
            score = detail::parse_double("score", cells[1]);
        } catch (const ConfigError&) {
            throw DataError(origin + ":" + std::to_string(lineno) + ": bad score '" + cells[1] + "'");
        }
        if (!seen.insert(cells[0]).second)
            throw DataError(origin + ":" + std::to_string(lineno) + ": duplicate model_id '" + cells[0] + "'");
        gt.ids.push_back(cells[0]);
        gt.scores.push_back(score);
    }
    gt.validate();
    return gt;
}

inline GroundTruth read_ground_truth(const fs::path& path, const std::string& task = {}) {
    return parse_ground_truth(read_file(path), task, path.string());
}

inline std::string ground_truth_csv(const GroundTruth& gt) {
    std::string out = "model_id,score\n";
    for (std::size_t i = 0; i < gt.ids.size(); ++i) out += gt.ids[i] + "," + flowsuff::detail::csv_number(gt.scores[i]) + "\n";
    return out;
}

}  // namespace flowsuff::io
