#pragma once

#include "flowsuff/analysis/ablation.hpp"
#include "flowsuff/analysis/correlation.hpp"
#include "flowsuff/diagnostics/bound.hpp"
#include "flowsuff/diagnostics/probes.hpp"
#include "flowsuff/io/config.hpp"
#include "flowsuff/io/container.hpp"
#include "flowsuff/io/model_file.hpp"
#include "flowsuff/sufficiency/pairwise.hpp"
#include "flowsuff/synth/baselines.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace flowsuff::io {

inline constexpr const char* kArtifactName = "flowsuff";
inline constexpr const char* kArtifactVersion = "1.0.0";
inline constexpr int kReportSchemaVersion = 1;

enum class RunStatus { ok, partial, failed };

inline const char* to_string(RunStatus s) {
    switch (s) {
        case RunStatus::ok: return "ok";
        case RunStatus::partial: return "partial";
        case RunStatus::failed: return "failed";
    }
    return "ok";
}

struct RunReport {
    nlohmann::ordered_json json;
    std::vector<std::pair<std::string, std::string>> files;  // relative path, contents
    RunStatus status = RunStatus::ok;
    int scored_models = 0;
    int flagged_pairs = 0;
    int total_pairs = 0;
    int trained_marginals = 0;      // run log only; not part of the report
    int trained_conditionals = 0;
    std::vector<ModelScore> scores;
    std::string bound_table;

    std::string report_json() const { return json.dump(2) + "\n"; }
};

namespace detail {

enum : std::uint64_t {
    kTagShuffle = 101,
    kTagSubsample = 102,
    kTagPerturb = 103,
    kTagProbe = 104,
};

inline RngStream job_rng(std::uint64_t seed, std::uint64_t tag, const std::string& key) {
    return RngStream(derive_seed(seed, tag, hash_string(key)));
}

/// First `count` validation rows of a model (probe points).
inline Matrix probe_rows(const EmbeddingSet& e, const SplitSpec& split, int count) {
    std::vector<int> rows(split.val.begin(),
                          split.val.begin() + std::min<std::size_t>(split.val.size(), static_cast<std::size_t>(count)));
    return e.take(rows);
}

inline nlohmann::ordered_json correlation_json(const std::vector<ModelScore>& scores, const GroundTruth& gt) {
    nlohmann::ordered_json j;
    j["task"] = gt.task;
    j["rank_correlation"] = correlate_scores(scores, gt).to_json();
    std::vector<std::string> ids;
    std::vector<double> truth, pred;
    for (const auto& s : scores)
        if (s.scored) {
            ids.push_back(s.model_id);
            truth.push_back(gt.score_of(s.model_id));
            pred.push_back(s.score);
        }
    if (ids.size() >= 3) {
        j["top3_overlap"] = top3_overlap(ids, truth, pred);
        j["top3_truth"] = top_k(ids, truth, 3);
        j["top3_predicted"] = top_k(ids, pred, 3);
    } else {
        j["top3_overlap"] = nullptr;
    }
    if (ids.size() >= 2)
        j["pairwise_preferences"] = pairwise_preferences(truth, pred).to_json();
    else
        j["pairwise_preferences"] = nullptr;
    return j;
}

inline AblationCurve shuffle_is_curve(const ShuffleAblation& s, std::uint64_t seed) {
    AblationCurve c;
    c.name = "shuffle_is";
    c.control_name = "p";
    c.statistic_name = "mean_raw_is";
    for (std::size_t i = 0; i < s.p_values.size(); ++i) {
        const auto& m = s.matrices[i];
        double sum = 0.0;
        int n = 0;
        for (Index a = 0; a < m.size(); ++a)
            for (Index b = 0; b < m.size(); ++b)
                if (m.usable(a, b)) {
                    sum += m.raw(a, b);
                    ++n;
                }
        c.points.push_back({s.p_values[i], n ? sum / n : std::numeric_limits<double>::quiet_NaN(), 0, seed});
    }
    return c;
}

struct FlowDiagnostics {
    SigmaBar sigma;
    std::optional<DirectionStats> directions;
    LayerBehavior behavior;
    AmplificationStats total;
};

inline FlowDiagnostics diagnose_flow(const FlowModel& model, const Matrix& v, const Matrix* u, RngStream rng,
                                     int directions, bool full) {
    FlowDiagnostics d;
    d.sigma = estimate_sigma_bar(model, v, u, rng);
    if (!full) return d;
    int couplings = 0;
    for (int l = 0; l < model.atomic_count(); ++l)
        if (FlowModel::atomic_kind(l) == AtomicKind::coupling) ++couplings;
    if (couplings >= 2) d.directions = layer_direction_stats(model, v, u, rng);
    d.behavior = layer_displacement_and_amplification(model, v, u, rng, directions);
    d.total = total_amplification(model, v, u, rng, 0.01, directions);
    return d;
}

inline nlohmann::ordered_json diagnostics_json(const FlowDiagnostics& d, int depth) {
    nlohmann::ordered_json j;
    j["sigma_bar"] = d.sigma.value;
    j["per_layer_deviation"] = d.sigma.per_layer;
    j["directions"] = d.directions ? d.directions->to_json() : nlohmann::ordered_json(nullptr);
    j["layer_behavior"] = d.behavior.to_json();
    j["total_amplification"] = d.total.to_json();
    j["compounded_amplification"] = compounded_amplification(d.behavior.geo_mean_amplification, depth);
    return j;
}

}  // namespace detail

/// Ingest, train (with the on-disk flow cache), score, and run the enabled
/// analyses. Every emitted number depends only on the config, the seed and
/// the input bytes.
inline RunReport run_pipeline(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.pool.size() < 2) throw ConfigError("pool: need at least two embedding files");
    const auto pool = read_pool(cfg.pool);
    validate_pool(pool);
    std::optional<GroundTruth> gt;
    if (cfg.ground_truth) {
        gt = read_ground_truth(*cfg.ground_truth, cfg.task);
        for (const auto& e : pool) (void)gt->score_of(e.model_id);
    }
    const auto& an = cfg.analysis;

    PoolConfig pc;
    pc.marginal = cfg.marginal;
    pc.conditional = cfg.conditional;
    pc.split_ratio = cfg.split_ratio;
    pc.seed = cfg.seed;
    pc.jobs = cfg.jobs;
    FileFlowStore store(cfg.cache_dir());
    const PoolResult r = pairwise_is_matrix(pool, pc, &store);

    RunReport rep;
    rep.trained_marginals = r.trained_marginals;
    rep.trained_conditionals = r.trained_conditionals;
    rep.total_pairs = static_cast<int>(r.pairs.size());
    rep.flagged_pairs = r.matrix.flagged_count();
    rep.scores = aggregate_scores(r.matrix, cfg.aggregation);
    for (const auto& s : rep.scores) rep.scored_models += s.scored ? 1 : 0;
    rep.status = rep.scored_models < 2 ? RunStatus::failed
                 : rep.flagged_pairs > 0 ? RunStatus::partial
                                         : RunStatus::ok;

    auto& j = rep.json;
    j["schema_version"] = kReportSchemaVersion;
    j["artifact"] = {{"name", kArtifactName}, {"version", kArtifactVersion}};
    const auto config_json = cfg.to_json();
    auto inputs = nlohmann::ordered_json::array();
    for (const auto& e : pool)
        inputs.push_back({{"model_id", e.model_id},
                          {"n", e.rows()},
                          {"d", e.dim()},
                          {"corpus_hash", e.corpus_hash},
                          {"content_hash", Fnv64().matrix(e.values).hex()}});
    j["provenance"] = {{"seed", cfg.seed},
                       {"config_hash", Fnv64().str(config_json.dump()).hex()},
                       {"config", config_json},
                       {"inputs", std::move(inputs)}};
    j["status"] = to_string(rep.status);
    j["split"] = {{"ratio", r.split.ratio},
                  {"seed", r.split.seed},
                  {"train_rows", r.split.train.size()},
                  {"val_rows", r.split.val.size()}};
    j["is_matrix"] = r.matrix.to_json();
    j["scores"] = scores_json(rep.scores);
    {
        auto ranking = nlohmann::ordered_json::array();
        for (const auto& s : j["scores"]) ranking.push_back(s["model_id"]);
        j["ranking"] = std::move(ranking);
    }
    {
        auto jobs = nlohmann::ordered_json::array();
        for (std::size_t b = 0; b < r.marginals.size(); ++b) {
            const auto& m = r.marginals[b];
            jobs.push_back({{"job_id", m.key},
                            {"stage", "marginal"},
                            {"source", nullptr},
                            {"target", pool[b].model_id},
                            {"error", m.error},
                            {"record", m.ok() ? m.record.to_json(false) : nlohmann::ordered_json(nullptr)}});
        }
        for (const auto& p : r.pairs)
            jobs.push_back({{"job_id", p.key},
                            {"stage", "conditional"},
                            {"source", pool[static_cast<std::size_t>(p.source)].model_id},
                            {"target", pool[static_cast<std::size_t>(p.target)].model_id},
                            {"error", p.error},
                            {"record", p.ok() ? p.record.to_json(false) : nlohmann::ordered_json(nullptr)}});
        j["jobs"] = std::move(jobs);
    }
    j["correlation"] = gt ? detail::correlation_json(rep.scores, *gt) : nlohmann::ordered_json(nullptr);

    rep.files.emplace_back("is_matrix.csv", r.matrix.to_csv());
    rep.files.emplace_back("scores.csv", scores_csv(rep.scores));

    nlohmann::ordered_json ablations = nlohmann::ordered_json::object();
    std::vector<std::string> warnings;
    if (an.bootstrap) {
        if (r.matrix.size() < 4) {
            warnings.push_back("bootstrap skipped: needs at least four models");
            j["bootstrap"] = nullptr;
        } else {
            j["bootstrap"] = loo_bootstrap(r.matrix, *gt, cfg.aggregation).to_json();
        }
    }
    if (an.shuffle) {
        const std::uint64_t seed = derive_seed(cfg.seed, detail::kTagShuffle, 0);
        const auto s = shuffle_ablation(r, pool, an.shuffle_grid, seed, gt ? &*gt : nullptr, cfg.aggregation, cfg.jobs);
        const auto is_curve = detail::shuffle_is_curve(s, seed);
        nlohmann::ordered_json sj;
        sj["is"] = is_curve.to_json();
        sj["spearman"] = gt ? s.rho.to_json() : nlohmann::ordered_json(nullptr);
        ablations["shuffle"] = std::move(sj);
        rep.files.emplace_back("curves/shuffle_is.csv", is_curve.to_csv());
        if (gt) rep.files.emplace_back("curves/shuffle_spearman.csv", s.rho.to_csv());
    }
    if (an.subsample) {
        const auto nll = ValidationNlls::from(r);
        const auto curve = subsample_stability(nll, an.subsample_grid, an.subsample_repeats, *gt,
                                               derive_seed(cfg.seed, detail::kTagSubsample, 0), cfg.aggregation);
        ablations["subsample"] = curve.to_json();
        rep.files.emplace_back("curves/subsample.csv", curve.to_csv());
    }
    if (an.aggregation) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& m : {AggregateMethod::median(), AggregateMethod::mean(), AggregateMethod::trimmed(an.trim_fraction)}) {
            const auto sc = aggregate_scores(r.matrix, m);
            nlohmann::ordered_json e;
            e["method"] = m.name();
            e["scores"] = scores_json(sc);
            e["spearman"] = gt ? flowsuff::detail::number_or_null(correlate_scores(sc, *gt).spearman)
                               : nlohmann::ordered_json(nullptr);
            arr.push_back(std::move(e));
        }
        ablations["aggregation"] = std::move(arr);
    }
    if (an.cond_only) {
        const auto m = cond_only_matrix(r);
        const auto sc = aggregate_scores(m, cfg.aggregation);
        nlohmann::ordered_json e;
        e["matrix"] = m.to_json();
        e["scores"] = scores_json(sc);
        e["spearman_full_is"] =
            gt ? flowsuff::detail::number_or_null(correlate_scores(rep.scores, *gt).spearman) : nlohmann::ordered_json(nullptr);
        e["spearman_cond_only"] =
            gt ? flowsuff::detail::number_or_null(correlate_scores(sc, *gt).spearman) : nlohmann::ordered_json(nullptr);
        ablations["cond_only"] = std::move(e);
    }
    if (an.perturb) {
        auto arr = nlohmann::ordered_json::array();
        AblationCurve curve;
        curve.name = "perturb";
        curve.control_name = "sigma";
        curve.statistic_name = "median_relative_nll_change";
        for (std::size_t b = 0; b < r.marginals.size(); ++b) {
            const auto& m = r.marginals[b];
            if (!m.ok()) continue;
            const std::uint64_t seed = derive_seed(cfg.seed, detail::kTagPerturb, hash_string(m.key));
            const auto rows = weight_perturbation_sweep(*m.model, an.perturb_grid, an.perturb_draws,
                                                        pool[b].take(r.split.val), nullptr, seed);
            auto rj = nlohmann::ordered_json::array();
            for (const auto& row : rows) {
                rj.push_back(row.to_json());
                curve.points.push_back({row.sigma, row.median, static_cast<int>(b), seed});
            }
            arr.push_back({{"model_id", pool[b].model_id}, {"job_id", m.key}, {"rows", std::move(rj)}});
        }
        ablations["perturb"] = std::move(arr);
        rep.files.emplace_back("curves/perturb.csv", curve.to_csv());
    }
    if (an.shuffle || an.subsample || an.aggregation || an.cond_only || an.perturb) j["ablations"] = std::move(ablations);

    if (an.diagnostics || an.bounds) {
        std::vector<int> d_eff(pool.size(), 0);
        for (std::size_t b = 0; b < pool.size(); ++b)
            d_eff[b] = estimate_d_eff(pool[b].take(r.split.train), an.d_eff_threshold);
        std::vector<std::optional<detail::FlowDiagnostics>> marg_diag(pool.size());
        parallel_for(pool.size(), cfg.jobs, [&](std::size_t b) {
            const auto& m = r.marginals[b];
            if (!m.ok()) return;
            const Matrix v = detail::probe_rows(pool[b], r.split, an.probe_points);
            marg_diag[b] = detail::diagnose_flow(*m.model, v, nullptr, detail::job_rng(cfg.seed, detail::kTagProbe, m.key),
                                                 an.probe_directions, an.diagnostics);
        });
        std::vector<std::optional<detail::FlowDiagnostics>> pair_diag(r.pairs.size());
        parallel_for(r.pairs.size(), cfg.jobs, [&](std::size_t i) {
            const auto& p = r.pairs[i];
            if (!p.ok()) return;
            const Matrix v = detail::probe_rows(pool[static_cast<std::size_t>(p.target)], r.split, an.probe_points);
            const Matrix u = detail::probe_rows(pool[static_cast<std::size_t>(p.source)], r.split, an.probe_points);
            pair_diag[i] = detail::diagnose_flow(*p.model, v, &u, detail::job_rng(cfg.seed, detail::kTagProbe, p.key),
                                                 an.probe_directions, an.diagnostics);
        });
        if (an.diagnostics) {
            auto models = nlohmann::ordered_json::array();
            for (std::size_t b = 0; b < pool.size(); ++b) {
                nlohmann::ordered_json e;
                e["model_id"] = pool[b].model_id;
                e["job_id"] = r.marginals[b].key;
                e["d_eff"] = d_eff[b];
                e["marginal"] = marg_diag[b] ? detail::diagnostics_json(*marg_diag[b], r.marginals[b].model->atomic_count())
                                             : nlohmann::ordered_json(nullptr);
                models.push_back(std::move(e));
            }
            auto pairs = nlohmann::ordered_json::array();
            for (std::size_t i = 0; i < r.pairs.size(); ++i) {
                const auto& p = r.pairs[i];
                pairs.push_back({{"source", pool[static_cast<std::size_t>(p.source)].model_id},
                                 {"target", pool[static_cast<std::size_t>(p.target)].model_id},
                                 {"job_id", p.key},
                                 {"conditional", pair_diag[i] ? detail::diagnostics_json(*pair_diag[i], p.model->atomic_count())
                                                              : nlohmann::ordered_json(nullptr)}});
            }
            j["diagnostics"] = {{"models", std::move(models)}, {"pairs", std::move(pairs)}};
        }
        if (an.bounds) {
            std::vector<BoundReport> reports;
            const auto m = static_cast<Index>(r.split.train.size());
            const auto m_val = static_cast<Index>(r.split.val.size());
            for (std::size_t i = 0; i < r.pairs.size(); ++i) {
                const auto& p = r.pairs[i];
                const auto b = static_cast<std::size_t>(p.target);
                if (!p.ok() || !pair_diag[i] || !marg_diag[b]) continue;
                const auto& marg = r.marginals[b];
                const auto mi = bound_inputs_from(marg.record, m, m_val, marg_diag[b]->sigma.value, d_eff[b],
                                                  marg.model->atomic_count(), an.bound_delta, an.bound_c_rad);
                const auto ci = bound_inputs_from(p.record, m, m_val, pair_diag[i]->sigma.value, d_eff[b],
                                                  p.model->atomic_count(), an.bound_delta, an.bound_c_rad);
                auto br = bound_report(marg.record, p.record, mi, ci);
                br.label = pool[static_cast<std::size_t>(p.source)].model_id + "->" + pool[b].model_id;
                br.task = cfg.task;
                reports.push_back(std::move(br));
            }
            auto arr = nlohmann::ordered_json::array();
            int valid = 0, degenerate = 0;
            for (const auto& br : reports) {
                arr.push_back(br.to_json());
                if (br.degenerate) ++degenerate;
                else if (br.delta_theo >= br.delta_emp) ++valid;
            }
            rep.bound_table = bound_table(reports);
            j["bounds"] = {{"reports", std::move(arr)},
                           {"holding", valid},
                           {"degenerate", degenerate},
                           {"table", rep.bound_table}};
            rep.files.emplace_back("bounds.csv", bounds_csv(reports));
        }
    }
    if (an.baselines) {
        std::vector<ModelScore> uni;
        for (const auto& e : pool) {
            ModelScore s;
            s.model_id = e.model_id;
            s.method = "uniformity";
            s.score = uniformity_score(EmbeddingSet{e.model_id, e.corpus_hash, e.take(r.split.val)});
            s.scored = std::isfinite(s.score);
            uni.push_back(std::move(s));
        }
        uni = rank_models(std::move(uni));
        nlohmann::ordered_json bj;
        bj["uniformity"] = scores_json(uni);
        bj["uniformity_correlation"] = gt ? detail::correlation_json(uni, *gt) : nlohmann::ordered_json(nullptr);
        j["baselines"] = std::move(bj);
    }
    j["warnings"] = warnings;
    rep.files.emplace_back("report.json", rep.report_json());
    return rep;
}

/// Files from earlier runs that this run may not overwrite.
inline const std::vector<std::string>& report_outputs() {
    static const std::vector<std::string> names{"report.json", "is_matrix.csv", "scores.csv", "bounds.csv", "curves"};
    return names;
}

/// Write every report file under `dir`. Stale outputs of earlier runs are
/// removed first; on failure the files written so far are removed too.
inline std::vector<fs::path> write_report(const RunReport& report, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
    for (const auto& name : report_outputs()) fs::remove_all(dir / name, ec);
    std::vector<fs::path> written;
    try {
        for (const auto& [rel, contents] : report.files) {
            write_file_atomic(dir / rel, contents);
            written.push_back(dir / rel);
        }
    } catch (...) {
        for (const auto& p : written) fs::remove(p, ec);
        fs::remove_all(dir / "curves", ec);
        throw;
    }
    return written;
}

}  // namespace flowsuff::io
