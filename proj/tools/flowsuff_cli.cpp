#include "flowsuff/io/pipeline.hpp"
#include "flowsuff/synth/generators.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace flowsuff;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kTraining = 4, kPartial = 5 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> jobs;
};

enum class Analysis { none, all, bootstrap, shuffle, subsample, aggregation, cond_only, perturb, diagnostics, bounds };

io::RunConfig load_run_config(const Globals& g, Analysis what) {
    if (g.config.empty()) throw ConfigError("--config is required for this command");
    io::RunConfig cfg = io::load_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (!g.out.empty()) cfg.out = g.out;
    if (g.jobs) cfg.jobs = *g.jobs;
    if (what != Analysis::all) {
        io::AnalysisConfig a = cfg.analysis;
        a.bootstrap = what == Analysis::bootstrap;
        a.shuffle = what == Analysis::shuffle;
        a.subsample = what == Analysis::subsample;
        a.aggregation = what == Analysis::aggregation;
        a.cond_only = what == Analysis::cond_only;
        a.perturb = what == Analysis::perturb;
        a.diagnostics = what == Analysis::diagnostics;
        a.bounds = what == Analysis::bounds;
        a.baselines = false;
        cfg.analysis = a;
    }
    cfg.validate();
    return cfg;
}

int status_exit(const io::RunReport& r) {
    switch (r.status) {
        case io::RunStatus::ok: return kOk;
        case io::RunStatus::partial: return kPartial;
        case io::RunStatus::failed: return kTraining;
    }
    return kOk;
}

void print_ranking(const io::RunReport& r) {
    std::printf("%-6s %-32s %14s\n", "rank", "model", "score");
    for (const auto& s : r.json["scores"]) {
        const std::string score = s["score"].is_null() ? "-" : std::to_string(s["score"].get<double>());
        std::printf("%-6d %-32s %14s\n", s["rank"].get<int>(), s["model_id"].get<std::string>().c_str(), score.c_str());
    }
}

void print_number(const char* label, const nlohmann::ordered_json& v) {
    if (v.is_null())
        std::printf("%s: undefined\n", label);
    else
        std::printf("%s: %.4f\n", label, v.get<double>());
}

void print_curve(const nlohmann::ordered_json& c) {
    std::printf("%s (%s vs %s)\n", c["name"].get<std::string>().c_str(), c["statistic"].get<std::string>().c_str(),
                c["control"].get<std::string>().c_str());
    for (const auto& p : c["summary"]) {
        const std::string mean = p["mean"].is_null() ? "-" : std::to_string(p["mean"].get<double>());
        std::printf("  %8.3f  %s\n", p["control"].get<double>(), mean.c_str());
    }
    for (const auto& w : c["warnings"]) std::printf("  warning: %s\n", w.get<std::string>().c_str());
}

void print_summary(const io::RunReport& r, Analysis what) {
    const auto& j = r.json;
    switch (what) {
        case Analysis::none:
            std::printf("scored %d model(s); %d of %d pair(s) flagged\n", r.scored_models, r.flagged_pairs,
                        r.total_pairs);
            break;
        case Analysis::bootstrap:
            if (j["bootstrap"].is_null()) break;
            print_number("rho (full pool)", j["bootstrap"]["rho_full"]);
            print_number("rho min (leave-one-out)", j["bootstrap"]["rho_min"]);
            print_number("rho max (leave-one-out)", j["bootstrap"]["rho_max"]);
            break;
        case Analysis::shuffle:
            print_curve(j["ablations"]["shuffle"]["is"]);
            if (!j["ablations"]["shuffle"]["spearman"].is_null()) print_curve(j["ablations"]["shuffle"]["spearman"]);
            break;
        case Analysis::subsample: print_curve(j["ablations"]["subsample"]); break;
        case Analysis::aggregation:
            for (const auto& e : j["ablations"]["aggregation"]) print_number(e["method"].get<std::string>().c_str(), e["spearman"]);
            break;
        case Analysis::cond_only:
            print_number("spearman full IS", j["ablations"]["cond_only"]["spearman_full_is"]);
            print_number("spearman conditional only", j["ablations"]["cond_only"]["spearman_cond_only"]);
            break;
        case Analysis::perturb:
            for (const auto& m : j["ablations"]["perturb"]) {
                std::printf("%s\n", m["model_id"].get<std::string>().c_str());
                for (const auto& row : m["rows"]) {
                    const std::string med = row["median"].is_null() ? "-" : std::to_string(row["median"].get<double>());
                    std::printf("  sigma %.3f  median relative NLL change %s  divergent %d\n",
                                row["sigma"].get<double>(), med.c_str(), row["divergent"].get<int>());
                }
            }
            break;
        case Analysis::diagnostics:
            for (const auto& m : j["diagnostics"]["models"]) {
                if (m["marginal"].is_null()) continue;
                const auto& d = m["marginal"];
                std::printf("%-24s d_eff %3d  sigma_bar %.4f  amplification %.3f",
                            m["model_id"].get<std::string>().c_str(), m["d_eff"].get<int>(), d["sigma_bar"].get<double>(),
                            d["total_amplification"]["mean"].get<double>());
                if (!d["directions"].is_null())
                    std::printf("  mean|cos| %.3f (1/sqrt(d) %.3f)", d["directions"]["mean_abs_cos"].get<double>(),
                                d["directions"]["baseline"].get<double>());
                std::printf("\n");
            }
            break;
        case Analysis::bounds:
            std::printf("%s", r.bound_table.c_str());
            std::printf("bound holds on %d of %zu pair(s)\n", j["bounds"]["holding"].get<int>(),
                        j["bounds"]["reports"].size());
            break;
        case Analysis::all: break;
    }
}

int run_command(const Globals& g, Analysis what, bool need_gt, bool show_ranking) {
    const io::RunConfig cfg = load_run_config(g, what);
    if (need_gt && !cfg.ground_truth) throw ConfigError("this command needs pool.ground_truth in the config");
    const io::RunReport r = io::run_pipeline(cfg);
    std::fprintf(stderr, "trained %d marginal and %d conditional flow(s); cache %s\n", r.trained_marginals,
                 r.trained_conditionals, cfg.cache_dir().string().c_str());
    const auto written = io::write_report(r, cfg.out);
    if (show_ranking) print_ranking(r);
    if (!r.json["correlation"].is_null() && (need_gt || show_ranking))
        print_number("spearman vs ground truth", r.json["correlation"]["rank_correlation"]["spearman"]);
    print_summary(r, what);
    std::fprintf(stderr, "wrote %zu file(s) to %s; status %s\n", written.size(), cfg.out.string().c_str(),
                 io::to_string(r.status));
    return status_exit(r);
}

struct IngestArgs {
    std::string input;
    std::string model_id;
    std::string corpus_hash;
    std::string corpus_file;
};

int ingest(const Globals& g, const IngestArgs& a) {
    if (g.out.empty()) throw ConfigError("ingest: --out <file.fsem> is required");
    if (a.corpus_hash.empty() == a.corpus_file.empty())
        throw ConfigError("ingest: give exactly one of --corpus-hash or --corpus-file");
    EmbeddingSet e;
    e.model_id = a.model_id;
    e.corpus_hash = a.corpus_hash.empty() ? io::corpus_hash_of_file(a.corpus_file) : a.corpus_hash;
    e.values = io::read_npy(io::read_file(a.input), a.input);
    const auto bad = io::non_finite_rows(e.values);
    if (!bad.empty()) throw DataError(a.input + ": non-finite values in row " + std::to_string(bad.front()));
    io::write_embeddings(g.out, e);
    std::printf("%s: %lld x %lld -> %s\n", e.model_id.c_str(), static_cast<long long>(e.rows()),
                static_cast<long long>(e.dim()), g.out.c_str());
    return kOk;
}

struct SynthArgs {
    std::vector<Index> dims{3, 4, 3, 4};
    std::vector<double> noise{0.1, 0.3, 1.0, 3.0};
    Index latent = 2;
    Index rows = 3000;
};

int synth(const Globals& g, const SynthArgs& a) {
    if (g.out.empty()) throw ConfigError("synth: --out <dir> is required");
    if (a.dims.size() != a.noise.size()) throw ConfigError("synth: --dims and --noise need the same length");
    if (a.dims.size() < 2) throw ConfigError("synth: need at least two models");
    SyntheticPoolSpec s;
    s.latent_dim = a.latent;
    s.output_dims = a.dims;
    s.noise_levels = a.noise;
    s.rows = a.rows;
    s.seed = g.seed.value_or(io::seed_from_env().value_or(0));
    const auto pool = gen_synthetic_pool(s);
    const fs::path dir = g.out;
    std::string paths;
    GroundTruth gt;
    for (std::size_t i = 0; i < pool.models.size(); ++i) {
        const auto& m = pool.models[i];
        const fs::path rel = fs::path("pool") / (m.model_id + ".fsem");
        io::write_embeddings(dir / rel, m);
        paths += (paths.empty() ? "" : ", ") + rel.string();
        gt.ids.push_back(m.model_id);
        gt.scores.push_back(pool.quality[i]);
    }
    io::write_file_atomic(dir / "ground_truth.csv", io::ground_truth_csv(gt));
    io::write_file_atomic(dir / "flowsuff.ini", "[run]\nseed = " + std::to_string(s.seed) +
                                                    "\npreset = desk\nout = out\n\n[pool]\npaths = " + paths +
                                                    "\nground_truth = ground_truth.csv\n");
    std::printf("wrote %zu synthetic model(s), ground_truth.csv and flowsuff.ini to %s\n", pool.models.size(),
                dir.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rank embedding models by information sufficiency estimated with normalizing flows"};
    app.set_version_flag("--version", std::string(io::kArtifactVersion));
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "INI run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Master seed (overrides FLOWSUFF_SEED and the config)");
    app.add_option("--out", g.out, "Output directory (output file for ingest)");
    app.add_option("--jobs", g.jobs, "Concurrent training jobs")->check(CLI::PositiveNumber);

    Analysis what = Analysis::none;
    bool need_gt = false, show_ranking = false;
    auto pipeline = [&](const char* name, const char* help, Analysis a, bool gt, bool ranking) {
        auto* sub = app.add_subcommand(name, help)->fallthrough();
        sub->callback([&, a, gt, ranking] {
            what = a;
            need_gt = gt;
            show_ranking = ranking;
        });
        return sub;
    };
    pipeline("score", "Train flows and write the pairwise IS matrix and scores", Analysis::none, false, false);
    pipeline("rank", "Score and print the model ranking", Analysis::none, false, true);
    pipeline("correlate", "Score and correlate the ranking with the ground truth", Analysis::none, true, true);
    pipeline("bootstrap", "Leave-one-out bootstrap of the ranking correlation", Analysis::bootstrap, true, false);
    pipeline("diagnose", "Jacobian probes, amplification and effective dimension", Analysis::diagnostics, false, false);
    pipeline("bound", "Generalization bound per pair", Analysis::bounds, false, false);
    pipeline("run", "Score and run every analysis enabled in the config", Analysis::all, false, true);

    auto* ablate = app.add_subcommand("ablate", "Ablations with the trained flows")->fallthrough();
    ablate->require_subcommand(1);
    for (auto [name, help, a] : {std::tuple{"shuffle", "Shuffle a fraction of U-V correspondences", Analysis::shuffle},
                                 std::tuple{"subsample", "Ranking stability on validation subsamples", Analysis::subsample},
                                 std::tuple{"aggregation", "Median, mean and trimmed-mean aggregation", Analysis::aggregation},
                                 std::tuple{"cond-only", "Conditional log-likelihood without the marginal", Analysis::cond_only},
                                 std::tuple{"perturb", "Weight perturbation robustness", Analysis::perturb}}) {
        auto* sub = ablate->add_subcommand(name, help)->fallthrough();
        sub->callback([&, a = a] { what = a; });
    }

    IngestArgs ingest_args;
    auto* ing = app.add_subcommand("ingest", "Convert a 2-D .npy array into an embedding container")->fallthrough();
    ing->add_option("input", ingest_args.input, "Input .npy file")->required()->check(CLI::ExistingFile);
    ing->add_option("--model-id", ingest_args.model_id, "Model identifier")->required();
    ing->add_option("--corpus-hash", ingest_args.corpus_hash, "Corpus identity string");
    ing->add_option("--corpus-file", ingest_args.corpus_file, "Corpus file to hash")->check(CLI::ExistingFile);

    SynthArgs synth_args;
    auto* syn = app.add_subcommand("synth", "Write a synthetic noise-ladder pool with ground truth")->fallthrough();
    syn->add_option("--dims", synth_args.dims, "Output dimension per model")->delimiter(',');
    syn->add_option("--noise", synth_args.noise, "Noise level per model")->delimiter(',');
    syn->add_option("--latent", synth_args.latent, "Latent dimension")->check(CLI::PositiveNumber);
    syn->add_option("--rows", synth_args.rows, "Corpus rows")->check(CLI::Range(2, 100000000));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }
    try {
        if (ing->parsed()) return ingest(g, ingest_args);
        if (syn->parsed()) return synth(g, synth_args);
        return run_command(g, what, need_gt, show_ranking);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "training failure: %s\n", e.what());
        return kTraining;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInternal;
    }
}
