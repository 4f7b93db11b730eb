#pragma once

#include "flowsuff/numcore/hash.hpp"
#include "flowsuff/numcore/parallel.hpp"
#include "flowsuff/sufficiency/is_matrix.hpp"
#include "flowsuff/training/split.hpp"
#include "flowsuff/training/trainer.hpp"

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace flowsuff {

/// Persistent storage for trained flows, keyed by a content hash of
/// everything that determines the training outcome.
class FlowStore {
public:
    virtual ~FlowStore() = default;
    virtual std::optional<TrainedFlow> load(const std::string& key) = 0;
    virtual void save(const std::string& key, const TrainedFlow& flow) = 0;
};

struct PoolConfig {
    TrainConfig marginal = TrainConfig::marginal_defaults();
    TrainConfig conditional = TrainConfig::conditional_defaults();
    double split_ratio = 0.9;
    std::uint64_t seed = 0;
    int jobs = 1;
};

struct MarginalResult {
    std::optional<FlowModel> model;
    TrainRecord record;
    Vector val_nll;  // per validation row
    std::string key;
    std::string error;
    bool cached = false;
    bool ok() const { return error.empty() && model.has_value(); }
};

struct PairResult {
    Index source = 0;
    Index target = 0;
    std::optional<FlowModel> model;
    TrainRecord record;
    EntropyEstimates estimates;
    Vector val_nll;  // per validation row, conditional flow
    std::string key;
    std::string error;
    bool cached = false;
    bool ok() const { return error.empty() && model.has_value(); }
};

struct PoolResult {
    ISMatrix matrix;
    SplitSpec split;
    std::vector<MarginalResult> marginals;
    std::vector<PairResult> pairs;  // source-major, diagonal skipped
    int trained_marginals = 0;
    int trained_conditionals = 0;

    const PairResult& pair(Index a, Index b) const {
        for (const auto& p : pairs)
            if (p.source == a && p.target == b) return p;
        throw ContractViolation("PoolResult::pair: no such pair");
    }
};

/// Pool precondition: at least two models, unique ids, identical row
/// count and corpus hash.
inline void validate_pool(const std::vector<EmbeddingSet>& pool) {
    if (pool.size() < 2) throw DataError("pool: need at least two models, got " + std::to_string(pool.size()));
    std::set<std::string> ids;
    for (const auto& e : pool) {
        if (!ids.insert(e.model_id).second) throw DataError("pool: duplicate model id '" + e.model_id + "'");
        if (e.rows() != pool.front().rows())
            throw AlignmentError("pool: '" + e.model_id + "' has " + std::to_string(e.rows()) + " rows, '" +
                                 pool.front().model_id + "' has " + std::to_string(pool.front().rows()));
        if (e.corpus_hash != pool.front().corpus_hash)
            throw AlignmentError("pool: corpus hash of '" + e.model_id + "' (" + e.corpus_hash +
                                 ") differs from '" + pool.front().model_id + "' (" + pool.front().corpus_hash + ")");
    }
}

inline std::uint64_t marginal_seed(std::uint64_t seed, const std::string& target) {
    return derive_seed(seed, 1, hash_string(target));
}

inline std::uint64_t conditional_seed(std::uint64_t seed, const std::string& source, const std::string& target) {
    return derive_seed(seed, 2, Fnv64().str(source).str(target).value());
}

/// Cache key of one training job.
inline std::string job_key(const TrainConfig& cfg, const SplitSpec& split, const EmbeddingSet& target,
                           const EmbeddingSet* source) {
    Fnv64 h;
    h.str("flowsuff-job-v1").str(cfg.to_json().dump()).u64(split.seed).u64(hash_string(std::to_string(split.ratio)));
    h.str(target.model_id).str(target.corpus_hash).matrix(target.values);
    if (source) h.str(source->model_id).matrix(source->values);
    return std::string(to_string(cfg.stage)) + "-" + h.hex();
}

/// Train every marginal (once per target) and every ordered conditional
/// pair, then fill the IS matrix. Training failures flag matrix entries;
/// configuration and data errors propagate.
inline PoolResult pairwise_is_matrix(const std::vector<EmbeddingSet>& pool, const PoolConfig& cfg,
                                     FlowStore* store = nullptr) {
    validate_pool(pool);
    cfg.marginal.validate();
    cfg.conditional.validate();
    FLOWSUFF_EXPECT(cfg.marginal.stage == Stage::marginal && cfg.conditional.stage == Stage::conditional,
                    "pairwise_is_matrix: stage tags do not match");
    const auto k = static_cast<Index>(pool.size());
    PoolResult out;
    out.split = split_dataset(pool.front(), cfg.split_ratio, cfg.seed);
    std::vector<Matrix> val(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) val[i] = pool[i].take(out.split.val);

    std::vector<std::string> ids;
    std::vector<Index> dims;
    for (const auto& e : pool) {
        ids.push_back(e.model_id);
        dims.push_back(e.dim());
    }
    out.matrix = ISMatrix::empty(ids, dims);

    out.marginals.resize(pool.size());
    std::vector<char> trained_marginal(pool.size(), 0);
    parallel_for(pool.size(), cfg.jobs, [&](std::size_t b) {
        auto& r = out.marginals[b];
        TrainConfig tc = cfg.marginal;
        tc.seed = marginal_seed(cfg.seed, pool[b].model_id);
        r.key = job_key(tc, out.split, pool[b], nullptr);
        std::optional<TrainedFlow> flow = store ? store->load(r.key) : std::nullopt;
        r.cached = flow.has_value();
        try {
            if (!flow) {
                flow = train_marginal(pool[b], out.split, tc);
                trained_marginal[b] = 1;
                if (store) store->save(r.key, *flow);
            }
            r.val_nll = per_sample_nll(flow->model, val[b]);
            r.record = flow->record;
            r.model = std::move(flow->model);
        } catch (const TrainingDivergence& e) {
            r.error = e.what();
        } catch (const DensityError& e) {
            r.error = e.what();
        }
    });
    for (char t : trained_marginal) out.trained_marginals += t;

    for (Index a = 0; a < k; ++a)
        for (Index b = 0; b < k; ++b)
            if (a != b) {
                auto& p = out.pairs.emplace_back();
                p.source = a;
                p.target = b;
            }
    std::vector<char> trained_pair(out.pairs.size(), 0);
    parallel_for(out.pairs.size(), cfg.jobs, [&](std::size_t i) {
        auto& p = out.pairs[i];
        const auto a = static_cast<std::size_t>(p.source), b = static_cast<std::size_t>(p.target);
        const auto& marg = out.marginals[b];
        if (!marg.ok()) {
            p.error = "marginal flow for '" + pool[b].model_id + "' failed: " + marg.error;
            return;
        }
        TrainConfig tc = cfg.conditional;
        tc.seed = conditional_seed(cfg.seed, pool[a].model_id, pool[b].model_id);
        p.key = job_key(tc, out.split, pool[b], &pool[a]) + "-" + marg.key;
        std::optional<TrainedFlow> flow = store ? store->load(p.key) : std::nullopt;
        p.cached = flow.has_value();
        try {
            if (!flow) {
                flow = train_conditional(pool[a], pool[b], *marg.model, out.split, tc);
                trained_pair[i] = 1;
                if (store) store->save(p.key, *flow);
            }
            p.val_nll = per_sample_nll(flow->model, val[b], &val[a]);
            p.estimates.h_v = marg.val_nll.mean();
            p.estimates.h_v_given_u = p.val_nll.mean();
            p.estimates.is = p.estimates.h_v - p.estimates.h_v_given_u;
            if (!std::isfinite(p.estimates.is)) throw DensityError("non-finite IS estimate", -1);
            p.record = flow->record;
            p.model = std::move(flow->model);
        } catch (const TrainingDivergence& e) {
            p.error = e.what();
        } catch (const DensityError& e) {
            p.error = e.what();
        }
    });
    for (char t : trained_pair) out.trained_conditionals += t;

    for (const auto& p : out.pairs) {
        if (p.ok())
            out.matrix.set(p.source, p.target, p.estimates.is);
        else
            out.matrix.flag(p.source, p.target, p.error);
    }
    return out;
}

}  // namespace flowsuff
