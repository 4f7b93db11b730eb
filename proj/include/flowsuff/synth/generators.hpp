#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/embedding.hpp"
#include "flowsuff/numcore/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace flowsuff {

struct CorrelatedGaussians {
    EmbeddingSet U;
    EmbeddingSet V;
    double true_mi = 0.0;  // nats
};

/// Jointly Gaussian (U, V) with unit marginals and corr(U_i, V_i) = rho for
/// i < min(d_u, d_v); all other pairs independent.
inline CorrelatedGaussians gen_correlated_gaussians(Index n, Index d_u, Index d_v, double rho, RngStream& rng,
                                                    const std::string& corpus = "gauss") {
    FLOWSUFF_EXPECT(std::abs(rho) < 1.0, "gen_correlated_gaussians: |rho| must be < 1");
    FLOWSUFF_EXPECT(n >= 1 && d_u >= 1 && d_v >= 1, "gen_correlated_gaussians: sizes must be positive");
    CorrelatedGaussians out;
    out.U.model_id = "U";
    out.V.model_id = "V";
    out.U.corpus_hash = out.V.corpus_hash = corpus;
    out.U.values = rng.normal_matrix(d_u, n);
    out.V.values = rng.normal_matrix(d_v, n);
    const double c = std::sqrt(1.0 - rho * rho);
    const Index shared = std::min(d_u, d_v);
    out.V.values.topRows(shared) = rho * out.U.values.topRows(shared) + c * out.V.values.topRows(shared);
    out.true_mi = -0.5 * static_cast<double>(shared) * std::log1p(-rho * rho);
    return out;
}

struct SyntheticPoolSpec {
    Index latent_dim = 2;
    std::vector<Index> output_dims;   // one per model
    std::vector<double> noise_levels;  // one per model; lower = better
    Index rows = 2000;
    std::uint64_t seed = 0;
};

struct SyntheticPool {
    std::vector<EmbeddingSet> models;
    std::vector<double> quality;  // -noise level
    bool ground_truth_tied = false;
};

/// Every model sees the same latent draw per row: x_i = W_i z + sigma_i * eps.
inline SyntheticPool gen_synthetic_pool(const SyntheticPoolSpec& spec) {
    FLOWSUFF_EXPECT(spec.output_dims.size() == spec.noise_levels.size(), "synthetic pool: dims/noise length mismatch");
    FLOWSUFF_EXPECT(spec.output_dims.size() >= 2, "synthetic pool: need at least two models");
    FLOWSUFF_EXPECT(spec.latent_dim >= 1 && spec.rows >= 2, "synthetic pool: invalid sizes");
    RngStream root(spec.seed);
    RngStream latent_rng = root.split(0);
    const Matrix z = latent_rng.normal_matrix(spec.latent_dim, spec.rows);
    const std::string corpus = "synthetic-" + std::to_string(spec.seed);
    SyntheticPool pool;
    for (std::size_t i = 0; i < spec.output_dims.size(); ++i) {
        const Index d = spec.output_dims[i];
        FLOWSUFF_EXPECT(d >= 1, "synthetic pool: output dims must be positive");
        FLOWSUFF_EXPECT(spec.noise_levels[i] >= 0.0, "synthetic pool: noise must be non-negative");
        RngStream rng = root.split(1, i);
        const Matrix W = rng.normal_matrix(d, spec.latent_dim) / std::sqrt(static_cast<double>(spec.latent_dim));
        EmbeddingSet e;
        e.model_id = "model_" + std::to_string(i);
        e.corpus_hash = corpus;
        e.values = W * z + spec.noise_levels[i] * rng.normal_matrix(d, spec.rows);
        pool.models.push_back(std::move(e));
        pool.quality.push_back(-spec.noise_levels[i]);
    }
    pool.ground_truth_tied =
        std::adjacent_find(spec.noise_levels.begin(), spec.noise_levels.end(), std::not_equal_to<>()) ==
        spec.noise_levels.end();
    return pool;
}

}  // namespace flowsuff
