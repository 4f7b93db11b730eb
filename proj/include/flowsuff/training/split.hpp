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

struct SplitSpec {
    std::vector<int> train;
    std::vector<int> val;
    double ratio = 0.9;
    std::uint64_t seed = 0;
};

/// Deterministic shuffled train/validation split of n corpus rows.
inline SplitSpec split_rows(Index n, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must lie in (0, 1)");
    const auto n_train = static_cast<Index>(std::llround(ratio * static_cast<double>(n)));
    if (n_train < 1 || n_train > n - 1)
        throw DataError("split: " + std::to_string(n) + " rows cannot fill both splits at ratio " +
                        std::to_string(ratio));
    RngStream rng = RngStream(seed).split(0x5b117ULL);
    auto perm = rng.permutation(static_cast<std::size_t>(n));
    SplitSpec s;
    s.ratio = ratio;
    s.seed = seed;
    s.train.assign(perm.begin(), perm.begin() + n_train);
    s.val.assign(perm.begin() + n_train, perm.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

inline SplitSpec split_dataset(const EmbeddingSet& emb, double ratio, std::uint64_t seed) {
    return split_rows(emb.rows(), ratio, seed);
}

}  // namespace flowsuff
