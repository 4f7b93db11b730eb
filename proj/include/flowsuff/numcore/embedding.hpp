#pragma once

#include "flowsuff/numcore/common.hpp"

#include <string>
#include <vector>

namespace flowsuff {

/// Embeddings of one model over a corpus. Stored d x n (column = corpus row),
/// which has the same memory layout as the row-major n x d file payload.
struct EmbeddingSet {
    std::string model_id;
    std::string corpus_hash;
    Matrix values;

    Index rows() const noexcept { return values.cols(); }
    Index dim() const noexcept { return values.rows(); }

    /// Columns for the given corpus rows (d x idx.size()).
    Matrix take(const std::vector<int>& idx) const {
        Matrix out(values.rows(), static_cast<Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            FLOWSUFF_EXPECT(idx[i] >= 0 && idx[i] < values.cols(), "EmbeddingSet::take: row out of range");
            out.col(static_cast<Index>(i)) = values.col(idx[i]);
        }
        return out;
    }

    static EmbeddingSet from_rows(std::string id, const Matrix& n_by_d, std::string corpus = {}) {
        return {std::move(id), std::move(corpus), n_by_d.transpose()};
    }
};

}  // namespace flowsuff
