#pragma once

#include "flowsuff/numcore/common.hpp"

#include <string>
#include <utility>
#include <vector>

namespace flowsuff {

/// A trainable tensor with its gradient accumulator. Vectors are stored as
/// single-column matrices.
struct ParamTensor {
    std::string name;
    Matrix value;
    Matrix grad;

    ParamTensor() = default;
    ParamTensor(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
        grad = Matrix::Zero(value.rows(), value.cols());
    }

    Index size() const noexcept { return value.size(); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    bool finite() const { return value.allFinite(); }
};

using ParamList = std::vector<ParamTensor*>;
using ConstParamList = std::vector<const ParamTensor*>;

inline void zero_grads(const ParamList& params) {
    for (auto* p : params) p->zero_grad();
}

inline std::size_t total_size(const ParamList& params) {
    std::size_t n = 0;
    for (const auto* p : params) n += static_cast<std::size_t>(p->size());
    return n;
}

/// Copy parameter values into a flat snapshot (and back).
inline std::vector<Matrix> snapshot(const ParamList& params) {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const auto* p : params) out.push_back(p->value);
    return out;
}

inline void restore(const ParamList& params, const std::vector<Matrix>& values) {
    FLOWSUFF_EXPECT(params.size() == values.size(), "restore: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        FLOWSUFF_EXPECT(params[i]->value.rows() == values[i].rows() &&
                            params[i]->value.cols() == values[i].cols(),
                        "restore: shape mismatch for " + params[i]->name);
        params[i]->value = values[i];
    }
}

/// Round every value to the nearest float32 so serialized checkpoints reload
/// bit-identically.
inline void round_to_f32(const ParamList& params) {
    for (auto* p : params) p->value = p->value.cast<float>().cast<double>();
}

}  // namespace flowsuff
