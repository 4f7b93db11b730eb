#pragma once

#include "flowsuff/flow/spline.hpp"
#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/mlp.hpp"
#include "flowsuff/numcore/param.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace flowsuff {

/// Fixed per-dimension affine map x -> (x - mean) / scale. Columns are samples.
struct Standardizer {
    Vector mean;
    Vector scale;

    static Standardizer identity(Index d) { return {Vector::Zero(d), Vector::Ones(d)}; }

    /// Fit on a d x n batch. Dimensions with (near) zero spread keep scale 1.
    static Standardizer fit(const Matrix& x) {
        FLOWSUFF_EXPECT(x.cols() >= 2, "Standardizer::fit needs at least two samples");
        Standardizer s;
        const double n = static_cast<double>(x.cols());
        s.mean = x.rowwise().sum() / n;
        s.scale.resize(x.rows());
        for (Index i = 0; i < x.rows(); ++i) {
            const double var = (x.row(i).array() - s.mean(i)).square().sum() / n;
            const double sd = std::sqrt(var);
            s.scale(i) = sd > 1e-12 ? sd : 1.0;
        }
        return s;
    }

    Index dim() const { return mean.size(); }

    Matrix apply(const Matrix& x) const {
        return ((x.colwise() - mean).array().colwise() / scale.array()).matrix();
    }

    Matrix invert(const Matrix& z) const {
        return ((z.array().colwise() * scale.array()).matrix().colwise() + mean);
    }

    /// log|det| of apply().
    double log_abs_det() const { return -scale.array().log().sum(); }
};

/// Per-dimension affine layer y = exp(log_scale) * x + shift with
/// data-dependent initialization.
struct ActNormLayer {
    ParamTensor log_scale;
    ParamTensor shift;
    bool initialized = false;

    ActNormLayer() = default;
    ActNormLayer(Index d, const std::string& prefix)
        : log_scale(prefix + ".log_scale", Matrix::Zero(d, 1)), shift(prefix + ".shift", Matrix::Zero(d, 1)) {}

    Index dim() const { return log_scale.value.rows(); }
    Vector scale() const { return log_scale.value.col(0).array().exp(); }

    /// Set parameters so that this batch leaves with zero mean and unit variance.
    void initialize(const Matrix& batch) {
        const auto s = Standardizer::fit(batch);
        for (Index i = 0; i < dim(); ++i) {
            const double sd = std::max(s.scale(i), 1e-6);
            log_scale.value(i, 0) = -std::log(sd);
            shift.value(i, 0) = -s.mean(i) / sd;
        }
        initialized = true;
    }

    Matrix forward(const Matrix& x) const {
        return ((x.array().colwise() * scale().array()).matrix().colwise() + shift.value.col(0));
    }
    Matrix inverse(const Matrix& y) const {
        return ((y.colwise() - shift.value.col(0)).array().colwise() / scale().array()).matrix();
    }
    double log_abs_det() const { return log_scale.value.sum(); }
};

/// Fixed coordinate permutation: y[i] = x[perm[i]].
struct Permutation {
    std::vector<int> perm;

    Matrix forward(const Matrix& x) const {
        Matrix y(x.rows(), x.cols());
        for (std::size_t i = 0; i < perm.size(); ++i) y.row(static_cast<Index>(i)) = x.row(perm[i]);
        return y;
    }
    Matrix inverse(const Matrix& y) const {
        Matrix x(y.rows(), y.cols());
        for (std::size_t i = 0; i < perm.size(); ++i) x.row(perm[i]) = y.row(static_cast<Index>(i));
        return x;
    }
    bool is_identity() const {
        for (std::size_t i = 0; i < perm.size(); ++i)
            if (perm[i] != static_cast<int>(i)) return false;
        return true;
    }
};

/// Rational-quadratic spline coupling: coordinates in `transform_idx` are
/// pushed through splines whose knots are emitted by `net` from the
/// coordinates in `identity_idx`.
struct CouplingLayer {
    std::vector<int> identity_idx;
    std::vector<int> transform_idx;
    Mlp net;
    SplineConfig spline;

    Matrix gather(const Matrix& x, const std::vector<int>& idx) const {
        Matrix out(static_cast<Index>(idx.size()), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = x.row(idx[i]);
        return out;
    }
};

/// Low-rank residual conditioning: the shared projection A maps the
/// standardized source embedding to a rank-r code, and a per-coupling B maps
/// the code into that coupling's spline-parameter output, added to the
/// network's prediction.
struct LowRankConditioner {
    Index source_dim = 0;
    Index rank = 0;
    Standardizer source_standardizer;
    ParamTensor A;               // rank x source_dim
    std::vector<ParamTensor> B;  // per coupling: output_dim x rank

    Matrix code(const Matrix& u) const {
        FLOWSUFF_EXPECT(u.rows() == source_dim, "conditioner: source dimension mismatch");
        return A.value * source_standardizer.apply(u);
    }
};

}  // namespace flowsuff
