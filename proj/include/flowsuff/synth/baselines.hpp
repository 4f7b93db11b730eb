#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/embedding.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace flowsuff {

/// log of the mean Gaussian potential exp(-t ||x - y||^2) over distinct
/// pairs of L2-normalized rows; lower = more uniform.
inline double uniformity_loss(const Matrix& values, double t = 2.0) {
    if (!(t > 0.0)) throw ConfigError("uniformity: t must be positive");
    const Index n = values.cols();
    if (n < 2) throw DataError("uniformity: need at least two rows");
    Matrix x = values;
    for (Index i = 0; i < n; ++i) {
        const double norm = x.col(i).norm();
        if (!(norm > 0.0) || !std::isfinite(norm)) throw DataError("uniformity: row " + std::to_string(i) + " cannot be normalized");
        x.col(i) /= norm;
    }
    // log-sum-exp over pairs i < j, processed in column blocks of the Gram matrix
    constexpr Index block = 512;
    double max_e = -std::numeric_limits<double>::infinity();
    double acc = 0.0;
    for (Index j0 = 0; j0 < n; j0 += block) {
        const Index bj = std::min(block, n - j0);
        const Matrix g = x.leftCols(j0 + bj).transpose() * x.middleCols(j0, bj);
        for (Index jj = 0; jj < bj; ++jj) {
            const Index j = j0 + jj;
            for (Index i = 0; i < j; ++i) {
                const double sq = std::max(0.0, 2.0 - 2.0 * g(i, jj));
                const double e = -t * sq;
                if (e > max_e) {
                    acc = acc * std::exp(max_e - e) + 1.0;
                    max_e = e;
                } else {
                    acc += std::exp(e - max_e);
                }
            }
        }
    }
    const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
    return max_e + std::log(acc) - std::log(pairs);
}

/// Ranking score: negated loss so that higher = more uniform.
inline double uniformity_score(const EmbeddingSet& emb, double t = 2.0) { return -uniformity_loss(emb.values, t); }

struct GaussianMI {
    double value = 0.0;  // nats
    bool regularized = false;
};

namespace detail {

inline Vector covariance_spectrum(const Matrix& cov) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseMax(0.0);
}

inline bool near_singular(const Vector& ev) { return ev.minCoeff() <= 1e-12 * std::max(ev.maxCoeff(), 1.0); }

inline double log_det(const Vector& ev, double ridge) { return (ev.array() + ridge).log().sum(); }

}  // namespace detail

/// Closed-form mutual information of (U, V) under a joint Gaussian fit:
/// 0.5 log(det S_U det S_V / det S_joint). Near-singular covariances get a
/// 1e-8 ridge and are flagged.
inline GaussianMI gaussian_mi_closed_form(const Matrix& u, const Matrix& v) {
    if (u.cols() != v.cols()) throw AlignmentError("gaussian_mi: U and V row counts differ");
    const Index n = u.cols();
    if (n < 2) throw DataError("gaussian_mi: need at least two rows");
    Matrix joint(u.rows() + v.rows(), n);
    joint.topRows(u.rows()) = u;
    joint.bottomRows(v.rows()) = v;
    const Matrix c = joint.colwise() - joint.rowwise().mean();
    const Matrix cov = c * c.transpose() / static_cast<double>(n - 1);
    const Index du = u.rows(), dv = v.rows();
    GaussianMI out;
    const Vector eu = detail::covariance_spectrum(cov.topLeftCorner(du, du));
    const Vector ev = detail::covariance_spectrum(cov.bottomRightCorner(dv, dv));
    const Vector ej = detail::covariance_spectrum(cov);
    out.regularized = detail::near_singular(eu) || detail::near_singular(ev) || detail::near_singular(ej);
    const double ridge = out.regularized ? 1e-8 : 0.0;
    out.value = 0.5 * (detail::log_det(eu, ridge) + detail::log_det(ev, ridge) - detail::log_det(ej, ridge));
    return out;
}

inline GaussianMI gaussian_mi_closed_form(const EmbeddingSet& u, const EmbeddingSet& v) {
    return gaussian_mi_closed_form(u.values, v.values);
}

}  // namespace flowsuff
