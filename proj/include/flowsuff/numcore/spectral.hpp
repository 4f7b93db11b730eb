#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/rng.hpp"

#include <cmath>
#include <functional>

namespace flowsuff {

using LinearMap = std::function<Vector(const Vector&)>;

struct SpectralProbe {
    double norm = 0.0;
    Vector direction;     // dominant right singular vector (unit), zero if the map is zero
    bool zero_map = false;
    bool converged = true;
    int iterations = 0;
};

/// Materialize a map on R^dim column by column (dim probes of the basis).
inline Matrix materialize(const LinearMap& apply, Index dim) {
    FLOWSUFF_EXPECT(dim > 0, "materialize: dim must be positive");
    Vector e = Vector::Zero(dim);
    e(0) = 1.0;
    Vector first = apply(e);
    Matrix M(first.size(), dim);
    M.col(0) = first;
    for (Index j = 1; j < dim; ++j) {
        e.setZero();
        e(j) = 1.0;
        M.col(j) = apply(e);
    }
    return M;
}

/// Power iteration on M^T M from a random start. Returns ||M v|| for the final
/// unit iterate v.
inline SpectralProbe spectral_norm_of(const Matrix& M, int iters, RngStream& rng, double tol = 1e-3) {
    SpectralProbe out;
    Vector v = rng.unit_vector(M.cols());
    double prev = 0.0;
    for (int k = 0; k < iters; ++k) {
        Vector w = M.transpose() * (M * v);
        const double n = w.norm();
        if (n == 0.0) {
            out.zero_map = true;
            out.norm = 0.0;
            out.direction = Vector::Zero(M.cols());
            out.iterations = k + 1;
            return out;
        }
        v = w / n;
        const double est = (M * v).norm();
        out.converged = prev > 0.0 && std::abs(est - prev) <= tol * est;
        prev = est;
        out.iterations = k + 1;
    }
    out.norm = (M * v).norm();
    out.direction = v;
    return out;
}

/// Estimate the operator 2-norm of a linear (or locally linearized) map.
inline SpectralProbe spectral_norm_probe(const LinearMap& apply, Index dim, int iters, RngStream& rng) {
    FLOWSUFF_EXPECT(iters >= 10, "spectral_norm_probe: iters must be >= 10");
    return spectral_norm_of(materialize(apply, dim), iters, rng);
}

/// Orthonormal basis of the top-k right singular subspace via block power
/// iteration with QR re-orthogonalization.
inline Matrix top_singular_subspace(const Matrix& M, Index k, int iters, RngStream& rng) {
    const Index d = M.cols();
    FLOWSUFF_EXPECT(k >= 1 && k <= d, "top_singular_subspace: invalid k");
    Matrix Q = rng.normal_matrix(d, k);
    const Matrix G = M.transpose() * M;
    for (int it = 0; it < iters; ++it) {
        Eigen::HouseholderQR<Matrix> qr(G * Q);
        Q = qr.householderQ() * Matrix::Identity(d, k);
    }
    Eigen::HouseholderQR<Matrix> qr(Q);
    return qr.householderQ() * Matrix::Identity(d, k);
}

/// Cosines of the principal angles between span(A) and span(B) (orthonormal
/// columns), in descending order.
inline Vector principal_angle_cosines(const Matrix& A, const Matrix& B) {
    Eigen::JacobiSVD<Matrix> svd(A.transpose() * B);
    return svd.singularValues().cwiseMin(1.0);
}

}  // namespace flowsuff
