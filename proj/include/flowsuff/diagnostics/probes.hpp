#pragma once

#include "flowsuff/flow/flow_model.hpp"
#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/embedding.hpp"
#include "flowsuff/numcore/rng.hpp"
#include "flowsuff/numcore/spectral.hpp"

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace flowsuff {

/// A layer evaluated on a d x n batch (columns are points).
using BatchMap = std::function<Matrix(const Matrix&)>;

namespace detail {

inline void check_probe(const Matrix& x, int layer) {
    if (!x.allFinite())
        throw DensityError("probe: non-finite output at layer " + std::to_string(layer), layer);
}

inline double geometric_mean(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += std::log(x);
    return std::exp(s / static_cast<double>(v.size()));
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Central-difference directional derivative (f(y + eps u) - f(y - eps u)) / 2 eps.
inline Vector jacobian_jvp(const BatchMap& f, const Vector& y, const Vector& u, double eps = 1e-4, int layer = -1) {
    FLOWSUFF_EXPECT(eps > 0.0, "jacobian_jvp: eps must be positive");
    FLOWSUFF_EXPECT(std::abs(u.norm() - 1.0) < 1e-8, "jacobian_jvp: direction must be unit norm");
    Matrix pts(y.size(), 2);
    pts.col(0) = y + eps * u;
    pts.col(1) = y - eps * u;
    const Matrix out = f(pts);
    detail::check_probe(out, layer);
    return (out.col(0) - out.col(1)) / (2.0 * eps);
}

/// Full finite-difference Jacobian from one batched evaluation of 2d points.
inline Matrix fd_jacobian(const BatchMap& f, const Vector& y, double eps = 1e-4, int layer = -1) {
    FLOWSUFF_EXPECT(eps > 0.0, "fd_jacobian: eps must be positive");
    const Index d = y.size();
    Matrix pts(d, 2 * d);
    for (Index j = 0; j < d; ++j) {
        pts.col(2 * j) = y;
        pts.col(2 * j + 1) = y;
        pts(j, 2 * j) += eps;
        pts(j, 2 * j + 1) -= eps;
    }
    const Matrix out = f(pts);
    detail::check_probe(out, layer);
    Matrix J(out.rows(), d);
    for (Index j = 0; j < d; ++j) J.col(j) = (out.col(2 * j) - out.col(2 * j + 1)) / (2.0 * eps);
    return J;
}

struct JacobianProbe {
    int layer = -1;
    Vector point;
    Vector direction;        // dominant right singular vector of J
    double norm_j = 0.0;     // ||J||_2
    double norm_delta = 0.0; // ||J - R||_2, R = I (or the permutation itself)
    double eps = 1e-4;
    int iterations = 0;
    bool converged = false;
};

inline JacobianProbe probe_layer(const BatchMap& f, const Vector& y, RngStream& rng, int layer = -1,
                                 double eps = 1e-4, int iters = 500, const Matrix* reference = nullptr) {
    JacobianProbe p;
    p.layer = layer;
    p.point = y;
    p.eps = eps;
    const Matrix J = fd_jacobian(f, y, eps, layer);
    const auto top = spectral_norm_of(J, iters, rng);
    p.direction = top.direction;
    p.norm_j = top.norm;
    p.iterations = top.iterations;
    p.converged = top.converged || top.zero_map;
    const Matrix delta = reference ? Matrix(J - *reference) : Matrix(J - Matrix::Identity(J.rows(), J.cols()));
    p.norm_delta = delta.isZero(0.0) ? 0.0 : spectral_norm_of(delta, iters, rng).norm;
    return p;
}

/// Atomic transforms of a flow with the inputs each one sees for a set of
/// probe points (in standardized coordinates).
class FlowLayers {
public:
    FlowLayers(const FlowModel& model, const Matrix& v_points, const Matrix* u_points = nullptr) : model_(&model) {
        FLOWSUFF_EXPECT(!model.conditional() || u_points, "FlowLayers: conditional flow needs source points");
        if (model.conditional()) code_ = model.source_code(u_points, v_points.cols());
        Matrix x = model.standardizer().apply(v_points);
        for (int i = 0; i < model.atomic_count(); ++i) {
            inputs_.push_back(x);
            x = model.apply_atomic(i, x, code_);
        }
        outputs_ = x;
    }

    int count() const { return static_cast<int>(inputs_.size()); }
    Index points() const { return inputs_.empty() ? 0 : inputs_.front().cols(); }
    AtomicKind kind(int layer) const { return FlowModel::atomic_kind(layer); }
    Vector input(int layer, Index point) const { return inputs_[static_cast<std::size_t>(layer)].col(point); }

    /// The layer as a batch map; conditioning uses the code of `point`.
    BatchMap map(int layer, Index point) const {
        const FlowModel* m = model_;
        Vector c;
        if (code_.size() > 0) c = code_.col(point);
        return [m, layer, c](const Matrix& y) {
            if (c.size() == 0) return m->apply_atomic(layer, y);
            const Matrix code = c.replicate(1, y.cols());
            return m->apply_atomic(layer, y, code);
        };
    }

    /// All atomic transforms composed (standardized input to latent).
    BatchMap composite(Index point) const {
        return [this, point](const Matrix& y) {
            Matrix x = y;
            for (int i = 0; i < count(); ++i) x = map(i, point)(x);
            return x;
        };
    }

    Matrix reference(int layer) const {
        const Index d = model_->dim();
        if (kind(layer) != AtomicKind::permutation) return Matrix::Identity(d, d);
        return model_->apply_atomic(layer, Matrix::Identity(d, d));
    }

private:
    const FlowModel* model_;
    Matrix code_;
    std::vector<Matrix> inputs_;
    Matrix outputs_;
};

struct DirectionStats {
    int dim = 0;
    int layers = 0;
    int points = 0;
    int pairs = 0;
    double mean_abs_cos = 0.0;
    double max_abs_cos = 0.0;
    double se_abs_cos = 0.0;           // standard error of the mean over pairs
    double baseline = 0.0;             // 1 / sqrt(d)
    double ratio = 0.0;                // mean / baseline
    double random_expectation = 0.0;   // E|cos| of independent uniform directions
    std::vector<std::vector<double>> principal_angles_deg;  // adjacent layers, ascending
    std::vector<int> flagged_layers;   // power iteration did not converge

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["dim"] = dim;
        j["layers"] = layers;
        j["points"] = points;
        j["pairs"] = pairs;
        j["mean_abs_cos"] = mean_abs_cos;
        j["max_abs_cos"] = max_abs_cos;
        j["se_abs_cos"] = se_abs_cos;
        j["baseline"] = baseline;
        j["ratio"] = ratio;
        j["random_expectation"] = random_expectation;
        j["principal_angles_deg"] = principal_angles_deg;
        j["flagged_layers"] = flagged_layers;
        return j;
    }
};

/// Expected |cos| between two independent uniform directions in R^d.
inline double random_abs_cos_expectation(Index d) {
    if (d == 1) return 1.0;
    return std::exp(std::lgamma(0.5 * static_cast<double>(d)) - std::lgamma(0.5 * static_cast<double>(d - 1) + 1.0)) /
           std::sqrt(std::numbers::pi);
}

/// Direction statistics from per-point, per-layer Jacobians.
inline DirectionStats direction_stats(const std::vector<std::vector<Matrix>>& jacobians, RngStream& rng,
                                      Index subspace_k = 3, int iters = 500) {
    FLOWSUFF_EXPECT(!jacobians.empty() && jacobians.front().size() >= 2, "direction_stats: need >= 2 layers");
    DirectionStats s;
    const std::size_t layers = jacobians.front().size();
    const Index d = jacobians.front().front().cols();
    s.dim = static_cast<int>(d);
    s.layers = static_cast<int>(layers);
    s.points = static_cast<int>(jacobians.size());
    s.baseline = 1.0 / std::sqrt(static_cast<double>(d));
    s.random_expectation = random_abs_cos_expectation(d);
    const Index k = std::min<Index>(subspace_k, d);
    std::vector<double> cosines;
    std::vector<char> flagged(layers, 0);
    std::vector<std::vector<double>> angles(layers - 1, std::vector<double>(static_cast<std::size_t>(k), 0.0));
    for (const auto& per_layer : jacobians) {
        FLOWSUFF_EXPECT(per_layer.size() == layers, "direction_stats: ragged layer lists");
        std::vector<Vector> dirs;
        std::vector<Matrix> subspaces;
        for (std::size_t l = 0; l < layers; ++l) {
            const auto top = spectral_norm_of(per_layer[l], iters, rng);
            if (!top.converged && !top.zero_map) flagged[l] = 1;
            dirs.push_back(top.direction);
            subspaces.push_back(top_singular_subspace(per_layer[l], k, iters, rng));
        }
        for (std::size_t a = 0; a < layers; ++a)
            for (std::size_t b = a + 1; b < layers; ++b) cosines.push_back(std::abs(dirs[a].dot(dirs[b])));
        for (std::size_t l = 0; l + 1 < layers; ++l) {
            Vector c = principal_angle_cosines(subspaces[l], subspaces[l + 1]);
            std::vector<double> deg;
            for (Index i = 0; i < c.size(); ++i) deg.push_back(std::acos(std::clamp(c(i), 0.0, 1.0)) * 180.0 / std::numbers::pi);
            std::sort(deg.begin(), deg.end());
            for (std::size_t i = 0; i < deg.size(); ++i) angles[l][i] += deg[i] / static_cast<double>(jacobians.size());
        }
    }
    s.pairs = static_cast<int>(cosines.size());
    double sum = 0.0;
    for (double c : cosines) {
        sum += c;
        s.max_abs_cos = std::max(s.max_abs_cos, c);
    }
    s.mean_abs_cos = sum / static_cast<double>(cosines.size());
    double ss = 0.0;
    for (double c : cosines) ss += (c - s.mean_abs_cos) * (c - s.mean_abs_cos);
    if (cosines.size() > 1) s.se_abs_cos = std::sqrt(ss / static_cast<double>(cosines.size() - 1)) / std::sqrt(static_cast<double>(cosines.size()));
    s.ratio = s.mean_abs_cos / s.baseline;
    s.principal_angles_deg = std::move(angles);
    for (std::size_t l = 0; l < layers; ++l)
        if (flagged[l]) s.flagged_layers.push_back(static_cast<int>(l));
    return s;
}

/// Generic form: every layer is probed at every point.
inline DirectionStats layer_direction_stats(const std::vector<BatchMap>& layers, const std::vector<Vector>& points,
                                            RngStream& rng, double eps = 1e-4) {
    FLOWSUFF_EXPECT(layers.size() >= 2, "layer_direction_stats: need >= 2 layers");
    FLOWSUFF_EXPECT(!points.empty(), "layer_direction_stats: need probe points");
    std::vector<std::vector<Matrix>> jac;
    for (const auto& y : points) {
        std::vector<Matrix> row;
        for (std::size_t l = 0; l < layers.size(); ++l) row.push_back(fd_jacobian(layers[l], y, eps, static_cast<int>(l)));
        jac.push_back(std::move(row));
    }
    return direction_stats(jac, rng);
}

/// Coupling layers of a flow, probed at the inputs they see for each point.
inline DirectionStats layer_direction_stats(const FlowModel& model, const Matrix& v_points, const Matrix* u_points,
                                            RngStream& rng, double eps = 1e-4) {
    const FlowLayers fl(model, v_points, u_points);
    std::vector<std::vector<Matrix>> jac;
    for (Index p = 0; p < fl.points(); ++p) {
        std::vector<Matrix> row;
        for (int l = 0; l < fl.count(); ++l)
            if (fl.kind(l) == AtomicKind::coupling) row.push_back(fd_jacobian(fl.map(l, p), fl.input(l, p), eps, l));
        jac.push_back(std::move(row));
    }
    return direction_stats(jac, rng);
}

struct LayerBehavior {
    double mean_displacement = 0.0;    // coupling layers, ||f(y) - y|| / ||y||
    double median_displacement = 0.0;
    double max_displacement = 0.0;
    std::vector<double> layer_amplification;  // geometric mean per atomic transform
    double geo_mean_amplification = 1.0;      // over all atomic transforms
    double coupling_geo_mean_amplification = 1.0;
    int skipped_points = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["mean_displacement"] = mean_displacement;
        j["median_displacement"] = median_displacement;
        j["max_displacement"] = max_displacement;
        j["layer_amplification"] = layer_amplification;
        j["geo_mean_amplification"] = geo_mean_amplification;
        j["coupling_geo_mean_amplification"] = coupling_geo_mean_amplification;
        j["skipped_points"] = skipped_points;
        return j;
    }
};

inline LayerBehavior layer_displacement_and_amplification(const FlowModel& model, const Matrix& v_points,
                                                          const Matrix* u_points, RngStream& rng,
                                                          int directions = 3, double eps = 0.01) {
    FLOWSUFF_EXPECT(directions >= 1 && eps > 0.0, "layer behavior: invalid probe settings");
    const FlowLayers fl(model, v_points, u_points);
    LayerBehavior out;
    std::vector<double> disp, all_amp, coupling_amp;
    for (int l = 0; l < fl.count(); ++l) {
        std::vector<double> amps;
        for (Index p = 0; p < fl.points(); ++p) {
            const Vector y = fl.input(l, p);
            const auto f = fl.map(l, p);
            Matrix pts(y.size(), directions + 1);
            pts.col(0) = y;
            for (int k = 0; k < directions; ++k) pts.col(k + 1) = y + eps * rng.unit_vector(y.size());
            const Matrix fy = f(pts);
            detail::check_probe(fy, l);
            for (int k = 0; k < directions; ++k) amps.push_back((fy.col(k + 1) - fy.col(0)).norm() / eps);
            if (fl.kind(l) == AtomicKind::coupling) {
                const double n = y.norm();
                if (n == 0.0) {
                    ++out.skipped_points;
                    continue;
                }
                disp.push_back((fy.col(0) - y).norm() / n);
            }
        }
        const double g = detail::geometric_mean(amps);
        out.layer_amplification.push_back(g);
        all_amp.insert(all_amp.end(), amps.begin(), amps.end());
        if (fl.kind(l) == AtomicKind::coupling) coupling_amp.insert(coupling_amp.end(), amps.begin(), amps.end());
    }
    if (!disp.empty()) {
        double s = 0.0;
        for (double x : disp) s += x;
        out.mean_displacement = s / static_cast<double>(disp.size());
        out.median_displacement = detail::median_of(disp);
        out.max_displacement = *std::max_element(disp.begin(), disp.end());
    }
    out.geo_mean_amplification = detail::geometric_mean(all_amp);
    out.coupling_geo_mean_amplification = detail::geometric_mean(coupling_amp);
    return out;
}

struct AmplificationStats {
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double max = 0.0;
    int probes = 0;
    std::vector<double> samples;

    nlohmann::ordered_json to_json() const {
        return {{"mean", mean}, {"std", stddev}, {"min", min}, {"max", max}, {"probes", probes}};
    }
};

/// End-to-end ||T(y + eps u) - T(y)|| / eps through all atomic transforms.
inline AmplificationStats total_amplification(const FlowModel& model, const Matrix& v_points, const Matrix* u_points,
                                              RngStream& rng, double eps = 0.01, int directions = 3) {
    FLOWSUFF_EXPECT(eps > 0.0 && directions >= 1, "total_amplification: invalid probe settings");
    const FlowLayers fl(model, v_points, u_points);
    AmplificationStats s;
    for (Index p = 0; p < fl.points(); ++p) {
        const Vector y = fl.input(0, p);
        Matrix pts(y.size(), directions + 1);
        pts.col(0) = y;
        for (int k = 0; k < directions; ++k) pts.col(k + 1) = y + eps * rng.unit_vector(y.size());
        const Matrix out = fl.composite(p)(pts);
        detail::check_probe(out, -1);
        for (int k = 0; k < directions; ++k) s.samples.push_back((out.col(k + 1) - out.col(0)).norm() / eps);
    }
    s.probes = static_cast<int>(s.samples.size());
    s.min = *std::min_element(s.samples.begin(), s.samples.end());
    s.max = *std::max_element(s.samples.begin(), s.samples.end());
    double sum = 0.0;
    for (double x : s.samples) sum += x;
    s.mean = sum / s.probes;
    double ss = 0.0;
    for (double x : s.samples) ss += (x - s.mean) * (x - s.mean);
    s.stddev = s.probes > 1 ? std::sqrt(ss / (s.probes - 1)) : 0.0;
    return s;
}

/// sigma^n: the compounded amplification of n layers with factor sigma each.
inline double compounded_amplification(double per_layer, int layers) { return std::pow(per_layer, layers); }

struct SigmaBar {
    double value = 0.0;
    std::vector<double> per_layer;  // mean over points of ||J_l - R_l||_2

    nlohmann::ordered_json to_json() const { return {{"sigma_bar", value}, {"per_layer", per_layer}}; }
};

inline SigmaBar sigma_bar_from(const std::vector<double>& per_layer) {
    SigmaBar s;
    s.per_layer = per_layer;
    double sum = 0.0;
    for (double x : per_layer) sum += x;
    s.value = per_layer.empty() ? 0.0 : sum / static_cast<double>(per_layer.size());
    return s;
}

/// Generic form: mean over layers of the point-averaged ||J - I||_2.
inline SigmaBar estimate_sigma_bar(const std::vector<BatchMap>& layers, const std::vector<Vector>& points,
                                   RngStream& rng, double eps = 1e-4) {
    std::vector<double> per_layer;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        double s = 0.0;
        for (const auto& y : points) s += probe_layer(layers[l], y, rng, static_cast<int>(l), eps).norm_delta;
        per_layer.push_back(s / static_cast<double>(points.size()));
    }
    return sigma_bar_from(per_layer);
}

/// Over all atomic transforms of a flow. A permutation's Jacobian is the
/// permutation itself, so its deviation is measured against it (zero).
inline SigmaBar estimate_sigma_bar(const FlowModel& model, const Matrix& v_points, const Matrix* u_points,
                                   RngStream& rng, double eps = 1e-4) {
    const FlowLayers fl(model, v_points, u_points);
    std::vector<double> per_layer;
    for (int l = 0; l < fl.count(); ++l) {
        if (fl.kind(l) == AtomicKind::permutation) {
            per_layer.push_back(0.0);
            continue;
        }
        const Matrix ref = fl.reference(l);
        double s = 0.0;
        for (Index p = 0; p < fl.points(); ++p)
            s += probe_layer(fl.map(l, p), fl.input(l, p), rng, l, eps, 500, &ref).norm_delta;
        per_layer.push_back(s / static_cast<double>(fl.points()));
    }
    return sigma_bar_from(per_layer);
}

/// Smallest k whose top-k PCA eigenvalues explain >= threshold of the variance.
inline int estimate_d_eff(const Matrix& values, double threshold = 0.95) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("d_eff: threshold must lie in (0, 1)");
    FLOWSUFF_EXPECT(values.cols() >= 2, "d_eff: need at least two rows");
    const Matrix centered = values.colwise() - values.rowwise().mean();
    const Matrix cov = centered * centered.transpose() / static_cast<double>(values.cols() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov, Eigen::EigenvaluesOnly);
    Vector ev = es.eigenvalues().reverse().cwiseMax(1e-12);
    const double total = ev.sum();
    double acc = 0.0;
    for (Index k = 0; k < ev.size(); ++k) {
        acc += ev(k);
        if (acc >= threshold * total) return static_cast<int>(k + 1);
    }
    return static_cast<int>(ev.size());
}

inline int estimate_d_eff(const EmbeddingSet& emb, double threshold = 0.95) {
    return estimate_d_eff(emb.values, threshold);
}

}  // namespace flowsuff
