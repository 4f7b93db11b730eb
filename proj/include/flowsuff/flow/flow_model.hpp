#pragma once

#include "flowsuff/flow/layers.hpp"
#include "flowsuff/flow/spline.hpp"
#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/mlp.hpp"
#include "flowsuff/numcore/param.hpp"
#include "flowsuff/numcore/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace flowsuff {

struct FlowConfig {
    int blocks = 6;
    SplineConfig spline;
    int hidden_width = 0;  // 0 selects max(64, d)
    int hidden_layers = 2;
    Activation activation = Activation::tanh;

    int width_for(Index d) const {
        return hidden_width > 0 ? hidden_width : static_cast<int>(std::max<Index>(64, d));
    }

    nlohmann::ordered_json to_json() const {
        return {{"blocks", blocks},
                {"bins", spline.bins},
                {"tail_bound", spline.tail_bound},
                {"min_bin_width", spline.min_bin_width},
                {"min_bin_height", spline.min_bin_height},
                {"min_derivative", spline.min_derivative},
                {"hidden_width", hidden_width},
                {"hidden_layers", hidden_layers},
                {"activation", to_string(activation)}};
    }

    static FlowConfig from_json(const nlohmann::ordered_json& j) {
        FlowConfig c;
        c.blocks = j.at("blocks").get<int>();
        c.spline.bins = j.at("bins").get<int>();
        c.spline.tail_bound = j.at("tail_bound").get<double>();
        c.spline.min_bin_width = j.at("min_bin_width").get<double>();
        c.spline.min_bin_height = j.at("min_bin_height").get<double>();
        c.spline.min_derivative = j.at("min_derivative").get<double>();
        c.hidden_width = j.at("hidden_width").get<int>();
        c.hidden_layers = j.at("hidden_layers").get<int>();
        c.activation = activation_from_string(j.at("activation").get<std::string>());
        return c;
    }
};

struct FlowBlock {
    CouplingLayer coupling;
    ActNormLayer actnorm;
    Permutation permutation;
};

enum class AtomicKind { coupling, actnorm, permutation };

/// Composite invertible transform v -> z with a standard-normal base.
///
/// Data enter through a fixed standardizer and then L blocks of
/// (spline coupling, ActNorm, permutation). Batches are d x n matrices whose
/// columns are samples.
class FlowModel {
public:
    /// Intermediate state of a batched forward pass kept for backward().
    struct Tape {
        struct BlockTape {
            Matrix coupling_in;
            Matrix params;
            MlpCache cache;
            Matrix actnorm_in;
        };
        std::vector<BlockTape> blocks;
        Matrix source;  // standardized u
        Matrix code;    // A * standardized u
        Matrix z;
        Vector logdet;
    };

    FlowModel() = default;

    Index dim() const noexcept { return dim_; }
    const FlowConfig& config() const noexcept { return config_; }
    std::uint64_t seed() const noexcept { return seed_; }
    int atomic_count() const noexcept { return 3 * static_cast<int>(blocks_.size()); }
    bool conditional() const noexcept { return conditioner_.has_value(); }

    const Standardizer& standardizer() const noexcept { return standardizer_; }
    Standardizer& standardizer() noexcept { return standardizer_; }
    const std::vector<FlowBlock>& blocks() const noexcept { return blocks_; }
    std::vector<FlowBlock>& blocks() noexcept { return blocks_; }
    const std::optional<LowRankConditioner>& conditioner() const noexcept { return conditioner_; }
    std::optional<LowRankConditioner>& conditioner() noexcept { return conditioner_; }

    static FlowModel build(Index d, const FlowConfig& cfg, RngStream& rng, std::uint64_t seed = 0) {
        FLOWSUFF_EXPECT(d >= 1, "build_flow: dimension must be positive");
        FLOWSUFF_EXPECT(cfg.blocks >= 1, "build_flow: need at least one block");
        FLOWSUFF_EXPECT(cfg.spline.bins >= 2 && cfg.spline.bins <= kMaxSplineBins, "build_flow: bins out of range");
        FLOWSUFF_EXPECT(cfg.spline.tail_bound > 0.0, "build_flow: tail bound must be positive");
        FLOWSUFF_EXPECT(cfg.hidden_layers >= 1, "build_flow: need at least one hidden layer");
        FlowModel m;
        m.dim_ = d;
        m.config_ = cfg;
        m.seed_ = seed;
        m.standardizer_ = Standardizer::identity(d);
        const int width = cfg.width_for(d);
        for (int l = 0; l < cfg.blocks; ++l) {
            FlowBlock b;
            const std::string prefix = "block" + std::to_string(l);
            auto& c = b.coupling;
            c.spline = cfg.spline;
            for (int i = 0; i < d; ++i) {
                const bool transform = d == 1 || (i % 2) == (l % 2);
                (transform ? c.transform_idx : c.identity_idx).push_back(i);
            }
            std::vector<int> dims{static_cast<int>(c.identity_idx.size())};
            for (int h = 0; h < cfg.hidden_layers; ++h) dims.push_back(width);
            dims.push_back(static_cast<int>(c.transform_idx.size()) * cfg.spline.params_per_dim());
            c.net = Mlp(dims, cfg.activation, rng, /*zero_last=*/true, prefix + ".coupling");
            b.actnorm = ActNormLayer(d, prefix + ".actnorm");
            b.permutation.perm = rng.permutation(static_cast<std::size_t>(d));
            m.blocks_.push_back(std::move(b));
        }
        return m;
    }

    /// Copy of this (marginal) flow with a zero-initialized low-rank
    /// conditioning branch attached.
    FlowModel clone_to_conditional(Index source_dim, Index rank, RngStream& rng,
                                   const Matrix* source_train = nullptr) const {
        FLOWSUFF_EXPECT(!conditional(), "clone_to_conditional: flow is already conditional");
        if (source_dim < 1) throw ConfigError("clone_to_conditional: source dimension must be >= 1");
        if (rank < 1) throw ConfigError("clone_to_conditional: rank must be >= 1");
        const Index feature = blocks_.front().coupling.net.feature_dim();
        const Index r = std::min(rank, source_dim);
        if (r > feature)
            throw ConfigError("clone_to_conditional: rank " + std::to_string(r) +
                              " exceeds conditioner feature width " + std::to_string(feature));
        FlowModel m = *this;
        LowRankConditioner c;
        c.source_dim = source_dim;
        c.rank = r;
        c.source_standardizer =
            source_train ? Standardizer::fit(*source_train) : Standardizer::identity(source_dim);
        Matrix a = rng.normal_matrix(c.rank, source_dim) / std::sqrt(static_cast<double>(source_dim));
        c.A = ParamTensor("conditioner.A", std::move(a));
        for (std::size_t l = 0; l < blocks_.size(); ++l)
            c.B.emplace_back("conditioner.B" + std::to_string(l),
                             Matrix::Zero(blocks_[l].coupling.net.output_dim(), c.rank));
        m.conditioner_ = std::move(c);
        return m;
    }

    ParamList parameters() {
        ParamList out;
        for (auto& b : blocks_) {
            for (auto* p : b.coupling.net.parameters()) out.push_back(p);
            out.push_back(&b.actnorm.log_scale);
            out.push_back(&b.actnorm.shift);
        }
        if (conditioner_) {
            out.push_back(&conditioner_->A);
            for (auto& b : conditioner_->B) out.push_back(&b);
        }
        return out;
    }

    ConstParamList parameters() const {
        ConstParamList out;
        for (auto* p : const_cast<FlowModel*>(this)->parameters()) out.push_back(p);
        return out;
    }

    /// Data-dependent ActNorm initialization: every ActNorm layer is set from
    /// the batch that reaches it.
    void initialize_actnorm(const Matrix& v, const Matrix* u = nullptr) {
        Matrix x = standardizer_.apply(v);
        const Matrix code = source_code(u, v.cols());
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            Vector ld = Vector::Zero(x.cols());
            x = coupling_forward(l, x, code, ld, nullptr);
            blocks_[l].actnorm.initialize(x);
            x = blocks_[l].permutation.forward(blocks_[l].actnorm.forward(x));
        }
    }

    /// Per-sample log-density (nats) of a d x n batch.
    Vector log_prob(const Matrix& v, const Matrix* u = nullptr) const {
        Tape tape;
        return forward(v, u, tape, /*keep=*/false);
    }

    double point_log_prob(const Vector& v) const { return log_prob(Matrix(v), nullptr)(0); }
    double point_log_prob(const Vector& v, const Vector& u) const {
        const Matrix um(u);
        return log_prob(Matrix(v), &um)(0);
    }

    /// Full forward pass v -> z. Returns per-sample log p(v).
    Vector forward(const Matrix& v, const Matrix* u, Tape& tape, bool keep = true) const {
        FLOWSUFF_EXPECT(v.rows() == dim_, "flow: data dimension mismatch");
        if (conditional()) FLOWSUFF_EXPECT(u != nullptr, "flow: conditional flow requires a source batch");
        if (u) FLOWSUFF_EXPECT(u->cols() == v.cols(), "flow: source/target batch size mismatch");
        const Index n = v.cols();
        if (conditioner_ && u) {
            tape.source = conditioner_->source_standardizer.apply(*u);
            tape.code = conditioner_->A.value * tape.source;
        } else {
            tape.source.resize(0, 0);
            tape.code.resize(0, 0);
        }
        Matrix x = standardizer_.apply(v);
        Vector ld = Vector::Constant(n, standardizer_.log_abs_det());
        tape.blocks.resize(keep ? blocks_.size() : 0);
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto& b = blocks_[l];
            Tape::BlockTape* bt = keep ? &tape.blocks[l] : nullptr;
            if (bt) bt->coupling_in = x;
            try {
                x = coupling_forward(l, x, tape.code, ld, bt);
            } catch (const TrainingDivergence& e) {
                throw DensityError(std::string("flow: non-finite conditioner output: ") + e.what(),
                                   static_cast<int>(3 * l));
            }
            check_finite(x, 3 * l);
            if (bt) bt->actnorm_in = x;
            x = b.actnorm.forward(x);
            ld.array() += b.actnorm.log_abs_det();
            check_finite(x, 3 * l + 1);
            x = b.permutation.forward(x);
        }
        Vector lp = (-0.5 * x.colwise().squaredNorm()).transpose();
        lp.array() += -0.5 * static_cast<double>(dim_) * kLog2Pi;
        lp += ld;
        if (!lp.allFinite()) throw DensityError("flow: non-finite log-density", atomic_count());
        tape.z = std::move(x);
        tape.logdet = std::move(ld);
        return lp;
    }

    /// Accumulate parameter gradients of sum_i weight_i * log p(v_i).
    void backward(const Tape& tape, const Vector& weight) {
        FLOWSUFF_EXPECT(tape.blocks.size() == blocks_.size(), "flow backward: tape was not recorded");
        FLOWSUFF_EXPECT(weight.size() == tape.z.cols(), "flow backward: weight length mismatch");
        const Index n = tape.z.cols();
        Matrix g = -(tape.z.array().rowwise() * weight.transpose().array()).matrix();
        Matrix g_code;
        if (conditioner_ && tape.code.size() > 0) g_code = Matrix::Zero(tape.code.rows(), n);
        const double wsum = weight.sum();
        for (std::size_t l = blocks_.size(); l-- > 0;) {
            auto& b = blocks_[l];
            const auto& bt = tape.blocks[l];
            g = b.permutation.inverse(g);
            const Vector scale = b.actnorm.scale();
            b.actnorm.shift.grad.col(0) += g.rowwise().sum();
            b.actnorm.log_scale.grad.col(0) +=
                ((g.array() * bt.actnorm_in.array()).rowwise().sum() * scale.array()).matrix();
            b.actnorm.log_scale.grad.array() += wsum;
            g = (g.array().colwise() * scale.array()).matrix();
            g = coupling_backward(l, bt, g, weight, g_code.size() > 0 ? &g_code : nullptr, tape.code);
        }
        if (g_code.size() > 0) conditioner_->A.grad.noalias() += g_code * tape.source.transpose();
    }

    /// Latent codes z = T(v).
    Matrix to_latent(const Matrix& v, const Matrix* u = nullptr) const {
        Tape tape;
        forward(v, u, tape, false);
        return tape.z;
    }

    /// Inverse map z -> v. With check, the round trip is verified to 1e-5.
    Matrix inverse(const Matrix& z, const Matrix* u = nullptr, bool check = true) const {
        FLOWSUFF_EXPECT(z.rows() == dim_, "flow inverse: latent dimension mismatch");
        if (conditional()) FLOWSUFF_EXPECT(u != nullptr, "flow inverse: conditional flow requires a source batch");
        const Matrix code = source_code(u, z.cols());
        Matrix x = z;
        for (std::size_t l = blocks_.size(); l-- > 0;) {
            const auto& b = blocks_[l];
            x = b.actnorm.inverse(b.permutation.inverse(x));
            x = coupling_inverse(l, x, code);
        }
        Matrix v = standardizer_.invert(x);
        if (check) {
            const Matrix back = to_latent(v, u);
            const double resid = (back - z).cwiseAbs().maxCoeff();
            if (!(resid <= 1e-5))
                throw InvertibilityError("flow inverse: round-trip residual " + std::to_string(resid) +
                                         " exceeds 1e-5");
        }
        return v;
    }

    /// Draw n samples by pushing base noise through the inverse.
    Matrix sample(Index n, RngStream& rng, const Matrix* u = nullptr) const {
        return inverse(rng.normal_matrix(dim_, n), u, /*check=*/false);
    }

    /// Apply atomic transform `index` (coupling/ActNorm/permutation in block
    /// order) to standardized-space points. Conditioning enters via `code`.
    Matrix apply_atomic(int index, const Matrix& y, const Matrix& code = Matrix()) const {
        FLOWSUFF_EXPECT(index >= 0 && index < atomic_count(), "apply_atomic: index out of range");
        const auto l = static_cast<std::size_t>(index / 3);
        switch (atomic_kind(index)) {
            case AtomicKind::coupling: {
                Vector ld = Vector::Zero(y.cols());
                return coupling_forward(l, y, code, ld, nullptr);
            }
            case AtomicKind::actnorm: return blocks_[l].actnorm.forward(y);
            case AtomicKind::permutation: return blocks_[l].permutation.forward(y);
        }
        return y;
    }

    static AtomicKind atomic_kind(int index) {
        switch (index % 3) {
            case 0: return AtomicKind::coupling;
            case 1: return AtomicKind::actnorm;
            default: return AtomicKind::permutation;
        }
    }

    /// Conditioning code A * standardize(u) for a source batch (empty when
    /// the flow is marginal or u is absent).
    Matrix source_code(const Matrix* u, Index n) const {
        if (!conditioner_ || !u) return Matrix();
        FLOWSUFF_EXPECT(u->cols() == n, "flow: source/target batch size mismatch");
        return conditioner_->code(*u);
    }

private:
    static void check_finite(const Matrix& x, std::size_t layer) {
        if (!x.allFinite())
            throw DensityError("flow: non-finite intermediate at atomic layer " + std::to_string(layer),
                               static_cast<int>(layer));
    }

    Matrix injection(std::size_t l, const Matrix& code) const {
        return conditioner_->B[l].value * code;
    }

    Matrix coupling_forward(std::size_t l, const Matrix& x, const Matrix& code, Vector& ld,
                            Tape::BlockTape* bt) const {
        const auto& c = blocks_[l].coupling;
        const Matrix xi = c.gather(x, c.identity_idx);
        Matrix params = c.net.forward(xi, bt ? &bt->cache : nullptr, nullptr);
        if (conditioner_ && code.size() > 0) params.noalias() += injection(l, code);
        Matrix y = x;
        const int ppd = c.spline.params_per_dim();
        for (Index s = 0; s < x.cols(); ++s) {
            const double* col = params.col(s).data();
            double acc = 0.0;
            for (std::size_t j = 0; j < c.transform_idx.size(); ++j) {
                const int row = c.transform_idx[j];
                const RqsSpline spline(col + static_cast<Index>(j) * ppd, c.spline);
                const auto out = spline.forward(x(row, s));
                y(row, s) = out.y;
                acc += out.logdet;
            }
            ld(s) += acc;
        }
        if (bt) bt->params = std::move(params);
        return y;
    }

    Matrix coupling_backward(std::size_t l, const Tape::BlockTape& bt, const Matrix& g_out,
                             const Vector& weight, Matrix* g_code, const Matrix& code) {
        auto& c = blocks_[l].coupling;
        const int ppd = c.spline.params_per_dim();
        const Index n = g_out.cols();
        Matrix g_params = Matrix::Zero(bt.params.rows(), n);
        Matrix g_in = g_out;
        for (Index s = 0; s < n; ++s) {
            const double* col = bt.params.col(s).data();
            double* gcol = g_params.col(s).data();
            for (std::size_t j = 0; j < c.transform_idx.size(); ++j) {
                const int row = c.transform_idx[j];
                const RqsSpline spline(col + static_cast<Index>(j) * ppd, c.spline);
                g_in(row, s) = spline.backward(bt.coupling_in(row, s), g_out(row, s), weight(s),
                                               gcol + static_cast<Index>(j) * ppd);
            }
        }
        const Matrix g_identity = c.net.backward(bt.cache, g_params, nullptr);
        for (std::size_t i = 0; i < c.identity_idx.size(); ++i)
            g_in.row(c.identity_idx[i]) += g_identity.row(static_cast<Index>(i));
        if (conditioner_ && g_code != nullptr) {
            auto& B = conditioner_->B[l];
            B.grad.noalias() += g_params * code.transpose();
            g_code->noalias() += B.value.transpose() * g_params;
        }
        return g_in;
    }

    Matrix coupling_inverse(std::size_t l, const Matrix& y, const Matrix& code) const {
        const auto& c = blocks_[l].coupling;
        const Matrix yi = c.gather(y, c.identity_idx);
        Matrix params = c.net.forward(yi, nullptr, nullptr);
        if (conditioner_ && code.size() > 0) params.noalias() += injection(l, code);
        Matrix x = y;
        const int ppd = c.spline.params_per_dim();
        for (Index s = 0; s < y.cols(); ++s) {
            const double* col = params.col(s).data();
            for (std::size_t j = 0; j < c.transform_idx.size(); ++j) {
                const int row = c.transform_idx[j];
                const RqsSpline spline(col + static_cast<Index>(j) * ppd, c.spline);
                x(row, s) = spline.inverse(y(row, s)).y;
            }
        }
        return x;
    }

    Index dim_ = 0;
    FlowConfig config_;
    std::uint64_t seed_ = 0;
    Standardizer standardizer_;
    std::vector<FlowBlock> blocks_;
    std::optional<LowRankConditioner> conditioner_;
};

inline FlowModel build_flow(Index d, const FlowConfig& cfg, RngStream& rng) {
    return FlowModel::build(d, cfg, rng, rng.seed());
}

inline FlowModel clone_to_conditional(const FlowModel& marginal, Index source_dim, Index rank, RngStream& rng,
                                      const Matrix* source_train = nullptr) {
    return marginal.clone_to_conditional(source_dim, rank, rng, source_train);
}

/// log p(v [| u]) for a single point.
inline double flow_log_prob(const FlowModel& model, const Vector& v, const Vector* u = nullptr) {
    return u ? model.point_log_prob(v, *u) : model.point_log_prob(v);
}

inline Vector flow_inverse(const FlowModel& model, const Vector& z, const Vector* u = nullptr) {
    if (u) {
        const Matrix um(*u);
        return model.inverse(Matrix(z), &um).col(0);
    }
    return model.inverse(Matrix(z)).col(0);
}

}  // namespace flowsuff
