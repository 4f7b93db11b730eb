#pragma once

#include "flowsuff/flow/flow_model.hpp"
#include "flowsuff/numcore/embedding.hpp"
#include "flowsuff/numcore/optim.hpp"
#include "flowsuff/numcore/rng.hpp"
#include "flowsuff/training/split.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace flowsuff {

enum class Stage { marginal, conditional };

inline const char* to_string(Stage s) { return s == Stage::marginal ? "marginal" : "conditional"; }

struct TrainConfig {
    Stage stage = Stage::marginal;
    double lr = 2e-2;
    double weight_decay = 1e-3;
    double ema_decay = 0.999;
    int batch_size = 256;
    int accum_steps = 2;
    int max_epochs = 1000;
    int patience = 50;
    double final_lr_factor = 1e-4;
    std::uint64_t seed = 0;
    int rank = 64;  // conditioning bottleneck (conditional stage only)
    FlowConfig flow;

    static TrainConfig marginal_defaults() { return {}; }

    static TrainConfig conditional_defaults() {
        TrainConfig c;
        c.stage = Stage::conditional;
        c.lr = 1e-1;
        c.batch_size = 64;
        c.accum_steps = 4;
        c.max_epochs = 500;
        return c;
    }

    /// Short schedule for small corpora (a few thousand rows, seconds per fit).
    static TrainConfig desk(Stage s) {
        TrainConfig c = s == Stage::marginal ? marginal_defaults() : conditional_defaults();
        c.lr = 1e-2;
        c.ema_decay = 0.99;
        c.batch_size = s == Stage::marginal ? 128 : 64;
        c.accum_steps = s == Stage::marginal ? 1 : 2;
        c.max_epochs = 30;
        c.patience = 8;
        return c;
    }

    nlohmann::ordered_json to_json() const {
        return {{"stage", to_string(stage)},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"ema_decay", ema_decay},
                {"batch_size", batch_size},
                {"accum_steps", accum_steps},
                {"max_epochs", max_epochs},
                {"patience", patience},
                {"final_lr_factor", final_lr_factor},
                {"seed", seed},
                {"rank", rank},
                {"flow", flow.to_json()}};
    }

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
        if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in (0, 1)");
        if (batch_size < 1 || accum_steps < 1 || max_epochs < 0 || patience < 1)
            throw ConfigError("train: batch_size, accum_steps, patience must be >= 1 and max_epochs >= 0");
        if (rank < 1) throw ConfigError("train: rank must be >= 1");
    }
};

struct TrainRecord {
    Stage stage = Stage::marginal;
    std::vector<double> train_nll;  // per epoch, running mean over the epoch's micro-batches
    std::vector<double> val_nll;    // per epoch, EMA weights; entry 0 is the initial model
    int best_epoch = 0;
    double initial_val_nll = 0.0;
    double final_train_nll = 0.0;  // L_train of the reported (EMA, best-val) model
    double final_val_nll = 0.0;    // L_val of the reported model
    double m_train = 0.0;          // max |NLL| over the training split
    double m_val = 0.0;            // max |NLL| over the validation split
    std::int64_t optimizer_steps = 0;
    std::int64_t skipped_steps = 0;
    double wall_seconds = 0.0;

    nlohmann::ordered_json to_json(bool include_wall_time = true) const {
        nlohmann::ordered_json j;
        j["stage"] = to_string(stage);
        j["epochs"] = static_cast<int>(val_nll.size()) - 1;
        j["best_epoch"] = best_epoch;
        j["initial_val_nll"] = initial_val_nll;
        j["final_train_nll"] = final_train_nll;
        j["final_val_nll"] = final_val_nll;
        j["m_train"] = m_train;
        j["m_val"] = m_val;
        j["optimizer_steps"] = optimizer_steps;
        j["skipped_steps"] = skipped_steps;
        j["train_nll"] = series(train_nll);
        j["val_nll"] = series(val_nll);
        if (include_wall_time) j["wall_seconds"] = wall_seconds;
        return j;
    }

    static TrainRecord from_json(const nlohmann::ordered_json& j) {
        TrainRecord r;
        r.stage = j.at("stage").get<std::string>() == "marginal" ? Stage::marginal : Stage::conditional;
        r.best_epoch = j.at("best_epoch").get<int>();
        r.initial_val_nll = j.at("initial_val_nll").get<double>();
        r.final_train_nll = j.at("final_train_nll").get<double>();
        r.final_val_nll = j.at("final_val_nll").get<double>();
        r.m_train = j.at("m_train").get<double>();
        r.m_val = j.at("m_val").get<double>();
        r.optimizer_steps = j.at("optimizer_steps").get<std::int64_t>();
        r.skipped_steps = j.at("skipped_steps").get<std::int64_t>();
        for (const auto& x : j.at("train_nll"))
            r.train_nll.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
        for (const auto& x : j.at("val_nll"))
            r.val_nll.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
        if (j.contains("wall_seconds")) r.wall_seconds = j["wall_seconds"].get<double>();
        return r;
    }

private:
    static nlohmann::ordered_json series(const std::vector<double>& v) {
        auto a = nlohmann::ordered_json::array();
        for (double x : v) a.push_back(std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(nullptr));
        return a;
    }
};

/// Mean negative log-likelihood of a batch, evaluated in chunks.
inline Vector per_sample_nll(const FlowModel& model, const Matrix& v, const Matrix* u = nullptr,
                             Index chunk = 4096) {
    Vector out(v.cols());
    for (Index start = 0; start < v.cols(); start += chunk) {
        const Index len = std::min(chunk, v.cols() - start);
        const Matrix vb = v.middleCols(start, len);
        if (u) {
            const Matrix ub = u->middleCols(start, len);
            out.segment(start, len) = -model.log_prob(vb, &ub);
        } else {
            out.segment(start, len) = -model.log_prob(vb);
        }
    }
    return out;
}

inline double mean_nll(const FlowModel& model, const Matrix& v, const Matrix* u = nullptr) {
    return per_sample_nll(model, v, u).mean();
}

namespace detail {

inline double eval_or_nan(const FlowModel& model, const Matrix& v, const Matrix* u) {
    try {
        return mean_nll(model, v, u);
    } catch (const DensityError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

/// Minibatch AdamW + EMA loop shared by both stages. On return the model
/// holds the EMA weights with the best validation NLL, rounded to float32.
inline void fit(FlowModel& model, const Matrix& v_train, const Matrix& v_val, const Matrix* u_train,
                const Matrix* u_val, const TrainConfig& cfg, RngStream& rng, TrainRecord& rec) {
    const auto t0 = std::chrono::steady_clock::now();
    auto params = model.parameters();
    zero_grads(params);
    AdamW opt(params, {cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8, cfg.accum_steps});
    EmaState ema(params, cfg.ema_decay);

    const Index m = v_train.cols();
    const Index batches = (m + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t steps_per_epoch = (batches + cfg.accum_steps - 1) / cfg.accum_steps;
    const double total_steps = std::max<double>(1.0, static_cast<double>(steps_per_epoch) * cfg.max_epochs);
    const double lr_min = cfg.lr * cfg.final_lr_factor;
    auto lr_at = [&](std::int64_t t) {
        const double frac = std::min(1.0, static_cast<double>(t) / total_steps);
        return lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
    };

    rec.initial_val_nll = eval_or_nan(model, v_val, u_val);
    rec.val_nll.push_back(rec.initial_val_nll);
    rec.train_nll.push_back(std::numeric_limits<double>::quiet_NaN());
    double best = std::isfinite(rec.initial_val_nll) ? rec.initial_val_nll : std::numeric_limits<double>::infinity();
    std::vector<Matrix> best_weights = snapshot(params);
    rec.best_epoch = 0;
    const double blowup = 10.0 * std::max(1.0, std::abs(rec.initial_val_nll));
    int bad_epochs = 0;
    std::int64_t step = 0;

    std::vector<int> order(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double nll_sum = 0.0;
        Index nll_count = 0;
        int micro = 0;
        for (Index b = 0; b < batches; ++b) {
            const Index start = b * cfg.batch_size;
            const Index len = std::min<Index>(cfg.batch_size, m - start);
            Matrix vb(v_train.rows(), len), ub;
            if (u_train) ub.resize(u_train->rows(), len);
            for (Index i = 0; i < len; ++i) {
                const int r = order[static_cast<std::size_t>(start + i)];
                vb.col(i) = v_train.col(r);
                if (u_train) ub.col(i) = u_train->col(r);
            }
            FlowModel::Tape tape;
            try {
                const Vector lp = model.forward(vb, u_train ? &ub : nullptr, tape);
                nll_sum -= lp.sum();
                nll_count += len;
                model.backward(tape, Vector::Constant(len, -1.0 / static_cast<double>(len)));
            } catch (const DensityError&) {
                for (auto* p : params) p->grad.setConstant(std::numeric_limits<double>::quiet_NaN());
            }
            ++micro;
            if (micro == cfg.accum_steps || b + 1 == batches) {
                opt.step(params, lr_at(step), micro);
                ++step;
                ema.update(params);
                micro = 0;
            }
        }
        rec.train_nll.push_back(nll_count > 0 ? nll_sum / static_cast<double>(nll_count)
                                              : std::numeric_limits<double>::quiet_NaN());

        const auto current = snapshot(params);
        restore(params, ema.shadow());
        const double val = eval_or_nan(model, v_val, u_val);
        restore(params, current);
        rec.val_nll.push_back(val);

        if (std::isfinite(val) && val < best) {
            best = val;
            best_weights = ema.shadow();
            rec.best_epoch = epoch;
        }
        bad_epochs = (!std::isfinite(val) || val > blowup) ? bad_epochs + 1 : 0;
        if (bad_epochs >= 20) {
            std::ostringstream msg;
            msg << to_string(cfg.stage) << " training diverged at epoch " << epoch << ": val NLL " << val
                << " (initial " << rec.initial_val_nll << ", best " << best << " at epoch " << rec.best_epoch
                << ", skipped steps " << opt.skipped_steps() << ")";
            throw TrainingDivergence(msg.str());
        }
        if (epoch - rec.best_epoch >= cfg.patience) break;
    }

    restore(params, best_weights);
    round_to_f32(params);
    zero_grads(params);
    rec.optimizer_steps = opt.step_count();
    rec.skipped_steps = opt.skipped_steps();

    const Vector tr = per_sample_nll(model, v_train, u_train);
    const Vector va = per_sample_nll(model, v_val, u_val);
    rec.final_train_nll = tr.mean();
    rec.final_val_nll = va.mean();
    rec.m_train = tr.cwiseAbs().maxCoeff();
    rec.m_val = va.cwiseAbs().maxCoeff();
    if (!std::isfinite(rec.final_train_nll) || !std::isfinite(rec.final_val_nll))
        throw TrainingDivergence(std::string(to_string(cfg.stage)) + " training produced non-finite NLL");
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

struct TrainedFlow {
    FlowModel model;
    TrainRecord record;
};

/// Stage 1: fit p(v) on the training rows of V.
inline TrainedFlow train_marginal(const EmbeddingSet& V, const SplitSpec& split, const TrainConfig& cfg) {
    cfg.validate();
    FLOWSUFF_EXPECT(cfg.stage == Stage::marginal, "train_marginal: config stage must be marginal");
    const Matrix v_train = V.take(split.train);
    const Matrix v_val = V.take(split.val);
    RngStream root(cfg.seed);
    RngStream build_rng = root.split(1);
    RngStream loop_rng = root.split(2);
    TrainedFlow out;
    out.model = FlowModel::build(V.dim(), cfg.flow, build_rng, cfg.seed);
    out.model.standardizer() = Standardizer::fit(v_train);
    out.record.stage = Stage::marginal;
    out.model.initialize_actnorm(v_train);
    detail::fit(out.model, v_train, v_val, nullptr, nullptr, cfg, loop_rng, out.record);
    return out;
}

/// Stage 2: clone the marginal flow, attach the zero-initialized low-rank
/// branch and fit p(v | u).
inline TrainedFlow train_conditional(const EmbeddingSet& U, const EmbeddingSet& V, const FlowModel& marginal,
                                     const SplitSpec& split, const TrainConfig& cfg) {
    cfg.validate();
    FLOWSUFF_EXPECT(cfg.stage == Stage::conditional, "train_conditional: config stage must be conditional");
    if (U.rows() != V.rows())
        throw AlignmentError("train_conditional: source has " + std::to_string(U.rows()) + " rows, target has " +
                             std::to_string(V.rows()));
    FLOWSUFF_EXPECT(!marginal.conditional(), "train_conditional: expected a marginal flow");
    const Matrix v_train = V.take(split.train), v_val = V.take(split.val);
    const Matrix u_train = U.take(split.train), u_val = U.take(split.val);
    RngStream root(cfg.seed);
    RngStream clone_rng = root.split(3);
    RngStream loop_rng = root.split(4);
    TrainedFlow out;
    out.model = marginal.clone_to_conditional(U.dim(), cfg.rank, clone_rng, &u_train);
    out.record.stage = Stage::conditional;
    detail::fit(out.model, v_train, v_val, &u_train, &u_val, cfg, loop_rng, out.record);
    return out;
}

}  // namespace flowsuff
