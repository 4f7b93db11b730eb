#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/param.hpp"
#include "flowsuff/numcore/rng.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace flowsuff {

enum class Activation { tanh, relu, identity };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + s + "'");
}

struct DenseLayer {
    ParamTensor weight;  // out x in
    ParamTensor bias;    // out x 1
    Activation act = Activation::identity;

    Index in_dim() const { return weight.value.cols(); }
    Index out_dim() const { return weight.value.rows(); }
};

/// Per-call activations kept for the backward pass. Columns are samples.
struct MlpCache {
    std::vector<Matrix> inputs;  // inputs[i] feeds layer i
    std::vector<Matrix> pre;     // pre-activations of layer i
};

/// Fully connected network operating on column batches. An optional
/// additive injection is applied to the first hidden activation; the flow's
/// low-rank conditioning branch enters there.
class Mlp {
public:
    Mlp() = default;

    /// dims = {in, h1, ..., out}. Hidden layers use `hidden`; the output layer
    /// is linear. With zero_last the output layer starts at exactly zero.
    Mlp(const std::vector<int>& dims, Activation hidden, RngStream& rng, bool zero_last,
        const std::string& prefix = "mlp") {
        FLOWSUFF_EXPECT(dims.size() >= 2, "Mlp needs at least input and output dims");
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            FLOWSUFF_EXPECT(dims[i] >= 0 && dims[i + 1] > 0, "Mlp: invalid layer width");
            const bool last = i + 2 == dims.size();
            DenseLayer layer;
            Matrix w(dims[i + 1], dims[i]);
            if (last && zero_last) {
                w.setZero();
            } else {
                const double limit = std::sqrt(6.0 / static_cast<double>(dims[i] + dims[i + 1]));
                for (Index c = 0; c < w.cols(); ++c)
                    for (Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-limit, limit);
            }
            layer.weight = ParamTensor(prefix + ".l" + std::to_string(i) + ".weight", std::move(w));
            layer.bias = ParamTensor(prefix + ".l" + std::to_string(i) + ".bias",
                                     Matrix::Zero(dims[i + 1], 1));
            layer.act = last ? Activation::identity : hidden;
            layers.push_back(std::move(layer));
        }
    }

    Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
    Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
    /// Width of the first hidden activation (the injection site).
    Index feature_dim() const { return layers.empty() ? 0 : layers.front().out_dim(); }

    Matrix forward(const Matrix& x, MlpCache* cache = nullptr, const Matrix* inject = nullptr) const {
        FLOWSUFF_EXPECT(x.rows() == input_dim(), "Mlp::forward: input dimension mismatch");
        if (cache) {
            cache->inputs.resize(layers.size());
            cache->pre.resize(layers.size());
        }
        Matrix a = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& L = layers[i];
            Matrix pre = L.weight.value * a;
            pre.colwise() += L.bias.value.col(0);
            Matrix out = activate(pre, L.act);
            if (i == 0 && inject) {
                FLOWSUFF_EXPECT(inject->rows() == out.rows() && inject->cols() == out.cols(),
                                "Mlp::forward: injection shape mismatch");
                out += *inject;
            }
            if (cache) {
                cache->inputs[i] = std::move(a);
                cache->pre[i] = std::move(pre);
            }
            a = std::move(out);
        }
        if (!a.allFinite()) throw TrainingDivergence("Mlp::forward: non-finite activation");
        return a;
    }

    /// Accumulates parameter gradients of sum(grad_out .* output) and returns
    /// the gradient with respect to the input batch.
    Matrix backward(const MlpCache& cache, const Matrix& grad_out, Matrix* inject_grad = nullptr) {
        FLOWSUFF_EXPECT(cache.pre.size() == layers.size(), "Mlp::backward: stale cache");
        FLOWSUFF_EXPECT(grad_out.rows() == output_dim(), "Mlp::backward: upstream dimension mismatch");
        Matrix g = grad_out;
        for (std::size_t k = layers.size(); k-- > 0;) {
            auto& L = layers[k];
            if (k == 0 && inject_grad) *inject_grad = g;
            Matrix g_pre = activation_backward(cache.pre[k], g, L.act);
            L.weight.grad.noalias() += g_pre * cache.inputs[k].transpose();
            L.bias.grad.col(0) += g_pre.rowwise().sum();
            g = L.weight.value.transpose() * g_pre;
        }
        return g;
    }

    ParamList parameters() {
        ParamList out;
        for (auto& L : layers) {
            out.push_back(&L.weight);
            out.push_back(&L.bias);
        }
        return out;
    }

    std::vector<DenseLayer> layers;

private:
    static Matrix activate(const Matrix& pre, Activation act) {
        switch (act) {
            case Activation::tanh: return pre.array().tanh().matrix();
            case Activation::relu: return pre.cwiseMax(0.0);
            case Activation::identity: return pre;
        }
        return pre;
    }

    static Matrix activation_backward(const Matrix& pre, const Matrix& g, Activation act) {
        switch (act) {
            case Activation::tanh: {
                const Eigen::ArrayXXd t = pre.array().tanh();
                return (g.array() * (1.0 - t * t)).matrix();
            }
            case Activation::relu: return (g.array() * (pre.array() > 0.0).cast<double>()).matrix();
            case Activation::identity: return g;
        }
        return g;
    }
};

struct MlpForwardBackward {
    Vector output;
    Vector input_grad;
};

/// Single-sample forward + backward. Parameter gradients are accumulated into
/// the network's ParamTensors.
inline MlpForwardBackward mlp_forward_backward(Mlp& net, const Vector& input, const Vector& upstream_grad) {
    FLOWSUFF_EXPECT(input.size() == net.input_dim(), "mlp_forward_backward: input dimension mismatch");
    FLOWSUFF_EXPECT(upstream_grad.size() == net.output_dim(),
                    "mlp_forward_backward: upstream dimension mismatch");
    MlpCache cache;
    Matrix out = net.forward(input, &cache);
    Matrix g = net.backward(cache, upstream_grad);
    return {out.col(0), g.col(0)};
}

}  // namespace flowsuff
